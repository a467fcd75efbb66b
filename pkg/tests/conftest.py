import os

import numpy as np
import pytest
import torch

from usd_fss.encoders import EncoderConfig, FrozenBundle
from usd_fss.episodes import generate_synthetic_dataset

# Collected by test_acceptance.py, printed at the end of the session.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def raw_config():
    """Stand-ins without warm-up: seeded random weights, instant to build."""
    return EncoderConfig(pretrain_steps=0, sam_pretrain_steps=0)


@pytest.fixture(scope="session")
def raw_bundle(raw_config, tmp_path_factory):
    return FrozenBundle.create(raw_config, tmp_path_factory.mktemp("enc"))


@pytest.fixture(scope="session")
def warm_bundle():
    """Default stand-ins with both warm-ups; built once and cached on disk."""
    return FrozenBundle.create(EncoderConfig())


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    return generate_synthetic_dataset(8, 20, 64, 0, root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    yield
