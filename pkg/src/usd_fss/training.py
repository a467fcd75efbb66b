"""Episodic training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .encoders import FrozenBundle
from .episodes import Dataset, make_fold_split, sample_episode
from .model import FeatureStore, Pipeline, USDNet, collate, count_learnables, episode_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainResult:
    pipeline: Pipeline
    store: FeatureStore
    losses: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def total_steps(cfg: TrainConfig, n_train_images: int) -> int:
    if cfg.steps is not None:
        return int(cfg.steps)
    return cfg.epochs * max(1, math.ceil(n_train_images / cfg.batch_size))


def build_pipeline(cfg: TrainConfig, bundle: FrozenBundle | None = None, cache_dir=None) -> Pipeline:
    bundle = bundle if bundle is not None else FrozenBundle.create(cfg.encoder, cache_dir)
    torch.manual_seed(cfg.seed)
    return Pipeline(USDNet(cfg), bundle, cfg)


def _episode_ids(episodes: list) -> list:
    return [f"{ep.class_name}:{Path(ep.query_path).name if ep.query_path else '?'}" for ep in episodes]


def _dump_diagnostics(out_dir: Path | None, step: int, episodes: list, batch: dict, out: dict) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite-step{step}.pt"
    torch.save(
        {
            "step": step,
            "episodes": _episode_ids(episodes),
            "batch": batch,
            "outputs": {k: v.detach() for k, v in out.items() if isinstance(v, torch.Tensor)},
        },
        path,
    )
    return path


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir: Path | None = None,
    bundle: FrozenBundle | None = None,
    store: FeatureStore | None = None,
    cache_dir=None,
) -> TrainResult:
    """Train on the training classes of ``cfg.fold``.

    Writes ``loss.jsonl`` and ``checkpoint.pt`` into ``out_dir`` when given.
    Repeated calls with the same configuration and data give identical weights.
    """
    split = make_fold_split(len(dataset.classes), cfg.num_folds, cfg.fold)
    pool = sorted(split.train_classes)
    n_images = sum(len(dataset.index[c]) for c in pool)
    steps = total_steps(cfg, n_images)
    pipeline = build_pipeline(cfg, bundle, cache_dir)
    store = store if store is not None else FeatureStore(pipeline.bundle, cfg)
    net = pipeline.net
    opt = torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=cfg.learning_rate)
    episode_stream = episode_rng(cfg.seed, 1)
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "loss.jsonl", "w")

    result = TrainResult(pipeline, store)
    start = time.perf_counter()
    try:
        for step in range(steps):
            net.train()
            episodes = [
                sample_episode(dataset, pool, cfg.shots, episode_stream) for _ in range(cfg.batch_size)
            ]
            batch = collate(episodes, store)
            rngs = [episode_rng(cfg.seed, 2, step, i) for i in range(len(episodes))]
            out = pipeline.forward(batch, rngs, with_loss=True)
            loss = out["loss"]
            if not torch.isfinite(loss):
                dump = _dump_diagnostics(out_dir, step, episodes, batch, out)
                raise TrainingError(
                    f"non-finite loss at step {step} for episodes {_episode_ids(episodes)}; "
                    f"diagnostics: {dump}"
                )
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            record = {
                "step": step,
                "loss": loss.item(),
                "loss_ref": out["loss_ref"].item(),
                "loss_pred": out["loss_pred"].item(),
            }
            result.losses.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if step % 100 == 0:
                log.info("step %d/%d loss %.4f", step, steps, record["loss"])
    finally:
        if log_file is not None:
            log_file.close()
    result.steps = steps
    result.seconds = time.perf_counter() - start
    net.eval()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.pt", pipeline, opt, steps)
    return result


def manifest(pipeline: Pipeline) -> dict:
    return {
        "frozen_fingerprint": pipeline.bundle.fingerprint,
        "learnable_parameters": count_learnables(pipeline.net),
        "frozen_parameters": sum(p.numel() for p in pipeline.bundle.parameters()),
        "encoder_key": pipeline.cfg.encoder.key(),
    }


def save_checkpoint(path: Path, pipeline: Pipeline, optimizer=None, step: int = 0) -> None:
    torch.save(
        {
            "model_state": pipeline.net.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
            "step": step,
            "config": pipeline.cfg.to_dict(),
            "manifest": manifest(pipeline),
        },
        Path(path),
    )


def load_checkpoint(path: Path, bundle: FrozenBundle | None = None, cache_dir=None) -> Pipeline:
    """Rebuild the pipeline saved at ``path``.

    Raises CheckpointError when the file is unreadable or was trained against
    different frozen weights.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = torch.load(path, map_location="cpu", weights_only=False)
        cfg = TrainConfig.from_dict(data["config"])
        stored = data["manifest"]["frozen_fingerprint"]
        state = data["model_state"]
    except Exception as exc:  # any unpickling failure means a corrupted file
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc
    bundle = bundle if bundle is not None else FrozenBundle.create(cfg.encoder, cache_dir)
    if bundle.fingerprint != stored:
        raise CheckpointError(
            f"frozen weights differ from those used in training "
            f"(checkpoint {stored[:12]}, current {bundle.fingerprint[:12]})"
        )
    pipeline = Pipeline(USDNet(cfg), bundle, cfg)
    try:
        pipeline.net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the model: {exc}") from exc
    pipeline.net.eval()
    return pipeline


def state_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def losses_array(result: TrainResult) -> np.ndarray:
    return np.array([r["loss"] for r in result.losses])
