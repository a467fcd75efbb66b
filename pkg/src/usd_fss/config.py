"""Run configuration.  Every field serialises to a nested JSON document whose
keys follow the dotted names used on the command line (``encoder.seed``,
``lgm.tau``, ``vtpg.tokens``, ...)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import EncoderConfig


@dataclass
class LgmConfig:
    enabled: bool = True
    tau: float = 0.01
    blocks: int = 6
    heads: int = 4
    avg_last: int = 4
    sinkhorn_iters: int = 20
    sinkhorn_tol: float = 1e-6
    box_threshold: float = 0.5
    n_fg: int = 25
    n_bg: int = 25


@dataclass
class VtpgConfig:
    enabled: bool = True
    tokens: int = 8
    heads: int = 4


@dataclass
class TextConfig:
    foreground: str = "a photo of {}"
    background: str = "a photo without {}"


@dataclass
class TrainConfig:
    image_size: int = 64
    epochs: int = 50
    steps: int | None = None
    batch_size: int = 8
    learning_rate: float = 4e-4
    alpha: float = 0.5
    beta: float = 0.5
    seed: int = 0
    fold: int = 0
    num_folds: int = 4
    shots: int = 1
    grad_clip: float = 1.0
    feature_source: str = "fused"  # fused | sam | clip
    prompt_source: str = "query"  # query | support
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lgm: LgmConfig = field(default_factory=LgmConfig)
    vtpg: VtpgConfig = field(default_factory=VtpgConfig)
    text: TextConfig = field(default_factory=TextConfig)

    def __post_init__(self):
        if self.encoder.image_size != self.image_size:
            self.encoder = dataclasses.replace(self.encoder, image_size=self.image_size)
        if self.feature_source not in ("fused", "sam", "clip"):
            raise ValueError(f"unknown feature_source {self.feature_source!r}")
        if self.prompt_source not in ("query", "support"):
            raise ValueError(f"unknown prompt_source {self.prompt_source!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 <= self.fold < self.num_folds:
            raise ValueError(f"fold must be in [0, {self.num_folds})")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"]["pretrain_families"] = list(self.encoder.pretrain_families)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        enc = dict(data.pop("encoder", {}))
        if "pretrain_families" in enc:
            enc["pretrain_families"] = tuple(enc["pretrain_families"])
        sub = {
            "lgm": LgmConfig(**data.pop("lgm", {})),
            "vtpg": VtpgConfig(**data.pop("vtpg", {})),
            "text": TextConfig(**data.pop("text", {})),
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "image_size" in data:
            enc.setdefault("image_size", data["image_size"])
        return cls(encoder=EncoderConfig(**enc), **sub, **data)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        """Apply ``{"lgm.tau": 0.02, "alpha": 0.3, ...}`` and return a new config."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            target = d
            for p in parts[:-1]:
                if p not in target or not isinstance(target[p], dict):
                    raise ValueError(f"unknown config key {key!r}")
                target = target[p]
            if parts[-1] not in target:
                raise ValueError(f"unknown config key {key!r}")
            target[parts[-1]] = value
        if "image_size" in overrides:
            d["encoder"]["image_size"] = overrides["image_size"]
        return TrainConfig.from_dict(d)

    def dump(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
