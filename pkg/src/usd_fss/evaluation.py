"""Metrics, K-shot aggregation, fold evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .decoding import binarize
from .episodes import Dataset, FoldSplit, make_fold_split, sample_episode
from .model import FeatureStore, Pipeline, episode_rng, one_shot_views


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def intersection_union(pred, gt) -> tuple:
    pred, gt = _check_pair(pred, gt)
    return int(np.logical_and(pred, gt).sum()), int(np.logical_or(pred, gt).sum())


def iou(pred, gt) -> float:
    inter, union = intersection_union(pred, gt)
    return 1.0 if union == 0 else inter / union


class IoUAccumulator:
    """Per-class and foreground/background pixel counts summed over episodes."""

    def __init__(self):
        self.inter: dict = {}
        self.union: dict = {}
        self.fb = np.zeros((2, 2), dtype=np.int64)  # [fg, bg] x [inter, union]

    def add(self, pred, gt, label=None) -> None:
        pred, gt = _check_pair(pred, gt)
        i, u = intersection_union(pred, gt)
        if label is not None:
            self.inter[label] = self.inter.get(label, 0) + i
            self.union[label] = self.union.get(label, 0) + u
        self.fb[0] += (i, u)
        self.fb[1] += intersection_union(~pred, ~gt)

    @property
    def per_class(self) -> dict:
        return {c: (1.0 if self.union[c] == 0 else self.inter[c] / self.union[c]) for c in sorted(self.inter)}

    @property
    def miou(self) -> float:
        if not self.inter:
            raise ValueError("no labelled masks accumulated")
        return float(np.mean(list(self.per_class.values())))

    @property
    def fb_iou(self) -> float:
        return float(np.mean([1.0 if u == 0 else i / u for i, u in self.fb]))


def mean_iou(preds, gts, labels) -> float:
    """Class-wise IoU over aggregate counts, averaged over classes."""
    if len(preds) == 0 or not len(preds) == len(gts) == len(labels):
        raise ValueError("mean_iou needs aligned, non-empty lists")
    acc = IoUAccumulator()
    for p, g, c in zip(preds, gts, labels):
        acc.add(p, g, c)
    return acc.miou


def fb_iou(preds, gts) -> float:
    """Mean of foreground and background IoU over aggregate pixel counts."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("fb_iou needs two aligned, non-empty lists")
    acc = IoUAccumulator()
    for p, g in zip(preds, gts):
        acc.add(p, g)
    return acc.fb_iou


def aggregate_kshot(per_support_probs) -> np.ndarray:
    if len(per_support_probs) == 0:
        raise ValueError("need at least one probability map")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in per_support_probs])
    return stack.mean(axis=0)


@dataclass
class MetricsReport:
    per_class_iou: dict
    miou: float
    fb_iou: float
    episode_count: int
    fold: int
    shots: int
    forward_passes: int = 0

    def to_dict(self) -> dict:
        return {
            "per_class_iou": dict(sorted(self.per_class_iou.items())),
            "miou": self.miou,
            "fb_iou": self.fb_iou,
            "episode_count": self.episode_count,
            "fold": self.fold,
            "shots": self.shots,
            "forward_passes": self.forward_passes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# A predictor maps (1-shot episode, point rng) to an (H, W) probability map.
Predictor = Callable


def pipeline_predictor(
    pipeline: Pipeline,
    store: FeatureStore | None = None,
    alpha: float | None = None,
    feature_source: str | None = None,
) -> Predictor:
    store = store if store is not None else FeatureStore(pipeline.bundle, pipeline.cfg)

    def predict(episode, rng):
        return pipeline.predict([episode], store, [rng], alpha, feature_source)[0]

    return predict


def evaluate(
    predictor: Predictor | Pipeline,
    dataset: Dataset,
    split: FoldSplit,
    shots: int = 1,
    episodes: int = 200,
    seed: int = 0,
    threshold: float = 0.5,
) -> MetricsReport:
    """Evaluate on the split's test classes.

    A K-shot episode is K one-shot passes sharing the query; their probability
    maps are averaged and binarised.  The query mask is only read for scoring.
    """
    if not split.test_classes:
        raise ValueError("split has no test classes")
    if isinstance(predictor, Pipeline):
        predictor = pipeline_predictor(predictor)
    stream = episode_rng(seed, 3)
    acc = IoUAccumulator()
    passes = 0
    for e in range(episodes):
        ep = sample_episode(dataset, split.test_classes, shots, stream)
        probs = []
        for k, view in enumerate(one_shot_views(ep)):
            probs.append(predictor(view, episode_rng(seed, 4, e, k)))
            passes += 1
        pred = binarize(aggregate_kshot(probs), threshold)
        acc.add(pred, ep.query_mask, ep.class_name)
    return MetricsReport(
        per_class_iou=acc.per_class,
        miou=acc.miou,
        fb_iou=acc.fb_iou,
        episode_count=episodes,
        fold=split.fold_index,
        shots=shots,
        forward_passes=passes,
    )


def train_class_split(split: FoldSplit) -> FoldSplit:
    """The same fold with roles swapped, for scoring on training classes."""
    return FoldSplit(split.num_folds, split.fold_index, split.test_classes, split.train_classes)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

# axis -> (config key or None for inference-time axes, value parser)
SWEEP_AXES = {
    "alpha": (None, float),
    "feature_source": (None, str),
    "beta": ("beta", float),
    "avg_last": ("lgm.avg_last", int),
    "text": ("text", lambda s: s),
    "prompt_source": ("prompt_source", str),
    "vtpg": ("vtpg.enabled", lambda s: s if isinstance(s, bool) else s.lower() in ("on", "1", "true")),
    "lgm": ("lgm.enabled", lambda s: s if isinstance(s, bool) else s.lower() in ("on", "1", "true")),
}


def parse_grid(axis: str, text: str) -> list:
    """``"0,0.5,1"`` -> typed values.  Text pairs are ``fg|bg`` separated by ``;``."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    parse = SWEEP_AXES[axis][1]
    sep = ";" if axis == "text" else ","
    return [parse(v.strip()) for v in text.split(sep) if v.strip()]


def _text_override(value) -> dict:
    if isinstance(value, str):
        fg, _, bg = value.partition("|")
        value = (fg, bg)
    fg, bg = value
    if "{}" not in fg or "{}" not in bg:
        raise ValueError("text prompts must contain '{}' for the class name")
    return {"text.foreground": fg, "text.background": bg}


@dataclass
class SweepResult:
    axis: str
    values: list
    reports: list = field(default_factory=list)

    @property
    def metrics(self) -> list:
        return [r.miou for r in self.reports]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["axis", "value", "miou", "fb_iou", "episodes", "shots", "fold"])
        for v, r in zip(self.values, self.reports):
            shown = "|".join(v) if isinstance(v, tuple) else v
            writer.writerow([self.axis, shown, repr(r.miou), repr(r.fb_iou), r.episode_count, r.shots, r.fold])
        return buf.getvalue()

    def write(self, path: Path) -> None:
        Path(path).write_text(self.to_csv())


def run_sweep(
    axis: str,
    grid: list,
    base_config: TrainConfig,
    dataset: Dataset,
    shots: int = 1,
    episodes: int = 200,
    seed: int = 0,
    pipeline: Pipeline | None = None,
    train_fn: Callable | None = None,
    bundle=None,
) -> SweepResult:
    """Evaluate one metric per grid value, everything else held fixed.

    Inference-time axes (alpha, feature_source) reuse one trained pipeline;
    the others retrain per value from the same seed.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    if train_fn is None:
        from .training import train as train_fn
    key, parse = SWEEP_AXES[axis]
    values = [parse(v) if isinstance(v, str) else v for v in grid]
    split = make_fold_split(len(dataset.classes), base_config.num_folds, base_config.fold)
    result = SweepResult(axis, values)
    if key is None:
        store = None
        if pipeline is None:
            trained = train_fn(base_config, dataset, bundle=bundle)
            pipeline, store = trained.pipeline, trained.store
        store = store or FeatureStore(pipeline.bundle, pipeline.cfg)
        for v in values:
            kw = {"alpha": v} if axis == "alpha" else {"feature_source": v}
            predictor = pipeline_predictor(pipeline, store, **kw)
            result.reports.append(evaluate(predictor, dataset, split, shots, episodes, seed))
        return result
    for v in values:
        overrides = _text_override(v) if axis == "text" else {key: v}
        cfg = base_config.with_overrides(overrides)
        trained = train_fn(cfg, dataset, bundle=bundle)
        predictor = pipeline_predictor(trained.pipeline, trained.store)
        result.reports.append(evaluate(predictor, dataset, split, shots, episodes, seed))
    return result
