"""Command line entry point: ``usd-fss {synth,train,eval,predict,ablate}``.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import TrainConfig

log = logging.getLogger("usd_fss")


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _run_dir(base: Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(base) / f"{command}-{stamp}"
    n = 1
    while path.exists():
        path = Path(base) / f"{command}-{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def _data_root(args) -> Path:
    root = args.data or os.environ.get("USD_DATA_ROOT")
    if not root:
        raise UsageError("no dataset root: pass --data or set USD_DATA_ROOT")
    return Path(root)


def resolve_config(args) -> TrainConfig:
    """Config file first, then ``--set key=value`` pairs, then dedicated flags."""
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    for flag, key in (
        ("fold", "fold"),
        ("steps", "steps"),
        ("epochs", "epochs"),
        ("seed", "seed"),
        ("alpha", "alpha"),
        ("beta", "beta"),
        ("shots_train", "shots"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        return cfg.with_overrides(overrides) if overrides else cfg
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _dataset_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .episodes import generate_synthetic_dataset

    ds = generate_synthetic_dataset(args.classes, args.per_class, args.size, args.seed, args.out)
    print(
        json.dumps(
            {
                "root": str(ds.root),
                "classes": ds.classes,
                "pairs": len(ds),
                "image_size": ds.image_size,
                "digest": _dataset_digest(Path(args.out)),
            },
            indent=2,
        )
    )
    return 0


def cmd_train(args) -> int:
    from .episodes import load_dataset
    from .training import manifest, train

    cfg = resolve_config(args)
    ds = load_dataset(_data_root(args))
    out = _run_dir(args.out, "train")
    cfg.dump(out / "config.json")
    result = train(cfg, ds, out_dir=out)
    info = manifest(result.pipeline)
    info.update(steps=result.steps, seconds=round(result.seconds, 3), dataset=str(ds.root))
    (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def cmd_eval(args) -> int:
    from .episodes import load_dataset, make_fold_split
    from .evaluation import evaluate, pipeline_predictor, train_class_split
    from .training import load_checkpoint

    pipeline = load_checkpoint(args.checkpoint)
    ds = load_dataset(_data_root(args))
    cfg = pipeline.cfg
    split = make_fold_split(len(ds.classes), cfg.num_folds, cfg.fold)
    if args.split == "train":
        split = train_class_split(split)
    predictor = pipeline_predictor(pipeline, alpha=args.alpha, feature_source=args.feature_source)
    out = _run_dir(args.out, "eval")
    resolved = {
        "checkpoint": str(args.checkpoint),
        "data": str(ds.root),
        "split": args.split,
        "shots": args.shots,
        "episodes": args.episodes,
        "seed": args.seed,
        "alpha": args.alpha,
        "feature_source": args.feature_source,
        "train_config": cfg.to_dict(),
    }
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    report = evaluate(predictor, ds, split, args.shots, args.episodes, args.seed)
    (out / "report.json").write_text(report.to_json())
    print(report.to_json(), end="")
    return 0


def _save_map(path: Path, array) -> None:
    from PIL import Image

    a = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 255).astype(np.uint8), "L").save(path)


def cmd_predict(args) -> int:
    import torch

    from .decoding import binarize
    from .episodes import load_dataset, make_fold_split, sample_episode
    from .layers import resize
    from .model import FeatureStore, collate, episode_rng
    from .training import load_checkpoint

    pipeline = load_checkpoint(args.checkpoint)
    ds = load_dataset(_data_root(args))
    cfg = pipeline.cfg
    split = make_fold_split(len(ds.classes), cfg.num_folds, cfg.fold)
    pool = split.test_classes
    if args.class_name is not None:
        if args.class_name not in ds.classes:
            raise UsageError(f"unknown class {args.class_name!r}")
        pool = {ds.class_id(args.class_name)}
    ep = sample_episode(ds, pool, 1, episode_rng(args.seed, 3))
    store = FeatureStore(pipeline.bundle, cfg)
    with torch.no_grad():
        out = pipeline.forward(collate([ep], store), [episode_rng(args.seed, 4, 0, 0)])
    run = _run_dir(args.out, "predict")
    size = (cfg.image_size, cfg.image_size)
    p = out["p"][0].numpy()
    _save_map(run / "query.png", ep.query_image.mean(axis=-1))
    _save_map(run / "probability.png", p)
    _save_map(run / "mask.png", binarize(p))
    maps = {"probability": p, "mask": binarize(p)}
    for name in ("g_ini", "g_ref", "g_fin"):
        if name in out:
            g = resize(out[name], size)[0].numpy()
            _save_map(run / f"{name}.png", g)
            maps[name] = out[name][0].numpy()
    np.savez(run / "maps.npz", **maps)
    summary = {
        "class": ep.class_name,
        "query": str(ep.query_path),
        "support": [str(s) for s in ep.support_paths],
        "checkpoint": str(args.checkpoint),
        "seed": args.seed,
    }
    (run / "config.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(run)
    return 0


def cmd_ablate(args) -> int:
    from .episodes import load_dataset
    from .evaluation import parse_grid, run_sweep

    cfg = resolve_config(args)
    try:
        grid = parse_grid(args.axis, args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not grid:
        raise UsageError("empty --grid")
    ds = load_dataset(_data_root(args))
    out = _run_dir(args.out, f"ablate-{args.axis}")
    cfg.dump(out / "config.json")
    (out / "sweep.json").write_text(
        json.dumps(
            {"axis": args.axis, "grid": args.grid, "shots": args.shots,
             "episodes": args.episodes, "seed": args.seed},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    result = run_sweep(args.axis, grid, cfg, ds, args.shots, args.episodes, args.seed)
    result.write(out / "sweep.csv")
    print(result.to_csv(), end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. lgm.tau=0.02 (repeatable)")
    p.add_argument("--fold", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--shots-train", dest="shots_train", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usd-fss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic shapes dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", dest="per_class", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on one fold")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--shots", type=int, choices=(1, 5), default=1)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--alpha", type=float)
    p.add_argument("--feature-source", dest="feature_source", choices=("fused", "sam", "clip"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="dump prediction and guidance maps for one episode")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--class", dest="class_name")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="sweep one axis")
    p.add_argument("--axis", required=True)
    p.add_argument("--grid", required=True,
                   help="comma separated values; text pairs as 'fg|bg' separated by ';'")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--shots", type=int, choices=(1, 5), default=1)
    p.add_argument("--episodes", type=int, default=200)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "ablate" and args.seed is None:
        args.seed = 0
    if getattr(args, "fold", None) is not None and not 0 <= args.fold < 4:
        parser.error(f"--fold must be in 0..3, got {args.fold}")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
