"""Episodic data model: fold splits, datasets on disk, episode sampling and
the synthetic shapes generator."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image as PILImage


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FoldSplit:
    num_folds: int
    fold_index: int
    train_classes: frozenset
    test_classes: frozenset


@dataclass
class Episode:
    supports: list  # [(image HxWx3 float32, mask HxW uint8)]
    query_image: np.ndarray
    query_mask: np.ndarray
    class_name: str
    class_id: int
    query_path: Path | None = None
    support_paths: list = field(default_factory=list)

    @property
    def shots(self) -> int:
        return len(self.supports)


def make_fold_split(class_count: int, num_folds: int, fold_index: int) -> FoldSplit:
    if num_folds < 1 or class_count % num_folds != 0:
        raise ValueError(
            f"class_count={class_count} is not divisible by num_folds={num_folds}"
        )
    if not 0 <= fold_index < num_folds:
        raise ValueError(f"fold_index must be in [0, {num_folds}), got {fold_index}")
    block = class_count // num_folds
    test = frozenset(range(fold_index * block, (fold_index + 1) * block))
    train = frozenset(range(class_count)) - test
    return FoldSplit(num_folds, fold_index, train, test)


# ---------------------------------------------------------------------------
# shape families
# ---------------------------------------------------------------------------

# (u, v) are pixel-centre coordinates relative to the shape centre, in units of
# the shape's half extent.  Each predicate is the exact region of the family.
def _circle(u, v):
    return u**2 + v**2 <= 1.0


def _square(u, v):
    return np.maximum(np.abs(u), np.abs(v)) <= 0.85


def _triangle(u, v):
    half_width = 0.95 * (v + 0.95) / 1.75
    return (v <= 0.8) & (v >= -0.95) & (np.abs(u) <= half_width)


def _cross(u, v):
    return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | (
        (np.abs(v) <= 0.3) & (np.abs(u) <= 1.0)
    )


def _ring(u, v):
    r2 = u**2 + v**2
    return (r2 <= 1.0) & (r2 >= 0.55**2)


def _star(u, v):
    r = np.sqrt(u**2 + v**2)
    theta = np.arctan2(v, u)
    return r <= 0.72 + 0.28 * np.cos(5 * theta + np.pi / 2)


def _crescent(u, v):
    return (u**2 + v**2 <= 1.0) & ((u - 0.45) ** 2 + v**2 > 0.75**2)


def _lshape(u, v):
    return ((u >= -0.9) & (u <= -0.25) & (np.abs(v) <= 0.9)) | (
        (np.abs(u) <= 0.9) & (v >= 0.25) & (v <= 0.9)
    )


def _diamond(u, v):
    return np.abs(u) + np.abs(v) <= 1.0


def _frame(u, v):
    m = np.maximum(np.abs(u), np.abs(v))
    return (m <= 0.9) & (m > 0.5)


def _tshape(u, v):
    return ((np.abs(u) <= 0.9) & (v >= -0.9) & (v <= -0.35)) | (
        (np.abs(u) <= 0.28) & (np.abs(v) <= 0.9)
    )


def _ellipse(u, v):
    return u**2 + (v / 0.55) ** 2 <= 1.0


# Canonical order: the first ``num_classes`` families are used by the generator.
SHAPE_FAMILIES: dict[str, Callable] = {
    "circle": _circle,
    "square": _square,
    "triangle": _triangle,
    "cross": _cross,
    "ring": _ring,
    "star": _star,
    "crescent": _crescent,
    "lshape": _lshape,
    "diamond": _diamond,
    "frame": _frame,
    "tshape": _tshape,
    "ellipse": _ellipse,
}


def shape_region(family: str, size: int, cx: float, cy: float, half: float) -> np.ndarray:
    """Boolean HxW region of one shape, evaluated at pixel centres."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return SHAPE_FAMILIES[family]((xs - cx) / half, (ys - cy) / half)


# Two-tone fill pattern per family (same order as SHAPE_FAMILIES); 1 selects the
# primary colour, 0 the secondary.
def _fill_pattern(index: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    x, y = np.floor(xs).astype(int), np.floor(ys).astype(int)
    kind = index % 12
    if kind == 0:
        return np.ones_like(x)
    if kind == 1:
        return (y // 2) % 2
    if kind == 2:
        return (x // 2) % 2
    if kind == 3:
        return ((x + y) // 3) % 2
    if kind == 4:
        return ((x - y) // 3) % 2
    if kind == 5:
        return ((x // 3) + (y // 3)) % 2
    if kind == 6:
        return ((x % 4 < 2) & (y % 4 < 2)).astype(int)
    if kind == 7:
        return ((x % 5 == 0) | (y % 5 == 0)).astype(int) ^ 1
    if kind == 8:
        return (y // 4) % 2
    if kind == 9:
        return (x // 4) % 2
    if kind == 10:
        return ((x // 2) + (y // 2)) % 2
    return (x % 3 != 0).astype(int)


def _paint(img, region, family, color, rng):
    ys, xs = np.nonzero(region)
    pattern = _fill_pattern(list(SHAPE_FAMILIES).index(family), xs, ys)
    second = np.where(color > 0.5, color - 0.45, color + 0.45)
    pix = np.where(pattern[:, None] == 1, color, second)
    img[ys, xs] = pix + rng.normal(scale=0.02, size=pix.shape)


@dataclass(frozen=True)
class ShapeParams:
    family: str
    cx: float
    cy: float
    half: float
    color: tuple


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    ys, xs = np.mgrid[0:size, 0:size] / size
    direction = rng.normal(size=2)
    ramp = (direction[0] * xs + direction[1] * ys)[..., None] * rng.uniform(-0.15, 0.15, size=3)
    freq = rng.uniform(2.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.05 * np.sin(2 * np.pi * freq * (xs * direction[1] - ys * direction[0]) + phase)
    img = base + ramp + stripes[..., None]
    img = img + rng.normal(scale=0.03, size=(size, size, 3))
    return img


def _contrasting_color(rng: np.random.Generator, avoid: list) -> np.ndarray:
    for _ in range(100):
        color = rng.uniform(0.0, 1.0, size=3)
        if all(np.linalg.norm(color - a) >= 0.35 for a in avoid):
            return color
    return color


def render_sample(
    rng: np.random.Generator,
    family: str,
    size: int,
    distractor_families: list | None = None,
    distractor_prob: float = 0.5,
) -> tuple:
    """Render one image with its target shape drawn last.

    Returns ``(image HxWx3 in [0,1], mask HxW uint8, [ShapeParams, ...])`` where
    the last entry describes the target.
    """
    min_area = 0.02 * size * size
    img = _background(rng, size)
    bg_mean = img.reshape(-1, 3).mean(0)
    shapes = []

    target = None
    while target is None:
        half = rng.uniform(0.19, 0.28) * size
        cx, cy = rng.uniform(half * 0.9, size - half * 0.9, size=2)
        region = shape_region(family, size, cx, cy, half)
        if region.sum() >= min_area:
            target = (cx, cy, half, region)

    distractor_families = distractor_families or []
    if distractor_families and rng.uniform() < distractor_prob:
        dfam = distractor_families[rng.integers(len(distractor_families))]
        tcx, tcy, thalf, _ = target
        for _ in range(50):
            dhalf = rng.uniform(0.15, 0.22) * size
            dcx, dcy = rng.uniform(dhalf * 0.9, size - dhalf * 0.9, size=2)
            if max(abs(dcx - tcx), abs(dcy - tcy)) >= (thalf + dhalf) * 0.95:
                dcolor = _contrasting_color(rng, [bg_mean])
                dregion = shape_region(dfam, size, dcx, dcy, dhalf)
                _paint(img, dregion, dfam, dcolor, rng)
                shapes.append(ShapeParams(dfam, dcx, dcy, dhalf, tuple(dcolor)))
                break

    cx, cy, half, region = target
    color = _contrasting_color(rng, [bg_mean])
    _paint(img, region, family, color, rng)
    shapes.append(ShapeParams(family, cx, cy, half, tuple(color)))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, region.astype(np.uint8), shapes


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Index over ``root/<class>/<id>.img.png`` + ``<id>.mask.png`` pairs."""

    root: Path
    classes: list
    index: dict  # class_id -> [(img path, mask path)]
    image_size: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def class_id(self, name: str) -> int:
        return self.classes.index(name)

    def __len__(self) -> int:
        return sum(len(v) for v in self.index.values())

    def load_pair(self, img_path: Path, mask_path: Path) -> tuple:
        key = (img_path, mask_path)
        if key not in self._cache:
            img = read_image(img_path)
            mask = read_mask(mask_path)
            if mask.shape != img.shape[:2]:
                raise DatasetError(f"mask/image size mismatch for {img_path}")
            self._cache[key] = (img, mask)
        return self._cache[key]


def read_image(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        raw = np.asarray(im.convert("L"))
    values = np.unique(raw)
    if not set(values.tolist()) <= {0, 1, 255}:
        raise DatasetError(f"non-binary mask values {values.tolist()} in {path}")
    return (raw > 0).astype(np.uint8)


def write_image(path: Path, image: np.ndarray) -> None:
    PILImage.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    PILImage.fromarray((mask > 0).astype(np.uint8) * 255, "L").save(path)


def generate_synthetic_dataset(
    num_classes: int,
    samples_per_class: int,
    image_size: int,
    seed: int,
    root: str | os.PathLike,
    distractor_prob: float = 0.5,
) -> Dataset:
    if num_classes < 4:
        raise ValueError("num_classes must be >= 4 so that 4-fold splits exist")
    if num_classes > len(SHAPE_FAMILIES):
        raise ValueError(f"at most {len(SHAPE_FAMILIES)} shape families are available")
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {root}: {exc}") from exc

    families = sorted(list(SHAPE_FAMILIES)[:num_classes])
    (root / "classes.txt").write_text("".join(f"{c}\n" for c in families))
    for cid, fam in enumerate(families):
        cdir = root / fam
        cdir.mkdir(exist_ok=True)
        others = [f for f in families if f != fam]
        rng = np.random.default_rng([seed, cid])
        for i in range(samples_per_class):
            img, mask, _ = render_sample(rng, fam, image_size, others, distractor_prob)
            write_image(cdir / f"{i:04d}.img.png", img)
            write_mask(cdir / f"{i:04d}.mask.png", mask)
    return load_dataset(root)


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    listed = root / "classes.txt"
    dirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    if listed.exists():
        classes = [ln.strip() for ln in listed.read_text().splitlines() if ln.strip()]
        if classes != sorted(classes):
            raise DatasetError("classes.txt must list class names in lexicographic order")
        missing = [c for c in classes if c not in dirs]
        if missing:
            raise DatasetError(f"classes listed but missing on disk: {missing}")
    else:
        classes = dirs
    index = {}
    size = None
    for cid, name in enumerate(classes):
        pairs = []
        for img_path in sorted((root / name).glob("*.img.png")):
            mask_path = img_path.with_name(img_path.name[: -len(".img.png")] + ".mask.png")
            if not mask_path.exists():
                raise DatasetError(f"missing mask for {img_path}")
            mask = read_mask(mask_path)
            if size is None:
                size = mask.shape[0]
            pairs.append((img_path, mask_path))
        if not pairs:
            raise DatasetError(f"class '{name}' has no samples")
        index[cid] = pairs
    return Dataset(root=root, classes=classes, index=index, image_size=size)


def sample_episode(
    dataset: Dataset, class_pool, K: int, rng: np.random.Generator
) -> Episode:
    """Draw one K-shot episode.

    The query is the first element of a random permutation and the supports are
    the next K, so for a fixed generator state the query does not depend on K.
    """
    pool = sorted(class_pool)
    if not pool:
        raise ValueError("class_pool is empty")
    if K < 1:
        raise ValueError("K must be >= 1")
    cid = pool[rng.integers(len(pool))]
    pairs = dataset.index[cid]
    if len(pairs) < K + 1:
        raise DatasetError(
            f"class '{dataset.classes[cid]}' has {len(pairs)} samples, needs {K + 1}"
        )
    order = rng.permutation(len(pairs))
    q_img, q_mask = dataset.load_pair(*pairs[order[0]])
    supports, support_paths = [], []
    for j in order[1 : K + 1]:
        supports.append(dataset.load_pair(*pairs[j]))
        support_paths.append(pairs[j][0])
    return Episode(
        supports=supports,
        query_image=q_img,
        query_mask=q_mask,
        class_name=dataset.classes[cid],
        class_id=cid,
        query_path=pairs[order[0]][0],
        support_paths=support_paths,
    )
