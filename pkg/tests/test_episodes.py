import hashlib
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from usd_fss.episodes import (
    SHAPE_FAMILIES,
    DatasetError,
    generate_synthetic_dataset,
    load_dataset,
    make_fold_split,
    render_sample,
    sample_episode,
    shape_region,
)


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestFoldSplit:
    def test_first_fold_of_twenty(self):
        s = make_fold_split(20, 4, 0)
        assert s.test_classes == frozenset(range(5))
        assert s.train_classes == frozenset(range(5, 20))

    def test_last_fold_of_twenty(self):
        s = make_fold_split(20, 4, 3)
        assert s.test_classes == frozenset(range(15, 20))
        assert s.train_classes == frozenset(range(15))

    def test_block_oracle(self):
        # enumerate blocks by hand: 12 classes, 4 folds -> blocks of 3
        blocks = [set(range(i, i + 3)) for i in range(0, 12, 3)]
        s = make_fold_split(12, 4, 1)
        assert s.test_classes == blocks[1]
        assert s.train_classes == set(range(12)) - blocks[1]

    @pytest.mark.parametrize("count,folds", [(4, 4), (8, 4), (12, 3), (20, 5), (6, 2)])
    def test_folds_partition_classes(self, count, folds):
        tests = [make_fold_split(count, folds, i).test_classes for i in range(folds)]
        assert set().union(*tests) == set(range(count))
        for i in range(folds):
            for j in range(i + 1, folds):
                assert not tests[i] & tests[j]
            s = make_fold_split(count, folds, i)
            assert not s.train_classes & s.test_classes

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            make_fold_split(10, 4, 0)

    def test_fold_out_of_range(self):
        with pytest.raises(ValueError):
            make_fold_split(8, 4, 4)


class TestShapes:
    @pytest.mark.parametrize("family", list(SHAPE_FAMILIES))
    def test_mask_is_the_analytic_region(self, family):
        r = np.random.default_rng(5)
        img, mask, shapes = render_sample(r, family, 64, [f for f in SHAPE_FAMILIES if f != family])
        target = shapes[-1]
        region = shape_region(family, 64, target.cx, target.cy, target.half)
        np.testing.assert_array_equal(mask, region.astype(np.uint8))
        assert img.shape == (64, 64, 3)
        assert img.dtype == np.float32
        assert np.isfinite(img).all() and img.min() >= 0 and img.max() <= 1

    @pytest.mark.parametrize("seed", range(10))
    def test_minimum_foreground_area(self, seed):
        r = np.random.default_rng(seed)
        for family in SHAPE_FAMILIES:
            _, mask, _ = render_sample(r, family, 64, [])
            assert mask.sum() >= 0.02 * 64 * 64

    def test_circle_region_matches_formula(self):
        size, cx, cy, half = 32, 15.5, 16.0, 8.0
        ys, xs = np.mgrid[0:size, 0:size] + 0.5
        expected = (xs - cx) ** 2 + (ys - cy) ** 2 <= half**2
        got = shape_region("circle", size, cx, cy, half)
        # boundary pixels may differ only by floating rounding of the predicate
        assert (got != expected).sum() <= 2


class TestSyntheticDataset:
    def test_counts(self, small_dataset):
        assert len(small_dataset) == 160
        assert len(small_dataset.classes) == 8
        files = list(Path(small_dataset.root).rglob("*.png"))
        assert len(files) == 320

    def test_every_mask_has_foreground(self, small_dataset):
        for pairs in small_dataset.index.values():
            for ip, mp in pairs:
                _, mask = small_dataset.load_pair(ip, mp)
                assert mask.sum() >= 1
                assert set(np.unique(mask).tolist()) <= {0, 1}

    def test_regeneration_bit_identical(self, tmp_path):
        a = generate_synthetic_dataset(4, 3, 32, 9, tmp_path / "a")
        b = generate_synthetic_dataset(4, 3, 32, 9, tmp_path / "b")
        assert _digest(Path(a.root)) == _digest(Path(b.root))

    def test_classes_lexicographic(self, small_dataset):
        assert small_dataset.classes == sorted(small_dataset.classes)
        listed = (Path(small_dataset.root) / "classes.txt").read_text().split()
        assert listed == small_dataset.classes

    def test_load_round_trip(self, small_dataset):
        again = load_dataset(small_dataset.root)
        assert again.classes == small_dataset.classes
        assert again.index == small_dataset.index

    def test_rejects_too_few_classes(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(3, 2, 64, 0, tmp_path)

    def test_unwritable_root(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DatasetError):
            generate_synthetic_dataset(4, 2, 32, 0, blocker / "sub")


class TestLoadErrors:
    def _tiny(self, tmp_path):
        return generate_synthetic_dataset(4, 2, 32, 0, tmp_path / "d")

    def test_non_binary_mask(self, tmp_path):
        ds = self._tiny(tmp_path)
        _, mask_path = ds.index[0][0]
        raw = np.zeros((32, 32), np.uint8)
        raw[0, 0] = 2
        Image.fromarray(raw, "L").save(mask_path)
        with pytest.raises(DatasetError, match="non-binary"):
            load_dataset(ds.root)

    def test_missing_mask(self, tmp_path):
        ds = self._tiny(tmp_path)
        _, mask_path = ds.index[1][0]
        mask_path.unlink()
        with pytest.raises(DatasetError, match="missing mask"):
            load_dataset(ds.root)

    def test_empty_class_named(self, tmp_path):
        ds = self._tiny(tmp_path)
        name = ds.classes[2]
        for p in (Path(ds.root) / name).iterdir():
            p.unlink()
        with pytest.raises(DatasetError, match=name):
            load_dataset(ds.root)


class TestSampleEpisode:
    def test_one_shot_circle(self, small_dataset):
        cid = small_dataset.class_id("circle")
        ep = sample_episode(small_dataset, {cid}, 1, np.random.default_rng(7))
        assert ep.shots == 1
        assert ep.class_name == "circle"
        assert ep.class_id == cid

    def test_same_seed_same_episode(self, small_dataset):
        a = sample_episode(small_dataset, {0, 1, 2}, 2, np.random.default_rng(7))
        b = sample_episode(small_dataset, {0, 1, 2}, 2, np.random.default_rng(7))
        assert a.query_path == b.query_path
        assert a.support_paths == b.support_paths
        np.testing.assert_array_equal(a.query_image, b.query_image)

    def test_too_few_samples_names_class(self, tmp_path):
        ds = generate_synthetic_dataset(4, 5, 32, 0, tmp_path)
        with pytest.raises(DatasetError, match=ds.classes[0]):
            sample_episode(ds, {0}, 5, np.random.default_rng(0))

    def test_query_never_a_support(self, small_dataset):
        r = np.random.default_rng(3)
        for _ in range(200):
            ep = sample_episode(small_dataset, set(range(8)), 5, r)
            assert ep.query_path not in ep.support_paths
            assert len(set(ep.support_paths)) == 5
            folders = {p.parent for p in ep.support_paths} | {ep.query_path.parent}
            assert len(folders) == 1

    def test_query_independent_of_shots(self, small_dataset):
        a = sample_episode(small_dataset, {0, 1}, 1, np.random.default_rng(11))
        b = sample_episode(small_dataset, {0, 1}, 5, np.random.default_rng(11))
        assert a.query_path == b.query_path
        assert a.support_paths[0] == b.support_paths[0]

    def test_empty_pool(self, small_dataset):
        with pytest.raises(ValueError):
            sample_episode(small_dataset, set(), 1, np.random.default_rng(0))
