"""Histograms, spatial means, class mixes, and the long-tail flag."""

import numpy as np
import pytest

from rgbh.datagen import ModalitySample
from rgbh.errors import MixedTileSizes, ShapeMismatch, UnknownGroup
from rgbh.stats import (
    HeightHistogram,
    class_distribution,
    height_histogram,
    long_tail_report,
    spatial_mean_map,
    stats_report,
    write_pgm,
)


def sample(height, labels=None, **meta):
    height = np.asarray(height, dtype=np.float32)
    if height.ndim == 2:
        height = height[None]
    if labels is None:
        labels = np.zeros(height.shape[1:], dtype=np.uint8)
    return ModalitySample(
        rgb=np.zeros((3,) + height.shape[1:], np.float32),
        height=height,
        labels=np.asarray(labels, dtype=np.uint8),
        meta=meta,
    )


class TestHeightHistogram:
    def test_constant_tile_single_bin(self):
        hist = height_histogram([sample(np.full((4, 4), 2.5))], bin_width=1.0)
        assert hist.total == 16
        assert hist.counts[2] == 16
        assert (np.delete(hist.counts, 2) == 0).all()

    def test_shard_additivity(self):
        rng = np.random.default_rng(0)
        tiles = [sample(rng.uniform(0, 9, (8, 8))) for _ in range(6)]
        full = height_histogram(tiles, 0.5)
        merged = HeightHistogram(0.5)
        for t in tiles[:3]:
            merged = merged.merge(height_histogram([t], 0.5))
        merged = merged.merge(height_histogram(tiles[3:], 0.5))
        assert merged.counts.size == full.counts.size
        np.testing.assert_array_equal(merged.counts, full.counts)

    def test_total_equals_pixels(self):
        rng = np.random.default_rng(1)
        tiles = [sample(rng.uniform(0, 3, (16, 16))) for _ in range(4)]
        assert height_histogram(tiles, 1.0).total == 4 * 256

    def test_bad_bin_width(self):
        with pytest.raises(ShapeMismatch):
            HeightHistogram(0.0)


class TestSpatialMeanMap:
    def test_single_tile_is_itself(self):
        rng = np.random.default_rng(2)
        h = rng.uniform(0, 5, (8, 8))
        np.testing.assert_allclose(spatial_mean_map([sample(h)]), h, rtol=1e-6)

    def test_two_tiles_average(self):
        a = np.full((4, 4), 2.0)
        b = np.full((4, 4), 6.0)
        np.testing.assert_allclose(spatial_mean_map([sample(a), sample(b)]), 4.0)

    def test_streaming_equals_batch(self):
        rng = np.random.default_rng(3)
        tiles = [sample(rng.uniform(0, 9, (8, 8))) for _ in range(7)]
        streaming = spatial_mean_map(tiles)
        batch = np.stack([t.height[0].astype(np.float64) for t in tiles]).mean(axis=0)
        np.testing.assert_allclose(streaming, batch, atol=1e-6)

    def test_mixed_sizes_rejected(self):
        with pytest.raises(MixedTileSizes):
            spatial_mean_map([sample(np.zeros((4, 4))), sample(np.zeros((8, 8)))])


class TestClassDistribution:
    def test_single_class_dataset(self):
        t = sample(np.zeros((4, 4)), labels=np.full((4, 4), 3), split="train")
        dist = class_distribution([t], "split")
        assert dist["train"][3] == 1.0
        assert sum(dist["train"]) == pytest.approx(1.0, abs=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        tiles = [
            sample(
                np.zeros((8, 8)),
                labels=rng.integers(0, 6, (8, 8)),
                city=("alpha" if i % 2 else "bravo"),
            )
            for i in range(6)
        ]
        dist = class_distribution(tiles, "city")
        for row in dist.values():
            assert sum(row) == pytest.approx(1.0, abs=1e-9)

    def test_matches_brute_force_counts(self):
        rng = np.random.default_rng(5)
        tiles = [
            sample(np.zeros((8, 8)), labels=rng.integers(0, 6, (8, 8)), split="test")
            for _ in range(10)
        ]
        dist = class_distribution(tiles, "split")["test"]
        raw = np.zeros(6)
        for t in tiles:
            for v in t.labels.ravel():
                raw[v] += 1
        np.testing.assert_allclose(dist, raw / raw.sum(), atol=1e-12)

    def test_ignored_pixels_excluded(self):
        labels = np.zeros((4, 4), dtype=np.uint8)
        labels[0] = 255
        dist = class_distribution([sample(np.zeros((4, 4)), labels=labels, split="t")], "split")
        assert dist["t"][0] == 1.0

    def test_unknown_group(self):
        with pytest.raises(UnknownGroup):
            class_distribution([sample(np.zeros((4, 4)), split="train")], "city")


class TestLongTailReport:
    def test_symmetric_not_flagged(self):
        hist = HeightHistogram(1.0, np.array([1, 5, 10, 5, 1]))
        report = long_tail_report(hist)
        assert not report["long_tailed"]

    def test_exponential_like_flagged(self):
        hist = HeightHistogram(1.0, np.array([1000, 300, 90, 27, 9, 3, 1]))
        report = long_tail_report(hist)
        assert report["long_tailed"]
        assert report["mean"] > report["median"]
        assert report["skewness"] > 0

    def test_empty_rejected(self):
        with pytest.raises(ShapeMismatch):
            long_tail_report(HeightHistogram(1.0))


class TestOutputs:
    def test_stats_report_shape(self):
        rng = np.random.default_rng(6)
        tiles = [
            sample(
                rng.exponential(1.5, (8, 8)),
                labels=rng.integers(0, 6, (8, 8)),
                split="train",
                city="alpha",
            )
            for _ in range(5)
        ]
        report = stats_report(tiles, bin_width=1.0)
        assert "histogram" in report and "long_tail" in report
        assert "split" in report["class_distribution"]
        assert "city" in report["class_distribution"]

    def test_pgm_format(self, tmp_path):
        grid = np.linspace(0, 10, 12).reshape(3, 4)
        path = tmp_path / "mean.pgm"
        write_pgm(path, grid)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n4 3\n255\n")
        pixels = np.frombuffer(blob[len(b"P5\n4 3\n255\n"):], dtype=np.uint8)
        assert pixels.size == 12
        assert pixels[0] == 0 and pixels[-1] == 255
