"""Dataset statistics: height histograms, spatial patterns, class mixes.

Everything accumulates shard-by-shard with associative updates, so
statistics over a tile archive can stream without holding the dataset in
memory, and partial results merge exactly.

The long-tail report works from the binned histogram (mean, median, and
adjusted Fisher-Pearson skewness computed over bin centers) and flags a
distribution as long-tailed when mean > median and skewness > 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import NUM_CLASSES, IGNORE_INDEX
from .errors import MixedTileSizes, ShapeMismatch, UnknownGroup


@dataclass
class HeightHistogram:
    """Counts per [k*w, (k+1)*w) bin starting at zero height."""

    bin_width: float
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ShapeMismatch(f"bin_width must be positive, got {self.bin_width}")
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def centers(self) -> np.ndarray:
        return (np.arange(self.counts.size) + 0.5) * self.bin_width

    def add(self, heights: np.ndarray) -> "HeightHistogram":
        h = np.asarray(heights, dtype=np.float64).ravel()
        if h.size == 0:
            return self
        if (h < 0).any():
            raise ShapeMismatch("heights must be nonnegative")
        idx = np.floor(h / self.bin_width).astype(np.int64)
        counts = np.bincount(idx, minlength=max(self.counts.size, int(idx.max()) + 1))
        if counts.size > self.counts.size:
            grown = np.zeros(counts.size, dtype=np.int64)
            grown[: self.counts.size] = self.counts
            self.counts = grown
        self.counts = self.counts + counts
        return self

    def merge(self, other: "HeightHistogram") -> "HeightHistogram":
        if other.bin_width != self.bin_width:
            raise ShapeMismatch("cannot merge histograms with different bin widths")
        size = max(self.counts.size, other.counts.size)
        out = np.zeros(size, dtype=np.int64)
        out[: self.counts.size] += self.counts
        out[: other.counts.size] += other.counts
        return HeightHistogram(self.bin_width, out)


def height_histogram(tiles: Iterable, bin_width: float = 1.0) -> HeightHistogram:
    """Histogram all height pixels of an iterable of samples/arrays."""
    hist = HeightHistogram(bin_width)
    for tile in tiles:
        hist.add(_height_of(tile))
    return hist


def _height_of(tile) -> np.ndarray:
    return tile.height if hasattr(tile, "height") else np.asarray(tile)


def spatial_mean_map(tiles: Iterable) -> np.ndarray:
    """Per-pixel mean height across tiles (all tiles one shape)."""
    total: Optional[np.ndarray] = None
    count = 0
    shape = None
    for tile in tiles:
        h = np.asarray(_height_of(tile), dtype=np.float64)
        h = h[0] if h.ndim == 3 else h
        if shape is None:
            shape = h.shape
            total = np.zeros(shape, dtype=np.float64)
        elif h.shape != shape:
            raise MixedTileSizes(f"tile shapes differ: {h.shape} vs {shape}")
        total += h
        count += 1
    if count == 0:
        raise MixedTileSizes("no tiles given")
    return total / count


def class_distribution(tiles: Iterable, group_key: str = "split") -> dict:
    """Per-group per-class pixel fractions (ignored pixels excluded).

    Tiles must carry metadata: either a .meta dict or dict-style items with
    the group key ("split" or "city") and a labels array.
    """
    counts: dict = {}
    for tile in tiles:
        meta = tile.meta if hasattr(tile, "meta") else tile
        if group_key not in meta:
            raise UnknownGroup(f"tile metadata lacks group key {group_key!r}")
        group = meta[group_key]
        labels = tile.labels if hasattr(tile, "labels") else tile["labels"]
        labels = np.asarray(labels).ravel()
        labels = labels[labels != IGNORE_INDEX]
        row = counts.setdefault(group, np.zeros(NUM_CLASSES, dtype=np.int64))
        row += np.bincount(labels.astype(np.int64), minlength=NUM_CLASSES)[:NUM_CLASSES]
    out = {}
    for group, row in sorted(counts.items()):
        total = row.sum()
        out[group] = (row / total).tolist() if total else [0.0] * NUM_CLASSES
    return out


def long_tail_report(hist: HeightHistogram) -> dict:
    """Mean/median/skewness of the binned heights plus the long-tail flag."""
    if hist.total == 0:
        raise ShapeMismatch("empty histogram")
    centers = hist.centers()
    weights = hist.counts.astype(np.float64)
    n = weights.sum()
    mean = float((centers * weights).sum() / n)

    cum = np.cumsum(weights)
    median_bin = int(np.searchsorted(cum, n / 2.0))
    median = float(centers[median_bin])

    m2 = float((weights * (centers - mean) ** 2).sum() / n)
    m3 = float((weights * (centers - mean) ** 3).sum() / n)
    if m2 > 0 and n > 2:
        g1 = m3 / m2**1.5
        skewness = g1 * np.sqrt(n * (n - 1)) / (n - 2)
    else:
        skewness = 0.0
    skewness = float(skewness)

    return {
        "pixels": int(n),
        "mean": mean,
        "median": median,
        "skewness": skewness,
        "long_tailed": bool(mean > median and skewness > 0),
    }


def stats_report(tiles: list, bin_width: float = 1.0) -> dict:
    """One-stop JSON-ready report over a materialized tile list."""
    hist = height_histogram(tiles, bin_width)
    report = {
        "histogram": {
            "bin_width": hist.bin_width,
            "counts": hist.counts.tolist(),
        },
        "long_tail": long_tail_report(hist),
        "class_distribution": {},
    }
    for key in ("split", "city"):
        try:
            report["class_distribution"][key] = class_distribution(tiles, key)
        except UnknownGroup:
            pass
    return report


def write_pgm(path, grid: np.ndarray) -> None:
    """Write a grayscale raw PGM ("P5") image, min-max scaled to 0..255."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeMismatch(f"PGM needs a 2-D grid, got {grid.ndim}-D")
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes())


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
