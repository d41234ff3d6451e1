"""Classified point cloud -> DSM/DTM/nDSM/label rasters -> aligned tiles.

Pipeline: statistical noise filtering, max-z rasterization over all points
(DSM), min-z rasterization over ground points (DTM), per-pixel height
above terrain nDSM = max(DSM - DTM, 0), majority-vote label rasterization,
and alignment/cropping into tiles.

Aggregation rules are order-independent (max / min / majority with a
smallest-id tie break), so per-cell binning can be sharded freely and the
whole pipeline is deterministic for a given cloud.

Conventions chosen where only the what (not the how) is fixed upstream:
DSM empty cells are filled by nearest neighbor (preserves surface edges),
DTM empty cells by inverse-distance weighting from the 4 nearest filled
cells (terrain is smooth), and negative heights clamp to zero.

I/O: point clouds load from "x y z class" ASCII lines or the binary PCB1
format (magic "PCB1", u64 count, then x,y,z as f64 plus u32 class per
point, little-endian). Rasters persist as FBT1 payloads with a JSON
sidecar carrying georeferencing and the class palette.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import CLASS_NAMES, IGNORE_INDEX
from .errors import (
    EmptyCloud,
    GridSpecMismatch,
    NoGroundPoints,
    NoOverlapWithGrid,
    ShapeMismatch,
)
from .tensor.io import dump_fbt, load_fbt

GROUND_CLASS = 0
DEFAULT_CELL_SIZE = 0.33  # meters per pixel


@dataclass(frozen=True)
class PointCloud:
    """Flat arrays of x, y, z (meters) and integer class ids."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    class_id: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "z"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
        object.__setattr__(
            self, "class_id", np.ascontiguousarray(self.class_id, dtype=np.int32)
        )
        n = self.x.size
        if not (self.y.size == self.z.size == self.class_id.size == n):
            raise ShapeMismatch("point cloud arrays disagree in length")
        if n and not np.isfinite(self.z).all():
            raise ShapeMismatch("point cloud has non-finite z values")

    def __len__(self) -> int:
        return int(self.x.size)

    @property
    def bounds(self) -> tuple:
        if len(self) == 0:
            raise EmptyCloud("empty point cloud has no bounds")
        return (
            float(self.x.min()),
            float(self.y.min()),
            float(self.x.max()),
            float(self.y.max()),
        )

    def subset(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(self.x[mask], self.y[mask], self.z[mask], self.class_id[mask])


@dataclass(frozen=True)
class GridSpec:
    """Georeferencing: cell (r, c) center is (x0+(c+.5)*cell, y0+(r+.5)*cell)."""

    x0: float
    y0: float
    rows: int
    cols: int
    cell_size: float = DEFAULT_CELL_SIZE

    def __post_init__(self):
        if self.cell_size <= 0:
            raise GridSpecMismatch(f"cell_size must be positive, got {self.cell_size}")
        if self.rows < 1 or self.cols < 1:
            raise GridSpecMismatch("grid must have at least one cell")

    def cell_of(self, x: np.ndarray, y: np.ndarray) -> tuple:
        c = np.floor((x - self.x0) / self.cell_size).astype(np.int64)
        r = np.floor((y - self.y0) / self.cell_size).astype(np.int64)
        return r, c

    def centers(self) -> tuple:
        xs = self.x0 + (np.arange(self.cols) + 0.5) * self.cell_size
        ys = self.y0 + (np.arange(self.rows) + 0.5) * self.cell_size
        return xs, ys


def grid_from_bounds(bounds, cell_size: float = DEFAULT_CELL_SIZE) -> GridSpec:
    min_x, min_y, max_x, max_y = bounds
    cols = max(1, int(np.ceil((max_x - min_x) / cell_size)))
    rows = max(1, int(np.ceil((max_y - min_y) / cell_size)))
    return GridSpec(x0=float(min_x), y0=float(min_y), rows=rows, cols=cols, cell_size=cell_size)


@dataclass
class RasterGrid:
    """A georeferenced value grid; values is (rows, cols) or (C, rows, cols)."""

    spec: GridSpec
    values: np.ndarray
    nodata: float = float("nan")

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim not in (2, 3):
            raise ShapeMismatch(f"raster values must be 2-D or 3-D, got {self.values.ndim}-D")
        if self.values.shape[-2:] != (self.spec.rows, self.spec.cols):
            raise GridSpecMismatch(
                f"values shape {self.values.shape[-2:]} != grid {self.spec.rows}x{self.spec.cols}"
            )

    def nodata_mask(self) -> np.ndarray:
        plane = self.values if self.values.ndim == 2 else self.values[0]
        if np.isnan(self.nodata):
            mask = np.isnan(self.values)
        else:
            mask = self.values == self.nodata
        return mask.any(axis=0) if self.values.ndim == 3 else mask


def _require_same_spec(*rasters: RasterGrid) -> GridSpec:
    spec = rasters[0].spec
    for r in rasters[1:]:
        if r.spec != spec:
            raise GridSpecMismatch(f"grid specs differ: {r.spec} vs {spec}")
    return spec


# --- noise filtering -----------------------------------------------------------

def filter_noise(pc: PointCloud, k: int = 8, sigma: float = 2.0) -> PointCloud:
    """Statistical outlier removal.

    Drops every point whose mean distance to its k nearest neighbors
    exceeds global_mean + sigma * global_std of that statistic. Order is
    preserved; sigma = inf keeps everything.
    """
    if len(pc) == 0:
        raise EmptyCloud("cannot filter an empty cloud")
    if k < 1:
        raise ShapeMismatch(f"k must be >= 1, got {k}")
    if len(pc) <= k:
        return pc
    if np.isinf(sigma):
        return pc
    pts = np.column_stack([pc.x, pc.y, pc.z])
    tree = cKDTree(pts)
    dists, _ = tree.query(pts, k=k + 1)  # first column is the point itself
    mean_dist = dists[:, 1:].mean(axis=1)
    cutoff = mean_dist.mean() + sigma * mean_dist.std()
    return pc.subset(mean_dist <= cutoff)


# --- rasterization ---------------------------------------------------------------

def _bin_points(pc: PointCloud, spec: GridSpec) -> tuple:
    r, c = spec.cell_of(pc.x, pc.y)
    inside = (r >= 0) & (r < spec.rows) & (c >= 0) & (c < spec.cols)
    if not inside.any():
        raise NoOverlapWithGrid("no points fall inside the grid")
    return r[inside], c[inside], inside


def _fill_nearest(values: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace unfilled cells with the value of the nearest filled cell."""
    if filled.all():
        return values
    rows, cols = values.shape
    fr, fc = np.nonzero(filled)
    er, ec = np.nonzero(~filled)
    tree = cKDTree(np.column_stack([fr, fc]))
    _, idx = tree.query(np.column_stack([er, ec]), k=1)
    out = values.copy()
    out[er, ec] = values[fr[idx], fc[idx]]
    return out


def _fill_idw(values: np.ndarray, filled: np.ndarray, neighbors: int = 4) -> np.ndarray:
    """Inverse-distance interpolation from the nearest filled cells."""
    if filled.all():
        return values
    fr, fc = np.nonzero(filled)
    er, ec = np.nonzero(~filled)
    k = min(neighbors, fr.size)
    tree = cKDTree(np.column_stack([fr, fc]))
    dist, idx = tree.query(np.column_stack([er, ec]), k=k)
    dist = np.atleast_2d(dist.T).T.reshape(er.size, k)
    idx = np.atleast_2d(idx.T).T.reshape(er.size, k)
    w = 1.0 / np.maximum(dist, 1e-9)
    vals = values[fr[idx], fc[idx]]
    out = values.copy()
    out[er, ec] = (w * vals).sum(axis=1) / w.sum(axis=1)
    return out


def rasterize_dsm(pc: PointCloud, spec: GridSpec) -> RasterGrid:
    """Per-cell maximum z over all points; empty cells nearest-neighbor filled."""
    if len(pc) == 0:
        raise EmptyCloud("cannot rasterize an empty cloud")
    r, c, inside = _bin_points(pc, spec)
    surface = np.full((spec.rows, spec.cols), -np.inf)
    np.maximum.at(surface, (r, c), pc.z[inside])
    filled = surface > -np.inf
    surface[~filled] = np.nan
    return RasterGrid(spec, _fill_nearest(surface, filled))


def rasterize_dtm(
    pc: PointCloud, spec: GridSpec, ground_class: int = GROUND_CLASS
) -> RasterGrid:
    """Per-cell minimum z over ground points; empty cells IDW-interpolated."""
    ground = pc.subset(pc.class_id == ground_class)
    if len(ground) == 0:
        raise NoGroundPoints(f"no points with ground class {ground_class}")
    r, c, inside = _bin_points(ground, spec)
    terrain = np.full((spec.rows, spec.cols), np.inf)
    np.minimum.at(terrain, (r, c), ground.z[inside])
    filled = terrain < np.inf
    terrain[~filled] = np.nan
    return RasterGrid(spec, _fill_idw(terrain, filled))


def derive_ndsm(dsm: RasterGrid, dtm: RasterGrid) -> RasterGrid:
    """Height above terrain: max(dsm - dtm, 0); nodata propagates."""
    spec = _require_same_spec(dsm, dtm)
    bad = dsm.nodata_mask() | dtm.nodata_mask()
    out = np.maximum(dsm.values - dtm.values, 0.0)
    out[bad] = np.nan
    return RasterGrid(spec, out)


def rasterize_labels(pc: PointCloud, spec: GridSpec) -> RasterGrid:
    """Per-cell majority class; ties break to the smallest class id.

    Cells containing no points get the ignore index (255).
    """
    if len(pc) == 0:
        raise EmptyCloud("cannot rasterize an empty cloud")
    r, c, inside = _bin_points(pc, spec)
    cls = pc.class_id[inside].astype(np.int64)
    n_cls = int(cls.max()) + 1
    votes = np.zeros((spec.rows, spec.cols, n_cls), dtype=np.int64)
    np.add.at(votes, (r, c, cls), 1)
    # argmax returns the first (smallest) index on ties
    labels = votes.argmax(axis=2).astype(np.int32)
    labels[votes.sum(axis=2) == 0] = IGNORE_INDEX
    return RasterGrid(spec, labels, nodata=float(IGNORE_INDEX))


# --- tiling -------------------------------------------------------------------

def crop_tiles(
    rasters: dict,
    tile: int,
    stride: int,
    drop_keys: Sequence[str] = ("rgb", "height"),
) -> list:
    """Row-major tiles over an aligned raster set.

    Returns [{"row": r0, "col": c0, <name>: array, ...}]. Tiles whose rgb
    or height crop contains nodata are dropped. Tile count before dropping
    is floor((H - tile)/stride + 1) * floor((W - tile)/stride + 1).
    """
    grids = list(rasters.values())
    if not grids:
        raise GridSpecMismatch("no rasters to tile")
    spec = _require_same_spec(*grids)
    if tile > spec.rows or tile > spec.cols:
        raise GridSpecMismatch(f"tile {tile} exceeds grid {spec.rows}x{spec.cols}")
    if stride < 1:
        raise GridSpecMismatch(f"stride must be >= 1, got {stride}")

    out = []
    for r0 in range(0, spec.rows - tile + 1, stride):
        for c0 in range(0, spec.cols - tile + 1, stride):
            entry = {"row": r0, "col": c0}
            keep = True
            for name, raster in rasters.items():
                crop = raster.values[..., r0:r0 + tile, c0:c0 + tile]
                if name in drop_keys:
                    sub = RasterGrid(
                        GridSpec(0.0, 0.0, tile, tile, spec.cell_size), crop, raster.nodata
                    )
                    if sub.nodata_mask().any():
                        keep = False
                        break
                entry[name] = crop.copy()
            if keep:
                out.append(entry)
    return out


# --- point cloud I/O -------------------------------------------------------------

PCB_MAGIC = b"PCB1"
_POINT_STRUCT = struct.Struct("<dddI")


def write_points_ascii(path, pc: PointCloud) -> None:
    with open(path, "w") as fh:
        for i in range(len(pc)):
            fh.write(f"{pc.x[i]:.6f} {pc.y[i]:.6f} {pc.z[i]:.6f} {int(pc.class_id[i])}\n")


def write_points_pcb(path, pc: PointCloud) -> None:
    raw = np.empty(
        len(pc), dtype=np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("c", "<u4")])
    )
    raw["x"], raw["y"], raw["z"], raw["c"] = pc.x, pc.y, pc.z, pc.class_id
    with open(path, "wb") as fh:
        fh.write(PCB_MAGIC + struct.pack("<Q", len(pc)))
        fh.write(raw.tobytes())


def read_points(path) -> PointCloud:
    """Load a point cloud, sniffing PCB1 binary vs ASCII "x y z class" lines."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == PCB_MAGIC:
        (count,) = struct.unpack_from("<Q", blob, 4)
        expected = 8 + 4 + count * _POINT_STRUCT.size
        if len(blob) != expected:
            raise ShapeMismatch(f"PCB1 length {len(blob)} != expected {expected}")
        raw = np.frombuffer(
            blob,
            dtype=np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("c", "<u4")]),
            count=count,
            offset=12,
        )
        return PointCloud(raw["x"], raw["y"], raw["z"], raw["c"].astype(np.int32))
    rows = np.loadtxt(path.as_posix(), dtype=np.float64, ndmin=2)
    if rows.size == 0:
        raise EmptyCloud(f"{path} holds no points")
    if rows.shape[1] != 4:
        raise ShapeMismatch(f"expected 4 columns (x y z class), got {rows.shape[1]}")
    return PointCloud(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3].astype(np.int32))


# --- raster I/O -------------------------------------------------------------------

def write_raster(path, raster: RasterGrid) -> None:
    """FBT1 payload plus a .json sidecar with georeferencing and palette."""
    path = Path(path)
    path.write_bytes(dump_fbt(np.asarray(raster.values, dtype=np.float64)))
    sidecar = {
        "x0": raster.spec.x0,
        "y0": raster.spec.y0,
        "rows": raster.spec.rows,
        "cols": raster.spec.cols,
        "cell_size": raster.spec.cell_size,
        "nodata": None if np.isnan(raster.nodata) else raster.nodata,
        "classes": list(CLASS_NAMES),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=1, sort_keys=True)
    )


def read_raster(path) -> RasterGrid:
    path = Path(path)
    values = load_fbt(path.read_bytes())
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    spec = GridSpec(
        x0=meta["x0"], y0=meta["y0"], rows=meta["rows"], cols=meta["cols"],
        cell_size=meta["cell_size"],
    )
    nodata = float("nan") if meta["nodata"] is None else float(meta["nodata"])
    return RasterGrid(spec, values, nodata=nodata)
