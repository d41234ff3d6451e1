"""Deterministic synthetic RGB/height/label scene generator.

Scenes are built so that neither modality alone can separate all six
classes, while the pair can:

* ground and low vegetation draw their heights from the *same* smooth
  terrain field, but have clearly different colors, so height carries no
  signal for that pair;
* buildings and trees share one RGB color distribution (same mean, iid
  pixel noise), but buildings get box-flat tall roofs while tree canopies
  are tall and rugged, so color carries no signal for that pair;
* water and road sit at terrain level with their own colors.

Tall classes cover a minority of pixels, which makes the aggregate height
histogram long-tailed (most mass near zero, a thin tail up to roof
height).

Datasets draw every tile from its own child seed (split and index mixed
into the seed sequence), tag each tile with one of five pseudo-cities
(distinct generation parameter perturbations), and write FBT1 triples
plus a JSON manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import CLASS_NAMES
from .errors import DatasetMissing, ShapeMismatch
from .tensor.io import read_fbt, write_fbt

GROUND, LOW_VEG, BUILDING, WATER, ROAD, TREE = range(6)

CITIES = ("alpha", "bravo", "charlie", "delta", "echo")
SPLITS = ("train", "val", "test")


@dataclass
class ModalitySample:
    """One co-registered dataset item."""

    rgb: np.ndarray  # (3,S,S) float32 in [0,1]
    height: np.ndarray  # (1,S,S) float32 meters
    labels: np.ndarray  # (S,S) uint8 class ids
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SceneSpec:
    """Generation priors; heights in meters, colors in [0,1] RGB."""

    tile_size: int = 64
    # (low, high) height priors per class; ground and low vegetation share
    # one prior on purpose, buildings/trees sit strictly above everything
    ground_height: tuple = (0.0, 0.6)
    building_height: tuple = (8.0, 22.0)
    tree_height: tuple = (5.0, 16.0)
    # mean colors; building and tree share one distribution on purpose
    ground_color: tuple = (0.46, 0.40, 0.30)
    veg_color: tuple = (0.28, 0.55, 0.24)
    water_color: tuple = (0.10, 0.22, 0.46)
    road_color: tuple = (0.46, 0.46, 0.48)
    tall_color: tuple = (0.35, 0.38, 0.32)
    color_noise: float = 0.045
    # layout
    regions_min: int = 6
    regions_max: int = 10
    region_size: tuple = (10, 26)
    road_prob: float = 0.65
    class_weights: tuple = (0.30, 0.15, 0.25, 0.30)  # veg, water, building, tree
    # confusability switches
    confuse_ground_veg_height: bool = True
    confuse_building_tree_rgb: bool = True

    def __post_init__(self):
        low_max = max(self.ground_height[1], 0.6)
        if not (self.building_height[0] > low_max and self.tree_height[0] > low_max):
            raise ShapeMismatch(
                "building/tree height priors must sit strictly above the flat classes"
            )
        if self.tile_size < 32:
            raise ShapeMismatch(f"tile_size must be >= 32, got {self.tile_size}")


def spec_hash(spec: SceneSpec) -> str:
    blob = json.dumps(asdict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def city_spec(base: SceneSpec, city: str) -> SceneSpec:
    """Perturb the base spec per pseudo-city (class mix, sizes, tints)."""
    idx = CITIES.index(city)
    mixes = (
        (0.30, 0.15, 0.25, 0.30),
        (0.45, 0.05, 0.30, 0.20),
        (0.15, 0.30, 0.20, 0.35),
        (0.25, 0.10, 0.45, 0.20),
        (0.40, 0.20, 0.10, 0.30),
    )
    sizes = ((10, 26), (8, 20), (12, 30), (10, 24), (9, 22))
    road_probs = (0.65, 0.8, 0.5, 0.9, 0.4)
    bh = (8.0 + idx * 1.5, 22.0 + idx * 2.0)
    tint = (idx - 2) * 0.015
    return SceneSpec(
        tile_size=base.tile_size,
        ground_height=base.ground_height,
        building_height=bh,
        tree_height=base.tree_height,
        ground_color=tuple(np.clip(np.array(base.ground_color) + tint, 0, 1)),
        veg_color=base.veg_color,
        water_color=base.water_color,
        road_color=base.road_color,
        tall_color=base.tall_color,
        color_noise=base.color_noise,
        regions_min=base.regions_min,
        regions_max=base.regions_max,
        region_size=sizes[idx],
        road_prob=road_probs[idx],
        class_weights=mixes[idx],
        confuse_ground_veg_height=base.confuse_ground_veg_height,
        confuse_building_tree_rgb=base.confuse_building_tree_rgb,
    )


def _value_noise(rng: np.random.Generator, size: int, cells: int, lo: float, hi: float):
    """Bilinear-upsampled coarse uniform noise (smooth by construction)."""
    grid = rng.uniform(lo, hi, (cells + 1, cells + 1))
    t = np.arange(size) * (cells / size)
    i = np.floor(t).astype(int)
    f = t - i
    g00 = grid[np.ix_(i, i)]
    g01 = grid[np.ix_(i, i + 1)]
    g10 = grid[np.ix_(i + 1, i)]
    g11 = grid[np.ix_(i + 1, i + 1)]
    fy, fx = f[:, None], f[None, :]
    return (
        g00 * (1 - fy) * (1 - fx)
        + g01 * (1 - fy) * fx
        + g10 * fy * (1 - fx)
        + g11 * fy * fx
    )


def generate_scene(seed: int, spec: SceneSpec) -> ModalitySample:
    """One tile; bit-identical for identical (seed, spec)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD47A]))
    s = spec.tile_size
    labels = np.full((s, s), GROUND, dtype=np.uint8)

    # region bookkeeping for per-region heights
    region_ids = np.full((s, s), -1, dtype=np.int32)
    region_classes: list = []

    if rng.random() < spec.road_prob:
        width = int(rng.integers(4, 9))
        offset = int(rng.integers(0, s - width))
        if rng.random() < 0.5:
            labels[offset:offset + width, :] = ROAD
        else:
            labels[:, offset:offset + width] = ROAD

    n_regions = int(rng.integers(spec.regions_min, spec.regions_max + 1))
    choices = (LOW_VEG, WATER, BUILDING, TREE)
    for _ in range(n_regions):
        cls = int(rng.choice(choices, p=np.array(spec.class_weights)))
        lo, hi = spec.region_size
        rh = int(rng.integers(lo, hi + 1))
        rw = int(rng.integers(lo, hi + 1))
        r0 = int(rng.integers(0, s - rh + 1))
        c0 = int(rng.integers(0, s - rw + 1))
        labels[r0:r0 + rh, c0:c0 + rw] = cls
        region_ids[r0:r0 + rh, c0:c0 + rw] = len(region_classes)
        region_classes.append(cls)

    # --- heights ---------------------------------------------------------
    terrain = _value_noise(rng, s, 4, *spec.ground_height)
    jitter = rng.uniform(0.0, 0.05, (s, s))
    height = terrain + jitter
    if not spec.confuse_ground_veg_height:
        height[labels == LOW_VEG] += 1.0  # separated mode: shrubs poke up
    height[labels == WATER] = 0.0
    height[labels == ROAD] = (terrain * 0.5 + jitter)[labels == ROAD]

    # canopy undulates at roughly patch wavelength: telling a rugged crown
    # from a flat roof takes spatial context, not a single pixel
    canopy = _value_noise(rng, s, 8, -1.0, 1.0)
    for rid, cls in enumerate(region_classes):
        mask = region_ids == rid
        if not mask.any():
            continue  # fully overpainted by a later region
        if cls == BUILDING:
            roof = rng.uniform(*spec.building_height)
            height[mask] = roof + rng.uniform(-0.05, 0.05, int(mask.sum()))
        elif cls == TREE:
            base = rng.uniform(*spec.tree_height)
            rough = canopy[mask] * 0.30 * base + rng.uniform(
                -0.04 * base, 0.04 * base, int(mask.sum())
            )
            height[mask] = np.maximum(base + rough, 2.5)
    height = np.maximum(height, 0.0)

    # --- colors ----------------------------------------------------------
    palette = {
        GROUND: spec.ground_color,
        LOW_VEG: spec.veg_color,
        WATER: spec.water_color,
        ROAD: spec.road_color,
        BUILDING: spec.tall_color,
        TREE: spec.tall_color if spec.confuse_building_tree_rgb else (0.20, 0.45, 0.20),
    }
    rgb = np.zeros((3, s, s), dtype=np.float64)
    for cls, color in palette.items():
        mask = labels == cls
        for ch in range(3):
            rgb[ch][mask] = color[ch]
    rgb += rng.normal(0.0, spec.color_noise, (3, s, s))
    shade = _value_noise(rng, s, 8, -0.02, 0.02)
    rgb = np.clip(rgb + shade[None], 0.0, 1.0)

    # construction guarantee: tall classes dominate flat ones per tile
    tall = (labels == BUILDING) | (labels == TREE)
    if tall.any() and (~tall).any():
        assert height[tall].mean() > height[~tall].mean()

    return ModalitySample(
        rgb=rgb.astype(np.float32),
        height=height[None].astype(np.float32),
        labels=labels,
        meta={"seed": int(seed)},
    )


# --- dataset assembly ----------------------------------------------------------

def generate_dataset(
    seed: int,
    spec: SceneSpec,
    counts: dict,
    out_dir: Optional[Path] = None,
) -> tuple:
    """Generate disjoint-seeded splits; optionally persist to out_dir.

    counts maps split name -> tile count. Returns (samples, manifest).
    """
    for split in counts:
        if split not in SPLITS:
            raise ShapeMismatch(f"unknown split {split!r}")
        if counts[split] < 1:
            raise ShapeMismatch("every split needs at least one tile")

    samples: list = []
    entries: list = []
    for split_idx, split in enumerate(SPLITS):
        if split not in counts:
            continue
        for i in range(counts[split]):
            child = np.random.SeedSequence([seed, split_idx, i])
            tile_seed = int(child.generate_state(1)[0])
            city = CITIES[int(tile_seed) % len(CITIES)]
            sample = generate_scene(tile_seed, city_spec(spec, city))
            tile_id = f"{split}_{i:05d}"
            sample.meta.update({"id": tile_id, "split": split, "city": city})
            samples.append(sample)
            entries.append(
                {"id": tile_id, "split": split, "city": city, "seed": tile_seed}
            )

    manifest = {
        "seed": seed,
        "spec_hash": spec_hash(spec),
        "tile_size": spec.tile_size,
        "classes": list(CLASS_NAMES),
        "counts": dict(counts),
        "tiles": entries,
    }
    if out_dir is not None:
        write_tiles(out_dir, samples, manifest)
    return samples, manifest


def write_tiles(out_dir, samples: Iterable[ModalitySample], manifest: dict) -> None:
    out_dir = Path(out_dir)
    tile_dir = out_dir / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        tid = sample.meta["id"]
        write_fbt(tile_dir / f"{tid}.rgb.fbt", sample.rgb)
        write_fbt(tile_dir / f"{tid}.height.fbt", sample.height)
        write_fbt(tile_dir / f"{tid}.labels.fbt", sample.labels.astype(np.float32))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetMissing(f"no manifest at {path}")
    return json.loads(path.read_text())


def load_tiles(root, split: Optional[str] = None) -> list:
    """Materialize samples for one split (or all) from a tile archive."""
    root = Path(root)
    manifest = load_manifest(root)
    out = []
    for entry in manifest["tiles"]:
        if split is not None and entry["split"] != split:
            continue
        tid = entry["id"]
        tile_dir = root / "tiles"
        try:
            rgb = read_fbt(tile_dir / f"{tid}.rgb.fbt").astype(np.float32)
            height = read_fbt(tile_dir / f"{tid}.height.fbt").astype(np.float32)
            labels = read_fbt(tile_dir / f"{tid}.labels.fbt").astype(np.uint8)
        except FileNotFoundError as exc:
            raise DatasetMissing(f"tile {tid} missing from {tile_dir}") from exc
        out.append(ModalitySample(rgb=rgb, height=height, labels=labels, meta=dict(entry)))
    if not out:
        raise DatasetMissing(f"no tiles for split {split!r} under {root}")
    return out
