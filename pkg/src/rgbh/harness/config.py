"""Experiment configuration: a flat INI-style key=value file with sections.

Sections and keys (defaults in parentheses):

    [data]   root                       tile archive directory
    [model]  backbone (transformer), embed_dim (32), num_heads (4),
             patch_size (8), depth (2), mlp_ratio (2.0),
             conv_widths (16,32,64,128), classes (6)
    [train]  paradigm (intermediary), seed (0), epochs (30),
             batch_size (8), lr (1e-3), crop (0 = full tile), flips (true),
             height_scale (0.05), val_interval (1), out (runs/<paradigm>)
    [matrix] paradigms (single_rgb,single_height,early,late,cross,
             intermediary), seeds (0,1,2), out (matrix)

Unknown keys and malformed values raise ConfigInvalid.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from ..backbones import CONV, TRANSFORMER, ModelConfig
from ..errors import ConfigInvalid
from ..fusion import Paradigm

_KNOWN = {
    "data": {"root"},
    "model": {
        "backbone",
        "embed_dim",
        "num_heads",
        "patch_size",
        "depth",
        "mlp_ratio",
        "conv_widths",
        "classes",
    },
    "train": {
        "paradigm",
        "seed",
        "epochs",
        "batch_size",
        "lr",
        "crop",
        "flips",
        "height_scale",
        "val_interval",
        "out",
    },
    "matrix": {"paradigms", "seeds", "out"},
}


@dataclass
class TrainSettings:
    paradigm: Paradigm = Paradigm.INTERMEDIARY
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    crop: int = 0  # 0 = use the full tile
    flips: bool = True
    height_scale: float = 0.05
    val_interval: int = 1
    out: str = ""


@dataclass
class MatrixSettings:
    paradigms: tuple = (
        Paradigm.SINGLE_RGB,
        Paradigm.SINGLE_HEIGHT,
        Paradigm.EARLY,
        Paradigm.LATE,
        Paradigm.CROSS,
        Paradigm.INTERMEDIARY,
    )
    seeds: tuple = (0, 1, 2)
    out: str = "matrix"


@dataclass
class HarnessConfig:
    data_root: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    matrix: MatrixSettings = field(default_factory=MatrixSettings)


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigInvalid(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _paradigm(raw: str) -> Paradigm:
    try:
        return Paradigm(raw.strip())
    except ValueError as exc:
        legal = ", ".join(p.value for p in Paradigm)
        raise ValueError(f"unknown paradigm (expected one of {legal})") from exc


def _int_tuple(raw: str) -> tuple:
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _paradigm_tuple(raw: str) -> tuple:
    return tuple(_paradigm(v) for v in raw.split(",") if v.strip())


def parse_config(path) -> HarnessConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc

    for section in parser.sections():
        if section not in _KNOWN:
            raise ConfigInvalid(f"unknown section [{section}]")
        for key in parser.options(section):
            if key not in _KNOWN[section]:
                raise ConfigInvalid(f"unknown key {key!r} in [{section}]")

    backbone = _get(parser, "model", "backbone", str.strip, TRANSFORMER)
    if backbone not in (CONV, TRANSFORMER):
        raise ConfigInvalid(f"[model] backbone must be conv or transformer, got {backbone!r}")
    model = ModelConfig(
        backbone=backbone,
        classes=_get(parser, "model", "classes", int, 6),
        embed_dim=_get(parser, "model", "embed_dim", int, 32),
        num_heads=_get(parser, "model", "num_heads", int, 4),
        patch_size=_get(parser, "model", "patch_size", int, 8),
        depth=_get(parser, "model", "depth", int, 2),
        mlp_ratio=_get(parser, "model", "mlp_ratio", float, 2.0),
        conv_widths=_get(parser, "model", "conv_widths", _int_tuple, (16, 32, 64, 128)),
    )
    if model.embed_dim % model.num_heads:
        raise ConfigInvalid("[model] embed_dim must be divisible by num_heads")

    train = TrainSettings(
        paradigm=_get(parser, "train", "paradigm", _paradigm, Paradigm.INTERMEDIARY),
        seed=_get(parser, "train", "seed", int, 0),
        epochs=_get(parser, "train", "epochs", int, 30),
        batch_size=_get(parser, "train", "batch_size", int, 8),
        lr=_get(parser, "train", "lr", float, 1e-3),
        crop=_get(parser, "train", "crop", int, 0),
        flips=_get(parser, "train", "flips", _bool, True),
        height_scale=_get(parser, "train", "height_scale", float, 0.05),
        val_interval=_get(parser, "train", "val_interval", int, 1),
        out=_get(parser, "train", "out", str.strip, ""),
    )
    for name, value in (
        ("epochs", train.epochs),
        ("batch_size", train.batch_size),
        ("val_interval", train.val_interval),
    ):
        if value < 0 or (name != "epochs" and value == 0):
            raise ConfigInvalid(f"[train] {name} must be positive, got {value}")
    if train.lr <= 0:
        raise ConfigInvalid(f"[train] lr must be positive, got {train.lr}")

    matrix = MatrixSettings(
        paradigms=_get(parser, "matrix", "paradigms", _paradigm_tuple, MatrixSettings().paradigms),
        seeds=_get(parser, "matrix", "seeds", _int_tuple, (0, 1, 2)),
        out=_get(parser, "matrix", "out", str.strip, "matrix"),
    )
    if not matrix.paradigms or not matrix.seeds:
        raise ConfigInvalid("[matrix] needs at least one paradigm and one seed")

    data_root = _get(parser, "data", "root", str.strip, "")
    return HarnessConfig(data_root=data_root, model=model, train=train, matrix=matrix)
