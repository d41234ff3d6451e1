"""Report rendering: comparison tables and figures as files.

The report path always writes the delimited table (CSV) next to the
rendered matplotlib figures (PNG), so results stay grep-able and
plottable from the same directory.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .. import REPORT_CLASS_NAMES
from ..stats import write_pgm
from .loop import matrix_csv

_PARADIGM_LABELS = {
    "single_rgb": "Single (RGB)",
    "single_height": "Single (Height)",
    "early": "Early",
    "feature": "Feature",
    "late": "Late",
    "cross": "Cross",
    "intermediary": "Intermediary",
}


def _label(paradigm: str) -> str:
    return _PARADIGM_LABELS.get(paradigm, paradigm)


def render_matrix_report(table: dict, out_dir) -> list:
    """CSV plus two figures (seed-mean mIoU bars, per-class IoU bars)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out / "comparison.csv"
    csv_path.write_text(matrix_csv(table))
    written.append(csv_path)

    paradigms = table["paradigms"]
    means = {r["paradigm"]: r for r in table["rows"] if r["seed"] == "mean"}
    per_seed = {
        p: [r["miou"] for r in table["rows"] if r["paradigm"] == p and r["seed"] != "mean"]
        for p in paradigms
    }

    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(paradigms))
    ax.bar(xs, [means[p]["miou"] for p in paradigms], color="#4878a8", zorder=2)
    for i, p in enumerate(paradigms):
        ax.scatter([i] * len(per_seed[p]), per_seed[p], color="#202020", s=12, zorder=3)
    ax.set_xticks(xs)
    ax.set_xticklabels([_label(p) for p in paradigms], rotation=20, ha="right")
    ax.set_ylabel("test mIoU (seed mean, dots = seeds)")
    ax.set_title("Fusion paradigm comparison")
    ax.grid(axis="y", alpha=0.3, zorder=0)
    fig.tight_layout()
    path = out / "miou_by_paradigm.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(9, 4))
    width = 0.8 / len(paradigms)
    for i, p in enumerate(paradigms):
        ious = [v if v is not None else 0.0 for v in means[p]["iou"]]
        ax.bar(
            np.arange(len(REPORT_CLASS_NAMES)) + i * width,
            ious,
            width=width,
            label=_label(p),
            zorder=2,
        )
    ax.set_xticks(np.arange(len(REPORT_CLASS_NAMES)) + 0.4 - width / 2)
    ax.set_xticklabels(REPORT_CLASS_NAMES)
    ax.set_ylabel("IoU (seed mean)")
    ax.set_title("Per-class IoU by fusion paradigm")
    ax.legend(fontsize=8, ncols=2)
    ax.grid(axis="y", alpha=0.3, zorder=0)
    fig.tight_layout()
    path = out / "iou_by_class.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)
    return written


def render_stats_report(report: dict, mean_map: np.ndarray | None, out_dir) -> list:
    """Figures for the dataset statistics report (plus PGM of the mean map)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    hist = report["histogram"]
    counts = np.asarray(hist["counts"], dtype=np.float64)
    centers = (np.arange(counts.size) + 0.5) * hist["bin_width"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, counts, width=hist["bin_width"] * 0.9, color="#4878a8", zorder=2)
    ax.set_yscale("log")
    ax.set_xlabel("height (m)")
    ax.set_ylabel("pixels")
    tail = report["long_tail"]
    ax.set_title(
        f"Height distribution (mean {tail['mean']:.2f}, median {tail['median']:.2f}, "
        f"skew {tail['skewness']:.2f})"
    )
    ax.grid(axis="y", alpha=0.3, zorder=0)
    fig.tight_layout()
    path = out / "height_histogram.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    if mean_map is not None:
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(mean_map, cmap="viridis")
        fig.colorbar(im, ax=ax, label="mean height (m)")
        ax.set_title("Per-pixel mean height")
        fig.tight_layout()
        path = out / "spatial_mean.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

        pgm_path = out / "spatial_mean.pgm"
        write_pgm(pgm_path, mean_map)
        written.append(pgm_path)

    for key, dist in report.get("class_distribution", {}).items():
        groups = list(dist)
        if not groups:
            continue
        fig, ax = plt.subplots(figsize=(7, 4))
        bottom = np.zeros(len(groups))
        for ci, cname in enumerate(REPORT_CLASS_NAMES):
            vals = np.array([dist[g][ci] for g in groups])
            ax.bar(groups, vals, bottom=bottom, label=cname, zorder=2)
            bottom += vals
        ax.set_ylabel("pixel fraction")
        ax.set_title(f"Class distribution by {key}")
        ax.legend(fontsize=8, ncols=3)
        fig.tight_layout()
        path = out / f"class_distribution_{key}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
