"""Command-line interface.

Subcommands: gen-data, derive-ndsm, stats, train, evaluate, run-matrix,
report. Exit code 0 on success; on a toolkit error, a one-line JSON blob
{"error": <type>, "message": <text>} goes to stderr and the exit code is
nonzero.

Set RGBH_NUM_THREADS to pin the BLAS thread count (the knob that keeps
matmul results bit-deterministic across machines); it must be read before
numpy loads, which is why the heavy imports below live inside the command
handlers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _configure_threads() -> None:
    n = os.environ.get("RGBH_NUM_THREADS")
    if n:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, n)


_configure_threads()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgbh",
        description="RGB + height fusion benchmark toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic tile archive")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--tile-size", type=int, default=64)

    p = sub.add_parser("derive-ndsm", help="point cloud -> DSM/DTM/nDSM/label rasters")
    p.add_argument("--points", required=True, help="ASCII 'x y z class' or PCB1 file")
    p.add_argument("--out", required=True)
    p.add_argument("--cell-size", type=float, default=0.33)
    p.add_argument("--ground-class", type=int, default=0)
    p.add_argument("--filter-k", type=int, default=8)
    p.add_argument("--filter-sigma", type=float, default=2.0)
    p.add_argument("--tile", type=int, default=0, help="also crop tiles of this size")
    p.add_argument("--stride", type=int, default=0, help="tile stride (defaults to tile)")

    p = sub.add_parser("stats", help="dataset statistics report")
    p.add_argument("--data", required=True, help="tile archive directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bin-width", type=float, default=1.0)
    p.add_argument("--pgm", action="store_true", help="also write spatial_mean.pgm")

    p = sub.add_parser("train", help="train one paradigm from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override [train] out")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None, help="directory for metrics.json/csv")

    p = sub.add_parser("run-matrix", help="train/evaluate the whole paradigm matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override [matrix] out")

    p = sub.add_parser("report", help="render comparison/stats figures + CSV")
    p.add_argument("--matrix", default=None, help="matrix.json from run-matrix")
    p.add_argument("--data", default=None, help="tile archive for dataset figures")
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", type=float, default=1.0)
    return parser


def cmd_gen_data(args) -> int:
    from .datagen import SceneSpec, generate_dataset

    spec = SceneSpec(tile_size=args.tile_size)
    counts = {"train": args.train, "val": args.val, "test": args.test}
    _, manifest = generate_dataset(args.seed, spec, counts, out_dir=Path(args.out))
    print(json.dumps({"out": args.out, "tiles": len(manifest["tiles"])}))
    return 0


def cmd_derive_ndsm(args) -> int:
    import numpy as np

    from .ndsm import (
        crop_tiles,
        derive_ndsm,
        filter_noise,
        grid_from_bounds,
        rasterize_dsm,
        rasterize_dtm,
        rasterize_labels,
        read_points,
        write_raster,
    )
    from .tensor.io import write_fbt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud = read_points(args.points)
    cloud = filter_noise(cloud, k=args.filter_k, sigma=args.filter_sigma)
    spec = grid_from_bounds(cloud.bounds, cell_size=args.cell_size)
    dsm = rasterize_dsm(cloud, spec)
    dtm = rasterize_dtm(cloud, spec, ground_class=args.ground_class)
    ndsm = derive_ndsm(dsm, dtm)
    labels = rasterize_labels(cloud, spec)
    for name, raster in (("dsm", dsm), ("dtm", dtm), ("ndsm", ndsm), ("labels", labels)):
        write_raster(out / f"{name}.fbt", raster)

    info = {"out": str(out), "rows": spec.rows, "cols": spec.cols, "points": len(cloud)}
    if args.tile:
        stride = args.stride or args.tile
        tiles = crop_tiles({"height": ndsm, "labels": labels}, args.tile, stride)
        tile_dir = out / "tiles"
        tile_dir.mkdir(exist_ok=True)
        for t in tiles:
            stem = f"r{t['row']:05d}_c{t['col']:05d}"
            write_fbt(tile_dir / f"{stem}.height.fbt", np.asarray(t["height"], np.float64))
            write_fbt(tile_dir / f"{stem}.labels.fbt", np.asarray(t["labels"], np.float64))
        info["tiles"] = len(tiles)
    print(json.dumps(info))
    return 0


def cmd_stats(args) -> int:
    from .datagen import load_tiles
    from .stats import dump_report, spatial_mean_map, stats_report, write_pgm

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tiles = load_tiles(args.data)
    report = stats_report(tiles, bin_width=args.bin_width)
    (out / "stats.json").write_text(dump_report(report))
    if args.pgm:
        write_pgm(out / "spatial_mean.pgm", spatial_mean_map(tiles))
    print(json.dumps({"out": str(out), "tiles": len(tiles)}))
    return 0


def cmd_train(args) -> int:
    from .harness import parse_config, train

    config = parse_config(args.config)
    result = train(config, out_dir=Path(args.out) if args.out else None)
    print(
        json.dumps(
            {
                "checkpoint": str(result.checkpoint),
                "best_val_miou": result.best_val_miou,
                "best_epoch": result.best_epoch,
            }
        )
    )
    return 0


def cmd_evaluate(args) -> int:
    from .harness import evaluate
    from .metrics import CSV_HEADER, ConfusionMatrix, report_csv_rows

    rep = evaluate(args.checkpoint, args.data, split=args.split)
    if args.out:
        import csv as csv_mod

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(rep, indent=1, sort_keys=True))
        cm = ConfusionMatrix(rep["confusion"])
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv_mod.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            writer.writerows(report_csv_rows(cm))
    print(json.dumps({"split": rep["split"], "miou": rep["miou"], "macc": rep["macc"]}))
    return 0


def cmd_run_matrix(args) -> int:
    from .harness import run_matrix, parse_config, seed_means

    config = parse_config(args.config)
    table = run_matrix(config, out_dir=Path(args.out) if args.out else None)
    print(json.dumps({"out": args.out or config.matrix.out, "seed_means": seed_means(table)}))
    return 0


def cmd_report(args) -> int:
    if not args.matrix and not args.data:
        from .errors import ConfigInvalid

        raise ConfigInvalid("report needs --matrix and/or --data")
    from .harness.report import render_matrix_report, render_stats_report

    written = []
    if args.matrix:
        table = json.loads(Path(args.matrix).read_text())
        written += render_matrix_report(table, args.out)
    if args.data:
        from .datagen import load_tiles
        from .stats import dump_report, spatial_mean_map, stats_report

        tiles = load_tiles(args.data)
        report = stats_report(tiles, bin_width=args.bin_width)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(dump_report(report))
        written.append(out / "stats.json")
        written += render_stats_report(report, spatial_mean_map(tiles), args.out)
    print(json.dumps({"written": [str(p) for p in written]}))
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "derive-ndsm": cmd_derive_ndsm,
    "stats": cmd_stats,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "run-matrix": cmd_run_matrix,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    from .errors import ToolkitError

    try:
        return _HANDLERS[args.command](args)
    except ToolkitError as exc:
        sys.stderr.write(json.dumps(exc.payload()) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
