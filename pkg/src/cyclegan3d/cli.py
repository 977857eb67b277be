"""``cyclegan3d`` command line: synth, train, translate, evaluate, stats, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import config as C
from .checkpoint import CheckpointError
from .gradcheck import run_suite
from .metrics import MetricError, evaluate_translation, write_report
from .stats import ScoreTable, StatsError, lcc, mos, scenario_tests, srocc
from .trainer import NonFiniteLossError, UnpairedDataset, fit, model_from_checkpoint, translate
from .voldata import (Volume, VolumeError, detect_format, list_volumes, load_volume, make_phantom_dataset,
                      save_volume)

log = logging.getLogger("cyclegan3d")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
RUNTIME_ERRORS = (VolumeError, CheckpointError, NonFiniteLossError, MetricError, StatsError, OSError, ValueError)


class UsageError(Exception):
    pass


def _shape(text):
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 9x64x64, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"shape needs three positive extents (d x h x w), got {text!r}")
    return parts


def _dims(text):
    try:
        dims = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be comma-separated integers, got {text!r}") from None
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError("dims must be positive")
    return dims


# ------------------------------------------------------------------ synth

def cmd_synth(args):
    manifest = make_phantom_dataset(args.out, args.n, args.shape, args.seed, args.format, args.n_eval)
    print(f"wrote {len(manifest.oct)} oct and {len(manifest.confocal)} confocal volumes to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ train

def _load_domain(directory, fmt, modality, pointer):
    if not os.path.isdir(directory):
        raise C.ConfigError(pointer, f"{directory} is not a directory")
    fmt = None if fmt == "auto" else fmt
    vols = [load_volume(p, fmt) for p in list_volumes(directory, fmt)]
    if not vols:
        raise C.ConfigError(pointer, f"no volumes found in {directory}")
    wrong = [v.name for v in vols if v.modality != modality]
    if wrong:
        raise VolumeError(f"{directory}: expected {modality} volumes, found {wrong[0]} of another modality")
    return vols


def cmd_train(args):
    doc = C.read_config(args.config) if args.config else {}
    overrides = {"/train/epochs": args.epochs, "/seed": args.seed, "/out_dir": args.out_dir,
                 "/train/workers": args.workers}
    for pointer, value in overrides.items():
        if value is not None:
            C.set_pointer(doc, pointer, value)
    resolved = C.resolve(doc)
    cfg = C.train_config(resolved)
    d = resolved["data"]
    dataset = UnpairedDataset(_load_domain(d["oct_dir"], d["format"], "oct", "/data/oct_dir"),
                              _load_domain(d["confocal_dir"], d["format"], "confocal", "/data/confocal_dir"))
    eval_data = None
    if d["eval_oct_dir"]:
        eval_data = (_load_domain(d["eval_oct_dir"], d["format"], "oct", "/data/eval_oct_dir"),
                     _load_domain(d["eval_confocal_dir"], d["format"], "confocal", "/data/eval_confocal_dir"))
    out = resolved["out_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")

    def progress(rec):
        if rec["iteration"] % max(1, dataset.steps_per_epoch) == 0:
            log.info("epoch %d lr %.3g total %.4f", rec["epoch"], rec["lr"], rec["total"])

    result = fit(dataset, cfg, out_dir=out, resume=args.resume, eval_data=eval_data, stop_after=args.stop_after,
                 progress=progress)
    msg = f"trained to epoch {result.checkpoint.epoch}; outputs in {out}"
    if result.best_epoch is not None:
        msg += f"; best FID768 {result.best_fid:.6g} at epoch {result.best_epoch}"
    print(msg)
    return EXIT_OK


# -------------------------------------------------------------- translate

DIRECTIONS = {"oct2confocal": ("G", "oct", "confocal", 1), "confocal2oct": ("F", "confocal", "oct", 3)}


def cmd_translate(args):
    net_name, src, dst, channels = DIRECTIONS[args.direction]
    paths = list_volumes(args.input) if os.path.isdir(args.input) and not os.path.exists(
        os.path.join(args.input, "volume.json")) else [args.input]
    if not paths:
        raise VolumeError(f"{args.input}: no volumes found")
    model = model_from_checkpoint(args.checkpoint)
    net = model.net(net_name)
    os.makedirs(args.out, exist_ok=True)
    for p in paths:
        vol = load_volume(p)
        if vol.modality != src or vol.channels != channels:
            raise VolumeError(f"{p}: {args.direction} needs a {channels}-channel {src} volume, "
                              f"got {vol.channels}-channel {vol.modality}")
        fmt = detect_format(p)
        n = model.cfg.depth_slices if vol.shape[0] >= model.cfg.depth_slices else None
        y = translate(net, vol, n)[0]
        out_vol = Volume(y.astype("float32"), dst, vol.name, vol.bit_depth)
        save_volume(os.path.join(args.out, os.path.basename(os.path.normpath(p))), out_vol, fmt)
    print(f"translated {len(paths)} volume(s) {args.direction} into {args.out}")
    return EXIT_OK


# --------------------------------------------------------------- evaluate

def cmd_evaluate(args):
    if args.embedder == "external" and not args.feature_csv:
        raise UsageError("--embedder external needs --feature-csv")
    report = evaluate_translation(args.real, args.generated, args.embedder, args.dims, args.seed,
                                  args.feature_csv, args.method, args.scenario)
    if args.out:
        write_report(args.out, [report])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(report.header())
    w.writerow(report.row())
    return EXIT_OK


# ------------------------------------------------------------------ stats

STATS_HEADER = ["kind", "scenario", "subject", "value", "p_raw", "p_adjusted"]


def _read_metrics(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if not reader.fieldnames or reader.fieldnames[:2] != ["method", "scenario"]:
            raise StatsError(f"{path}: header must start with method,scenario")
        rows = list(reader)
    cols = reader.fieldnames[2:]
    if not cols:
        raise StatsError(f"{path}: no metric columns")
    return cols, rows


def stats_rows(table, metrics=None):
    """All stats-CSV rows for a score table and optional metrics table."""
    rows = []
    by_group = mos(table)
    by_method = mos(table, ("method",))
    for (method, scenario), value in by_group.items():
        rows.append(["mos", scenario, method, value, "", ""])
    for scenario in table.scenarios():
        (h, p), pairwise = scenario_tests(table, scenario)
        rows.append(["kruskal_wallis", scenario, "H", h, p, ""])
        for a, b, u, praw, padj in pairwise:
            rows.append(["mann_whitney", scenario, f"{a} vs {b}", u, praw, padj])
    if metrics is not None:
        cols, mrows = metrics
        for col in cols:
            xs, ys = [], []
            for r in mrows:
                key = (r["method"], r["scenario"])
                ref = by_group.get(key) if r["scenario"] else by_method.get((r["method"],))
                if ref is None or r[col] in ("", None):
                    continue
                xs.append(float(r[col]))
                ys.append(ref)
            rows.append(["srocc", "all", col, srocc(xs, ys), "", ""])
            rows.append(["lcc", "all", col, lcc(xs, ys), "", ""])
    return rows


def cmd_stats(args):
    table = ScoreTable.read_csv(args.scores)
    metrics = _read_metrics(args.metrics) if args.metrics else None
    rows = stats_rows(table, metrics)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for r in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in r])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# -------------------------------------------------------------- gradcheck

def cmd_gradcheck(args):
    results = run_suite(args.precision, args.inject_fault)
    print(f"{'op':20s} {'kind':10s} {'max_rel_error':>14s} {'tolerance':>10s} status")
    for r in results:
        print(f"{r.name:20s} {r.kind:10s} {r.error:14.3e} {r.tolerance:10.0e} {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="cyclegan3d", description="3D CycleGAN for unpaired OCT to confocal translation.")
    p.add_argument("--workers", type=int, default=None, help="BLAS threads (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=20, help="volumes per domain")
    s.add_argument("--shape", type=_shape, default=(9, 64, 64), help="d x h x w, e.g. 9x64x64")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=["vvf", "png_stack"], default="vvf")
    s.add_argument("--n-eval", type=int, default=0, help="held-out volumes per domain")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a JSON run config")
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir")
    s.add_argument("--resume", help="checkpoint written at the end of an epoch")
    s.add_argument("--stop-after", type=int, metavar="EPOCH",
                   help="stop once this many epochs are complete (the schedule still spans all epochs)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="apply a trained generator")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="a volume or a directory of volumes")
    s.add_argument("--out", required=True)
    s.add_argument("--direction", choices=sorted(DIRECTIONS), default="oct2confocal")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="FID and KID between two volume directories")
    s.add_argument("--real", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--dims", type=_dims, default=[768, 2048])
    s.add_argument("--embedder", choices=["random_projection", "external"], default="random_projection")
    s.add_argument("--feature-csv")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--method", default="")
    s.add_argument("--scenario", default="")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stats", help="MOS, correlations and rank tests from a score CSV")
    s.add_argument("--scores", required=True)
    s.add_argument("--metrics")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    s.add_argument("--precision", choices=["double", "single"], default="double")
    s.add_argument("--inject-fault", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        with threadpool_limits(args.workers or 1):
            return args.func(args)
    except (C.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
