"""Command-line entry points.

Verbs: ``run`` executes a full experiment, ``synth`` emits spectral images,
``calibrate`` fits a calibrator on a score CSV, ``eval`` computes metrics
on a score CSV, and ``report`` re-renders figures from stored per-seed
rows. Exit codes: 0 success, 1 configuration error, 2 data error,
3 numerical failure. ``CALAD_OUT_DIR`` supplies the default output
directory; no other environment variable is consulted.
"""

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, reports
from .calibration import (OptimizerConfig, ece, fit_beta, fit_platt,
                          fitting_digest, mce, reliability, save_calibrator)
from .errors import CaladError, DataError
from .losses import sigmoid
from .metrics import auroc
from .spectral import SpectralConfig, synthesize_batch
from .tensorio import save_tensor, write_ppm


def _default_out() -> str:
    return os.environ.get("CALAD_OUT_DIR", "runs")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calad",
                                     description="post-hoc calibrated anomaly "
                                                 "detection experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run a full experiment")
    run.add_argument("--config", help="JSON config file; flags may not conflict")
    run.add_argument("--normal", help="normal data: CSV path or builtin:<name>")
    run.add_argument("--oe-dir", dest="oe_dir", help="outlier-exposure directory")
    run.add_argument("--masks-dir", dest="masks_dir", help="mask directory")
    run.add_argument("--loss", choices=["svdd", "hsc", "logistic", "ssim", "fcdd"])
    run.add_argument("--calibrator", choices=["none", "platt", "beta", "head"])
    run.add_argument("--anomaly-source", dest="anomaly_source",
                     choices=["oe", "spectral"])
    run.add_argument("--split-ratio", dest="split_ratio", type=float)
    run.add_argument("--seeds", type=lambda s: tuple(int(v) for v in s.split(",")))
    run.add_argument("--epsilon", type=float)
    run.add_argument("--bins", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--learning-rate", dest="learning_rate", type=float)
    run.add_argument("--batch-size", dest="batch_size", type=int)
    run.add_argument("--out", dest="out_dir")

    synth = sub.add_parser("synth", help="emit spectrally synthesized images")
    synth.add_argument("--count", type=int, default=8)
    synth.add_argument("--height", type=int, default=64)
    synth.add_argument("--width", type=int, default=64)
    synth.add_argument("--channels", type=int, default=1)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", dest="out_dir", default=None)

    cal = sub.add_parser("calibrate", help="fit a calibrator on a score CSV")
    cal.add_argument("scores", help="CSV with columns score,label")
    cal.add_argument("--kind", choices=["platt", "beta"], default="platt")
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--out", dest="out_dir", default=None)

    ev = sub.add_parser("eval", help="metrics on a score CSV")
    ev.add_argument("scores", help="CSV with columns score,label")
    ev.add_argument("--bins", type=int, default=15)
    ev.add_argument("--probabilities", action="store_true",
                    help="scores are probability estimates already")

    rep = sub.add_parser("report", help="re-render figures from per-seed rows")
    rep.add_argument("rows", help="per_seed.csv from an earlier run")
    rep.add_argument("--out", dest="out_dir", default=None)
    return parser


def _read_score_csv(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [(float(r[0]), int(float(r[1]))) for r in reader if r]
    except (OSError, ValueError, IndexError, StopIteration) as exc:
        raise DataError(f"cannot read score CSV {path}: {exc}") from exc
    if {h.strip() for h in header[:2]} != {"score", "label"}:
        raise DataError(f"{path}: expected a score,label header")
    if not rows:
        raise DataError(f"{path}: no score rows")
    scores = np.array([r[0] for r in rows])
    labels = np.array([r[1] for r in rows])
    return scores, labels


def _cmd_run(args) -> int:
    cli_fields = {key: getattr(args, key) for key in harness._CONFIG_FIELDS
                  if hasattr(args, key)}
    file_fields = harness.load_config_file(args.config) if args.config else {}
    if cli_fields.get("out_dir") is None and "out_dir" not in file_fields:
        cli_fields["out_dir"] = _default_out()
    cfg = harness.merge_config(cli_fields, file_fields)
    result = harness.run_experiment(cfg)
    print(f"wrote {result.out_dir / 'summary.csv'}")
    for row in result.summary_rows:
        print(f"  {row['method']}: AUROC {row['auroc']:.4f} -> "
              f"{row['auroc_perturbed']:.4f} (perturbed), "
              f"ECE {row['ece']:.4f}, MCE {row['mce']:.4f}")
    return 0


def _cmd_synth(args) -> int:
    out = Path(args.out_dir or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    cfg = SpectralConfig(args.height, args.width, args.channels, seed=args.seed)
    images, metas = synthesize_batch(cfg, args.count)
    for i, (img, meta) in enumerate(zip(images, metas)):
        save_tensor(out / f"spectral_{i:04d}.calt", img)
        write_ppm(out / f"spectral_{i:04d}.ppm",
                  img if img.shape[0] in (1, 3) else img[:1])
        exps = ", ".join(f"a={a:.3f} b={b:.3f}" for a, b in meta["exponents"])
        print(f"spectral_{i:04d}: {exps}")
    return 0


def _cmd_calibrate(args) -> int:
    scores, labels = _read_score_csv(args.scores)
    opt = OptimizerConfig(seed=args.seed)
    if args.kind == "platt":
        params = fit_platt(scores, labels, opt)
    else:
        params = fit_beta(sigmoid(scores), labels, opt)
    out = Path(args.out_dir or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"calibrator_{args.kind}.txt"
    save_calibrator(path, params, args.seed, fitting_digest(scores, labels))
    print(f"wrote {path}")
    return 0


def _cmd_eval(args) -> int:
    scores, labels = _read_score_csv(args.scores)
    estimates = scores if args.probabilities else sigmoid(scores)
    hist = reliability(estimates, labels, args.bins)
    print(f"auroc {auroc(scores, labels)!r}")
    print(f"ece {ece(hist)!r}")
    print(f"mce {mce(hist)!r}")
    return 0


def _cmd_report(args) -> int:
    try:
        with open(args.rows, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read rows from {args.rows}: {exc}") from exc
    if not rows:
        raise DataError(f"{args.rows}: no rows")
    out = Path(args.out_dir or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    methods = {}
    for row in rows:
        methods.setdefault(row["method"], []).append(row)
    summary = []
    for method, group in methods.items():
        agg = {"class_id": group[0]["class_id"], "method": method}
        for key in group[0]:
            if key in ("seed", "class_id", "method"):
                continue
            agg[key] = float(np.mean([float(r[key]) for r in group]))
        summary.append(agg)
    localization = "aupro" in rows[0]
    reports.write_rows_csv(out / "summary.csv", summary, localization)
    print(f"wrote {out / 'summary.csv'}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "synth": _cmd_synth, "calibrate": _cmd_calibrate,
                "eval": _cmd_eval, "report": _cmd_report}
    try:
        return handlers[args.verb](args)
    except CaladError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - last-resort diagnostics
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
