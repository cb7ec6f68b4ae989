"""``posekan`` command line: train, eval, predict, verify, sweep, make-synth.

Exit codes: 0 success, 1 configuration error, 2 data or I/O error,
3 numeric failure (non-finite loss/gradient, failed verification).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import verify as verify_mod
from .checkpoint import load_checkpoint
from .config import RunConfig, help_text
from .data import load_dataset, make_synthetic_task, save_dataset
from .errors import (
    BadConfigError,
    BadImageDimsError,
    CorruptChecksumError,
    JointCountMismatchError,
    MissingGroundTruthError,
    NonFiniteGradientError,
    NonFiniteInputError,
    NonFiniteLossError,
    NonFiniteValueError,
    ParseError,
    PoseKanError,
    ScalingOutOfRangeError,
    VersionMismatchError,
)
from .graph import load_skeleton
from .model import build_model
from .training import action_average, metrics_report, predict_mm, train

log = logging.getLogger("posekan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_CONFIG_ERRORS = (BadConfigError, ScalingOutOfRangeError)
_DATA_ERRORS = (
    OSError, ParseError, JointCountMismatchError, NonFiniteValueError, BadImageDimsError,
    MissingGroundTruthError, CorruptChecksumError, VersionMismatchError,
)
_NUMERIC_ERRORS = (NonFiniteLossError, NonFiniteGradientError, NonFiniteInputError, FloatingPointError)

PROTOCOLS = {"mpjpe": ("MPJPE", "mpjpe"), "pa": ("PA-MPJPE", "pa_mpjpe"), "pck": ("PCK", "pck")}

# sweep parameter name -> config key
SWEEP_KEYS = {"s": "s", "grid": "grid_size", "order": "order", "embed": "F"}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _exit_code(exc):
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, _CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, _NUMERIC_ERRORS):
        return EXIT_NUMERIC
    if isinstance(exc, _DATA_ERRORS):
        return EXIT_DATA
    if isinstance(exc, ValueError) and not isinstance(exc, PoseKanError):
        return EXIT_CONFIG  # plain argument validation, e.g. make-synth sizes
    return EXIT_DATA


# -- helpers --------------------------------------------------------------------


def _load_config(args):
    return RunConfig.load(args.config, args.set or ())


def _skeleton(cfg):
    return load_skeleton(None if cfg.skeleton in ("", "h36m16") else cfg.skeleton)


def _dataset(path, cfg, what="dataset"):
    if not path:
        raise CliError(EXIT_DATA, f"no {what} given (set {what}=<path>)")
    if not os.path.exists(path):
        raise CliError(EXIT_DATA, f"{what} not found: {path}")
    return load_dataset(path, _skeleton(cfg))


def _run_training(cfg, out_dir=None):
    train_ds = _dataset(cfg.dataset, cfg)
    val_ds = _dataset(cfg.val_dataset, cfg, "val_dataset") if cfg.val_dataset else None
    model = build_model(train_ds.skeleton, cfg.model_config())
    _, _, history = train(model, train_ds, cfg.train_config(out_dir), val_dataset=val_ds)
    return model, train_ds, history


def _read_predictions(path, n, J):
    """Predictions CSV as written by ``predict``: ``id`` then 3J values."""
    if not os.path.exists(path):
        raise CliError(EXIT_DATA, f"predictions not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    body = rows[1:] if rows and rows[0][0] == "id" else rows
    if len(body) != n:
        raise CliError(EXIT_DATA, f"{path}: {len(body)} predictions for {n} samples")
    try:
        values = np.array([[float(v) for v in r[1:]] for r in body])
    except ValueError as exc:
        raise CliError(EXIT_DATA, f"{path}: {exc}") from None
    if values.shape != (n, 3 * J):
        raise CliError(EXIT_DATA, f"{path}: expected {3 * J} values per row")
    return values.reshape(n, J, 3)


def _write_predictions(path, dataset, pred_mm):
    J = dataset.joint_count
    header = ["id"] + [f"{axis}{j}" for j in range(J) for axis in "xyz"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for sid, p in zip(dataset.ids, pred_mm):
            w.writerow([sid] + [repr(float(v)) for v in p.ravel()])


# -- subcommands ----------------------------------------------------------------


def cmd_train(args):
    cfg = _load_config(args)
    _, _, history = _run_training(cfg)
    last = [h for h in history if h["split"] == "train"][-1]
    print(f"trained {cfg.epochs} epochs; final train loss {last['loss']:.6g}; "
          f"outputs in {cfg.out_dir}")
    return EXIT_OK


def _eval_rows(report, key, protocol):
    rows = []
    for action, vals in report["per_action"].items():
        rows.append((action, vals["count"], vals[key], vals["auc"] if protocol == "pck" else None))
    count = sum(v["count"] for v in report["per_action"].values()) or None
    avg_auc = action_average(report, "auc") if protocol == "pck" else None
    rows.append(("Average", count, action_average(report, key), avg_auc))
    return rows


def cmd_eval(args):
    cfg = _load_config(args)
    dataset = _dataset(args.dataset or cfg.dataset, cfg)
    if dataset.targets is None:
        raise MissingGroundTruthError(f"{args.dataset or cfg.dataset} has no y3d ground truth")
    if args.predictions:
        pred = _read_predictions(args.predictions, len(dataset), dataset.joint_count)
    else:
        if not args.checkpoint:
            raise CliError(EXIT_CONFIG, "eval needs --checkpoint or --predictions")
        model, _ = load_checkpoint(args.checkpoint)
        pred = predict_mm(model, dataset)
    report = metrics_report(pred, dataset)
    title, key = PROTOCOLS[args.protocol]
    rows = _eval_rows(report, key, args.protocol)

    cols = ["action", "count", title] + (["AUC"] if args.protocol == "pck" else [])
    print(f"{cols[0]:<16s} {cols[1]:>6s} " + " ".join(f"{c:>10s}" for c in cols[2:]))
    for action, count, value, auc in rows:
        extra = f" {auc:10.4f}" if auc is not None else ""
        print(f"{action:<16s} {count if count is not None else '':>6} {value:10.4f}{extra}")
    if report["pa_skipped"] and args.protocol == "pa":
        print(f"# {report['pa_skipped']} degenerate samples skipped")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([cfg.echo()])
            w.writerow(cols)
            for action, count, value, auc in rows:
                w.writerow([action, count if count is not None else "", repr(float(value))]
                           + ([repr(float(auc))] if auc is not None else []))
    return EXIT_OK


def cmd_predict(args):
    cfg = _load_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _dataset(args.dataset or cfg.dataset, cfg)
    _write_predictions(args.output, dataset, predict_mm(model, dataset))
    print(f"wrote {len(dataset)} predictions to {args.output}")
    return EXIT_OK


def cmd_verify(args):
    names = list(verify_mod.SUITES) if args.suite == "all" else [args.suite]
    rows = verify_mod.run_suites(names)
    for row in rows:
        print(row)
    failed = [r for r in rows if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(f"{r.suite}/{r.name}" for r in failed))
        return EXIT_NUMERIC
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


def _dedupe(values):
    seen, out = set(), []
    for v in values:
        if v in seen:
            warnings.warn(f"duplicate sweep value {v!r} ignored", stacklevel=3)
            continue
        seen.add(v)
        out.append(v)
    return out


def _sweep_one(cfg, key, value, out_root):
    """One sweep point; returns a CSV row dict, never raises."""
    row = {"value": value, "final_loss": "", "mpjpe": "", "parameter_count": "", "status": "ok"}
    try:
        run_cfg = RunConfig.from_mapping({key: str(value)}, base=cfg).validate()
        out_dir = os.path.join(out_root, f"{key}={value}")
        model, train_ds, history = _run_training(run_cfg, out_dir)
        row["final_loss"] = repr(float([h for h in history if h["split"] == "train"][-1]["loss"]))
        row["mpjpe"] = repr(float(metrics_report(predict_mm(model, train_ds), train_ds)["mpjpe"]))
        row["parameter_count"] = model.parameter_count
    except (PoseKanError, OSError, CliError, FloatingPointError) as exc:
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def cmd_sweep(args):
    cfg = _load_config(args)
    key = SWEEP_KEYS[args.param]
    raw = [v for chunk in args.values for v in chunk.split(",") if v.strip()]
    values = _dedupe([v.strip() for v in raw])
    if not values:
        raise CliError(EXIT_CONFIG, "sweep needs at least one value")
    out_root = cfg.out_dir
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, [cfg] * len(values), [key] * len(values),
                                 values, [out_root] * len(values)))
    else:
        rows = [_sweep_one(cfg, key, v, out_root) for v in values]

    fields = ["value", "final_loss", "mpjpe", "parameter_count", "status"]
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        out.write(cfg.echo() + "\n")
        w = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_make_synth(args):
    ds = make_synthetic_task(args.joints, args.samples, args.seed, args.noise_px)
    save_dataset(ds, args.output, binary=args.binary)
    print(f"wrote {len(ds)} synthetic samples to {args.output}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="posekan",
        description="Graph-propagated KAN for 2D-to-3D human pose lifting.",
        epilog=help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.formatter_class = argparse.RawDescriptionHelpFormatter
        p.epilog = help_text()
        return p

    p = with_config(sub.add_parser("train", help="train a model"))
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint or prediction file"))
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="defaults to the config's dataset")
    p.add_argument("--predictions", help="CSV written by 'predict' (skips the model)")
    p.add_argument("--protocol", choices=sorted(PROTOCOLS), default="mpjpe")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("predict", help="dump J x 3 predictions per sample"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("suite", nargs="?", default="all", choices=[*verify_mod.SUITES, "all"])
    p.set_defaults(func=cmd_verify)

    p = with_config(sub.add_parser("sweep", help="train once per value of one parameter"))
    p.add_argument("param", choices=sorted(SWEEP_KEYS))
    p.add_argument("values", nargs="+", help="values, space or comma separated")
    p.add_argument("--jobs", type=int, default=1, help="parallel training runs")
    p.add_argument("--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-synth", help="write the synthetic lifting dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--joints", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.add_argument("--binary", action="store_true", help="PKDS binary instead of text")
    p.set_defaults(func=cmd_make_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (CliError, PoseKanError, OSError, FloatingPointError, ValueError) as exc:
        print(f"posekan {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
