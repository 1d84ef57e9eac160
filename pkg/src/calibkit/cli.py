"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from calibkit.calibrate import (CARING_DEFAULTS, TEMPERATURE_DEFAULTS, FitConfig, Identity,
                                NumericError, fit_caring, fit_temperature, load_model, save_model)
from calibkit.dataset import DataError, format_float, load_sampleset
from calibkit.metrics import CalibrationReport, full_report
from calibkit.report import (render_class_table, render_histogram_from_report,
                             render_reliability_svg)
from calibkit.synth import SynthConfig, write_splits

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="calibkit", description="Post-hoc confidence calibration toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic val/test pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-val", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--clusters", type=int, default=1)
    p.add_argument("--sharpness", type=_float_list, default=[3.0])
    p.add_argument("--margin", type=_float_list, default=[2.0])
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--feature-noise", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("metrics", help="compute ECE, Brier, NLL and accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-temp", help="fit a global temperature")
    p.add_argument("--val", required=True)
    p.add_argument("--lr", type=float, default=TEMPERATURE_DEFAULTS.lr)
    p.add_argument("--epochs", type=int, default=TEMPERATURE_DEFAULTS.epochs)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")

    p = sub.add_parser("fit-caring", help="fit the input-conditioned temperature network")
    p.add_argument("--val", required=True)
    p.add_argument("--hidden", type=int, default=CARING_DEFAULTS.hidden)
    p.add_argument("--lr", type=float, default=CARING_DEFAULTS.lr)
    p.add_argument("--wd", type=float, default=CARING_DEFAULTS.weight_decay)
    p.add_argument("--epochs", type=int, default=CARING_DEFAULTS.epochs)
    p.add_argument("--batch", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")

    p = sub.add_parser("apply", help="write calibrated probabilities")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render diagrams and tables from a metrics file")
    p.add_argument("--metrics", required=True)
    p.add_argument("--reliability", required=True)
    p.add_argument("--histogram")
    p.add_argument("--classes")
    return parser


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _fit_config(**kwargs) -> FitConfig:
    try:
        return FitConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _cmd_synth(args) -> None:
    try:
        cfg = SynthConfig(n_val=args.n_val, n_test=args.n_test, m=args.classes, clusters=args.clusters,
                          sharpness=args.sharpness, margin=args.margin, feature_dim=args.feature_dim,
                          feature_noise=args.feature_noise, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_splits(cfg, args.out)


def _cmd_metrics(args) -> None:
    if args.bins < 1:
        raise UsageError("--bins must be >= 1")
    samples = load_sampleset(args.data)
    model = load_model(args.model) if args.model else Identity()
    report = full_report(samples, model, args.bins)
    _write(args.out, json.dumps(report.to_dict(), indent=2) + "\n")


def _cmd_fit_temp(args) -> None:
    cfg = _fit_config(lr=args.lr, epochs=args.epochs)
    model, trace = fit_temperature(load_sampleset(args.val), cfg)
    save_model(model, args.out)
    if args.trace:
        _write(args.trace, trace.to_csv())


def _cmd_fit_caring(args) -> None:
    cfg = _fit_config(lr=args.lr, epochs=args.epochs, weight_decay=args.wd, hidden=args.hidden,
                      seed=args.seed, batch_size=args.batch)
    samples = load_sampleset(args.val)
    if samples.features is None:
        raise DataError("features required")
    model, trace = fit_caring(samples, cfg)
    save_model(model, args.out)
    if args.trace:
        _write(args.trace, trace.to_csv())


def _cmd_apply(args) -> None:
    samples = load_sampleset(args.data)
    model = load_model(args.model)
    if model.requires_features and samples.features is None:
        raise DataError("features required")
    temps = model.temperatures(samples.logits, samples.features)
    probs = model.probs(samples.logits, samples.features)
    names = samples.class_names or [f"p_{j}" for j in range(samples.n_classes)]
    lines = [",".join(list(names) + ["T"])]
    for row, t in zip(probs, temps):
        lines.append(",".join([format_float(x) for x in row] + [format_float(t)]))
    _write(args.out, "\n".join(lines) + "\n")


def _cmd_report(args) -> None:
    path = Path(args.metrics)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        report = CalibrationReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path.name}: not a metrics report ({exc})") from None
    _write(args.reliability, render_reliability_svg(report))
    if args.histogram:
        _write(args.histogram, render_histogram_from_report(report))
    if args.classes:
        _write(args.classes, render_class_table(report))


COMMANDS = {
    "synth": _cmd_synth,
    "metrics": _cmd_metrics,
    "fit-temp": _cmd_fit_temp,
    "fit-caring": _cmd_fit_caring,
    "apply": _cmd_apply,
    "report": _cmd_report,
}


def run(argv=None) -> int:
    """Run one subcommand and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
        with np.errstate(over="raise", invalid="raise"):
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"calibkit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"calibkit: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
