"""Command-line entry point.

Subcommands: ``fit``, ``predict``, ``bench``, ``adapt`` and ``calibrate``.
Exit status is 0 on success, 1 for usage errors, 2 for data errors and 3
for numerical failures.  ``MUFIGP_LOG`` sets the log level (error, warn,
info, debug).
"""

from __future__ import annotations

import argparse
import csv
import importlib
import io
import json
import logging
import os
import sys

import numpy as np

from .exceptions import (ConditioningError, ConfigurationError, DataError, DivergenceError,
                         DomainError, FitError, NestingError, OracleError, ShapeError, StateError)

log = logging.getLogger("mufigp.cli")

FIT_METHODS = ("gp", "ar1", "nargp", "gpdf", "gpdfc", "nardgp", "dgpdf", "dgpdfc")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
           "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def configure_logging():
    level = _LEVELS.get(os.environ.get("MUFIGP_LOG", "warn").lower(), logging.WARNING)
    root = logging.getLogger("mufigp")
    root.setLevel(level)
    if not root.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(h)
    logging.captureWarnings(True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mufigp", description="Multi-fidelity Gaussian-process surrogates.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    f = sub.add_parser("fit", help="fit a surrogate to a dataset manifest")
    f.add_argument("--data", required=True)
    f.add_argument("--method", required=True, choices=FIT_METHODS)
    f.add_argument("--out", required=True)
    f.add_argument("--restarts", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--steps", type=int, default=None, help="Adam steps for deep-GP methods")

    q = sub.add_parser("predict", help="predict at the points of a CSV file")
    q.add_argument("--model", required=True)
    q.add_argument("--points", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--samples", type=int, default=1000)
    q.add_argument("--level", type=int, default=None)
    q.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="run a benchmark sweep")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, required=True)

    a = sub.add_parser("adapt", help="adaptive sampling from a fitted model")
    a.add_argument("--model", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, required=True)

    c = sub.add_parser("calibrate", help="recalibrate a fitted model's uncertainty")
    c.add_argument("--model", required=True)
    c.add_argument("--calib-data", required=True, dest="calib_data")
    c.add_argument("--method", required=True, choices=("isotonic", "normal", "beta"))
    c.add_argument("--out", required=True)
    c.add_argument("--samples", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    return p


# --------------------------------------------------------------------------
# subcommands


def _fit(args):
    from .benchmarks import fit_method
    from .dataset_io import load_dataset, save_model
    data = load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    if args.restarts < 1:
        raise UsageError("--restarts must be >= 1")
    dgp = {"steps": args.steps} if args.steps is not None else {}
    cfg = _FitSettings(args.restarts, dgp)
    if args.method != "gp" and data.n_levels < 2:
        raise ConfigurationError(f"method {args.method} needs at least two fidelity levels")
    model = fit_method(args.method, data, None, cfg, rng)
    save_model(model, args.out)
    log.info("wrote %s", args.out)


class _FitSettings:
    # the subset of ExperimentConfig that fit_method reads
    def __init__(self, restarts, dgp):
        self.restarts = restarts
        self.dgp = dgp


def read_points(path) -> np.ndarray:
    from .exceptions import ParseError
    with open(path, encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("no points", path=path)
    start = 0
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        start = 1  # header
    out = []
    for i, r in enumerate(rows[start:], start=start + 1):
        try:
            out.append([float(c) for c in r])
        except ValueError:
            raise ParseError(f"non-numeric value in {r!r}", path=path, line=i) from None
    if len({len(r) for r in out}) > 1:
        raise ParseError("rows have different lengths", path=path)
    return np.asarray(out, dtype=float)


def _predict(args):
    from .calibration import QuantilePrediction
    from .dataset_io import atomic_write_text, fmt, load_model
    model = load_model(args.model)
    X = read_points(args.points)
    rng = np.random.default_rng(args.seed)
    pred = model.predict(X, level=args.level, samples=args.samples, rng=rng)
    if isinstance(pred, QuantilePrediction):
        lo, hi = pred.interval(0.95)
        mean, std = pred.mean, pred.std
    else:
        mean, std = np.asarray(pred.mean).ravel(), np.sqrt(np.asarray(pred.variance).ravel())
        half = 1.959963984540054 * std
        lo, hi = mean - half, mean + half
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i + 1}" for i in range(X.shape[1])] + ["mean", "std", "lower95", "upper95"])
    for i in range(X.shape[0]):
        w.writerow([fmt(v) for v in X[i]] + [fmt(mean[i]), fmt(std[i]), fmt(lo[i]), fmt(hi[i])])
    atomic_write_text(args.out, buf.getvalue())


def _bench(args):
    from .benchmarks import load_config, run_experiment, write_report
    cfg = load_config(args.config)
    cfg = type(cfg).from_dict({**cfg.to_dict(), "base_seed": args.seed})
    report = run_experiment(cfg)
    paths = write_report(report, args.out)
    for m, row in report.summary()["mean_mse"].items():
        print(m, " ".join(f"{p}={v:.3g}" if v is not None else f"{p}=nan" for p, v in row.items()))
    log.info("wrote %s", ", ".join(paths.values()))


def _oracles_from(doc, n_levels):
    if "problem" in doc:
        from .problems import get_problem
        P = get_problem(doc["problem"])
        if P.n_levels != n_levels:
            raise ConfigurationError(f"problem {P.name} has {P.n_levels} levels, model has {n_levels}")
        return [P.oracle(l + 1) for l in range(n_levels)]
    if "oracle" in doc:
        mod, _, name = str(doc["oracle"]).partition(":")
        try:
            fn = getattr(importlib.import_module(mod), name)
        except (ImportError, AttributeError) as exc:
            raise ConfigurationError(f"cannot import oracle {doc['oracle']!r}: {exc}") from None
        return [lambda X, l=l: fn(l + 1, X) for l in range(n_levels)]
    raise ConfigurationError("adapt config needs 'problem' or 'oracle' (module:function)")


def _adapt(args):
    from .adaptivity import AdaptConfig, adapt_loop, default_heldout, model_dataset, model_levels, write_history
    from .dataset_io import load_model, save_dataset, save_model
    model = load_model(args.model)
    with open(args.config, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            from .exceptions import ParseError
            raise ParseError(exc.msg, path=args.config, line=exc.lineno) from None
    n_levels = model_levels(model)
    oracles = _oracles_from(doc, n_levels)
    data = model_dataset(model)
    opts = {k: v for k, v in doc.items() if k not in ("problem", "oracle", "heldout_points")}
    if "level_order" in opts and opts["level_order"] is not None:
        opts["level_order"] = tuple(opts["level_order"])
    opts.setdefault("domain", data.box)
    try:
        cfg = AdaptConfig(**opts)
    except TypeError as exc:
        raise ConfigurationError(f"bad adapt config: {exc}") from None
    if doc.get("heldout_points"):
        cfg = AdaptConfig(**{**opts, "domain": cfg.domain,
                             "heldout": default_heldout(cfg.domain, oracles[-1], int(doc["heldout_points"]))})
    model, history = adapt_loop(model, oracles, cfg, np.random.default_rng(args.seed))
    os.makedirs(args.out, exist_ok=True)
    save_model(model, os.path.join(args.out, "model.json"))
    write_history(history, os.path.join(args.out, "history.csv"))
    save_dataset(model_dataset(model), os.path.join(args.out, "data.json"))
    print(f"{len(history)} acquisitions; outputs in {args.out}")


def _calibrate(args):
    from .calibration import calibrate_model
    from .dataset_io import load_dataset, load_model, save_model
    model = load_model(args.model)
    data = load_dataset(args.calib_data)
    top = data.levels[-1]
    wrapped = calibrate_model(model, top.X, top.y, args.method, rng=np.random.default_rng(args.seed),
                              samples=args.samples, predict_rng=np.random.default_rng(args.seed))
    save_model(wrapped, args.out)


_COMMANDS = {"fit": _fit, "predict": _predict, "bench": _bench, "adapt": _adapt, "calibrate": _calibrate}


def main(argv=None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigurationError, NestingError, ShapeError, DomainError, OracleError,
            StateError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConditioningError, FitError, DivergenceError, ArithmeticError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
