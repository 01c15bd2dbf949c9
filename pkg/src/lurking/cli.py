"""Command line: simulate data, fit, re-derive effects and run benchmark suites.

Exit codes: 0 success, 1 usage or I/O error, 2 fit did not converge (the
bundle is still written), 3 benchmark finished with failed cells.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from .effects import default_t_grid, gradual_effect, prediction_curve, sudden_series
from .estimator import Dataset, FitConfig, FitResult, Hyperparameters, fit, rebuild
from .kernel import KernelSpec
from .simgen import (
    ROW_FIELDS,
    SUITES,
    DegradationSpec,
    ToySpec,
    benchmark,
    gen_degradation_study,
    gen_toy,
)
from .sparse import ChangeCoefficients, CVCurve

log = logging.getLogger("lurking")

FORMAT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_BENCH_FAILED = 0, 1, 2, 3


class UsageError(Exception):
    """Bad input that should end the process with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _num(v: float) -> str:
    return repr(float(v))


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _unjson_float(v, missing=math.inf):
    return missing if v is None else float(v)


# data files

def read_data(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a ``x1..xp, t, y`` CSV into raw arrays, naming the offending cell on error."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise UsageError(f"{path}: file is empty") from None
        if "t" not in header or "y" not in header:
            raise UsageError(f"{path}: header must contain columns 't' and 'y', got {header}")
        inputs = [h for h in header if h not in ("t", "y")]
        expected = [f"x{k}" for k in range(1, len(inputs) + 1)]
        if inputs != expected:
            raise UsageError(f"{path}: input columns must be named {expected}, got {inputs}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise UsageError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise UsageError(
                        f"{path}: row {lineno}, column '{name}': {cell!r} is not a number") from None
                if not math.isfinite(v):
                    raise UsageError(f"{path}: row {lineno}, column '{name}': missing or non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise UsageError(f"{path}: no data rows")
    table = np.array(rows)
    cols = {h: table[:, i] for i, h in enumerate(header)}
    X = np.column_stack([cols[h] for h in inputs]) if inputs else np.zeros((len(rows), 0))
    return X, cols["t"], cols["y"]


def write_data(path, dataset: Dataset, t_raw) -> None:
    X = dataset.raw_x(dataset.X) if dataset.p else dataset.X
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(1, dataset.p + 1)] + ["t", "y"])
        for i in range(dataset.n):
            w.writerow([_num(v) for v in X[i]] + [_num(t_raw[i]), _num(dataset.y[i])])


# config files

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(FitConfig) if f.name != "folds"}


def _parse_value(key, text):
    default = getattr(FitConfig(), key)
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in re.split(r"[,\s]+", text.strip("()[] ")) if p]
            if len(parts) != 2:
                raise ValueError
            return tuple(float(p) for p in parts)
        return text
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {text!r}") from None


def read_config(path) -> dict:
    """Flat ``key = value`` file mirroring :class:`FitConfig` fields; ``#`` starts a comment."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"{path}: line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def _make_config(args) -> FitConfig:
    values = read_config(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return FitConfig(**values)
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _config_to_dict(config: FitConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(config).items() if k != "folds"}


# result bundle

def fit_to_dict(result: FitResult) -> dict:
    h, ds = result.hyper, result.dataset
    curve = result.cv_curve
    return {
        "format_version": FORMAT_VERSION,
        "converged": result.converged,
        "stop_reason": result.stop_reason,
        "n_outer": result.n_outer,
        "hyperparameters": {
            "mu": h.mu, "tau2": h.tau2, "nu": _json_float(h.nu), "sigma2": h.sigma2,
            "theta_x": h.theta.theta_x.tolist(), "theta_t": h.theta.theta_t,
            "eta": h.eta, "lambda": _json_float(h.lam),
        },
        "coefficients": {"mu": result.coeffs.mu, "e_tail": result.coeffs.e_tail.tolist()},
        "lambda_path": None if curve is None else {
            "lambda_max": curve.lambda_max,
            "selected_index": int(curve.index),
            "lambdas": curve.lambdas.tolist(),
            "cv_mean_error": curve.mean_error.tolist(),
            "cv_se_error": curve.se_error.tolist(),
        },
        "trace": list(result.trace),
        "cv_trace": list(result.cv_trace),
        "config": _config_to_dict(result.config),
        "data": {
            "X": ds.X.tolist(), "t": ds.t.tolist(), "y": ds.y.tolist(),
            "x_range": ds.x_range.tolist(), "t_range": list(ds.t_range),
        },
    }


def fit_from_dict(d: dict) -> FitResult:
    if d.get("format_version") != FORMAT_VERSION:
        raise UsageError(f"unsupported fit.json format_version {d.get('format_version')!r}")
    data = d["data"]
    p = len(data["x_range"])
    X = np.array(data["X"], dtype=float).reshape(len(data["y"]), p)
    ds = Dataset(X, np.array(data["t"]), np.array(data["y"]), np.array(data["x_range"]),
                 tuple(data["t_range"]))
    h = d["hyperparameters"]
    kernel = KernelSpec(np.array(h["theta_x"], dtype=float), h["theta_t"])
    hyper = Hyperparameters(h["mu"], h["tau2"], _unjson_float(h["nu"]), h["sigma2"], kernel,
                            h["eta"], _unjson_float(h["lambda"]))
    c = d["coefficients"]
    coeffs = ChangeCoefficients(c["mu"], np.array(c["e_tail"], dtype=float))
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in d["config"].items()}
    path = d.get("lambda_path")
    curve = None if path is None else CVCurve(
        np.array(path["lambdas"], dtype=float), np.array(path["cv_mean_error"], dtype=float),
        np.array(path["cv_se_error"], dtype=float), path["lambda_max"], path["selected_index"])
    return rebuild(ds, hyper, coeffs, d["converged"], tuple(d["trace"]), d["n_outer"],
                   FitConfig(**cfg), curve, d.get("stop_reason", ""), tuple(d.get("cv_trace", ())))


def _prediction_grid(p: int, size: int = 200) -> np.ndarray:
    if p == 0:
        return np.zeros((1, 0))
    per = max(2, int(round(size ** (1.0 / p))))
    axes = np.meshgrid(*[np.linspace(0.0, 1.0, per)] * p, indexing="ij")
    return np.column_stack([a.ravel() for a in axes])


def write_effects(result: FitResult, out: Path, t_fixed: float = 0.5) -> None:
    ds = result.dataset
    delta, points = sudden_series(result)
    jumps = np.r_[0.0, result.coeffs.e_tail]
    t_raw = ds.raw_t(ds.t[result.time_order])
    with open(out / "sudden.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "time", "delta", "jump"])
        for i in range(ds.n):
            w.writerow([i + 1, _num(t_raw[i]), _num(delta[i]), _num(jumps[i])])
    t_grid = default_t_grid()
    g = gradual_effect(result, t_grid)
    with open(out / "gradual.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "g"])
        for tv, gv in zip(ds.raw_t(t_grid), g):
            w.writerow([_num(tv), _num(gv)])
    grid = _prediction_grid(ds.p)
    mean, sd = prediction_curve(result, grid, t_fixed)
    raw = ds.raw_x(grid) if ds.p else grid
    with open(out / "prediction.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(1, ds.p + 1)] + ["mean", "sd"])
        for i in range(grid.shape[0]):
            w.writerow([_num(v) for v in raw[i]] + [_num(mean[i]), _num(sd[i])])
    log.info("%d change points reported", len(points))


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


# commands

def cmd_simulate(args) -> int:
    if args.suite == "toy":
        spec = ToySpec(replicates=args.replicates, randomize=args.randomize, seed=args.seed)
        dataset, truth = gen_toy(spec)
    else:
        if args.randomize is False:
            raise UsageError("--no-randomize applies to the toy suite only")
        spec = DegradationSpec(replicates=args.replicates, seed=args.seed)
        dataset, truth = gen_degradation_study(spec)
    out = _out_dir(args.out)
    # times are written as run indices 1..n
    write_data(out / "data.csv", dataset, np.arange(1, dataset.n + 1, dtype=float))
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth.to_dict(), fh, indent=1)
        fh.write("\n")
    print(f"wrote {dataset.n} rows to {out / 'data.csv'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    config = _make_config(args)
    X, t, y = read_data(args.data)
    try:
        dataset = Dataset.from_raw(X, t, y)
    except ValueError as exc:
        raise UsageError(f"{args.data}: {exc}") from exc
    if dataset.n < 10:
        raise UsageError(f"{args.data}: need at least 10 rows, got {dataset.n}")
    out = _out_dir(args.out)
    try:
        result = fit(dataset, config)
    except ValueError as exc:  # e.g. more folds than rows
        raise UsageError(f"{args.data}: {exc}") from exc
    payload = fit_to_dict(result)
    with open(out / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    # derive the effect files from the stored estimates so `effects` reproduces them exactly
    write_effects(fit_from_dict(payload), out, args.t_fixed)
    h = result.hyper
    print(f"converged={result.converged} ({result.stop_reason}) after {result.n_outer} iterations")
    print(f"theta={h.theta.theta.tolist()} eta={h.eta:.6g} tau2={h.tau2:.6g} lambda={h.lam:.6g}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_effects(args) -> int:
    try:
        payload = json.loads(Path(args.fit).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read {args.fit}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.fit}: invalid JSON ({exc})") from exc
    try:
        result = fit_from_dict(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.fit}: malformed fit file ({exc})") from exc
    write_effects(result, _out_dir(args.out), args.t_fixed)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    config = _make_config(args)
    res = benchmark(args.suite, args.repeats, args.seed if args.seed is not None else 0,
                    config, workers=args.workers)
    out = _out_dir(args.out)
    with open(out / "mse.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(ROW_FIELDS), lineterminator="\n")
        w.writeheader()
        for row in res.rows:
            w.writerow({k: (_num(v) if isinstance(v, float) else v) for k, v in row.items()})
    for label, entry in res.summary.items():
        cells = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in entry.items())
        print(f"{args.suite} {label}: {cells}")
    return EXIT_BENCH_FAILED if res.n_failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="lurking", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="generate a toy or degradation dataset")
    p.add_argument("--suite", choices=("toy", "degradation"), default="toy")
    p.add_argument("--replicates", type=int, default=2)
    p.add_argument("--randomize", action=argparse.BooleanOptionalAction, default=None,
                   help="shuffle the run order (toy default: on)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit a data file and write the result bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key=value file with FitConfig fields")
    p.add_argument("--t-fixed", type=float, default=0.5,
                   help="scaled time of the prediction.csv slice (default 0.5)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("effects", parents=[common], help="re-derive effect files from fit.json")
    p.add_argument("--fit", required=True)
    p.add_argument("--t-fixed", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_effects)

    p = sub.add_parser("benchmark", parents=[common], help="run a simulation study")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--config", help="key=value file with FitConfig fields")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "command", None) == "simulate":
        if args.replicates < 1:
            parser.error("--replicates must be positive")
        if args.randomize is None:
            args.randomize = True if args.suite == "toy" else None
        if args.seed is None:
            args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lurking: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
