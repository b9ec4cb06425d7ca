"""Command-line experiment runner.

Usage::

    python -m flexcl <experiment> [--config FILE] [--key value ...]

Experiments: train-rbm, train-ff, variance-scan, bias-scan, line-search,
bas-nll-oracle.  A config file holds flat ``key = value`` lines with ``#``
comments; every key can also be given as a flag, which wins over the file.
Each run writes ``<name>.csv`` and ``<name>.config`` into ``output_dir``
(default ``$FLEXCL_OUTPUT_DIR`` or ``./results``).  CSVs end with a
``# config-sha256: ...`` line identifying the configuration that made them.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import estimator, theory
from .data import binarize, generate_bas, load_mnist_subset
from .phases import (DIVERGED, BudgetUnit, Mode, NoViableRateError, PhaseLengthLaw,
                     ScheduleConfig, TrialRecord, learning_rate_line_search)

__all__ = ["ConfigError", "RunConfig", "parse_config", "render_config", "run", "main",
           "EXPERIMENTS", "OUTPUT_ENV"]

EXPERIMENTS = ("train-rbm", "train-ff", "variance-scan", "bias-scan", "line-search",
               "bas-nll-oracle")
OUTPUT_ENV = "FLEXCL_OUTPUT_DIR"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | str | None = None):
        self.line = line
        if isinstance(line, int):
            message = f"line {line}: {message}"
        elif line:
            message = f"{line}: {message}"
        super().__init__(message)


# value parsers -----------------------------------------------------------

def _int(s):
    return int(s.strip())


def _float(s):
    v = float(s.strip())
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean")


def _str(s):
    return s.strip()


def _list(item):
    def parse(s):
        parts = [p for p in s.replace(" ", "").split(",") if p]
        if not parts:
            raise ValueError("empty list")
        return tuple(item(p) for p in parts)
    return parse


def _choice(*options):
    def parse(s):
        t = s.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t
    parse.options = options
    return parse


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    check: object = None  # (predicate, description)
    type_name: str = ""
    help: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0.0 < v < 1.0


def _all(pred):
    return lambda vs: all(pred(v) for v in vs)


MODES = tuple(m.value for m in Mode)

KEYS = [
    Key("experiment", _choice(*EXPERIMENTS), None, type_name="choice", help="experiment to run"),
    Key("seed", _int, 0, (_nonneg, ">= 0"), "int", "master seed; never taken from the clock"),
    Key("output_dir", _str, "", None, "str", "output directory; empty means $%s or ./results" % OUTPUT_ENV),
    Key("run_name", _str, "", None, "str", "file stem; empty derives one from the config"),
    # schedule
    Key("mode", _choice(*MODES), "two-term-cdk", type_name="choice", help="training schedule"),
    Key("b", _float, 0.5, (_unit, "in (0, 1)"), "float", "positive-phase probability"),
    Key("tau", _int, None, (_pos, ">= 1"), "int",
        "phase length or mean phase length; default 100, or 150 for random T"),
    Key("k", _int, 100, (_pos, ">= 1"), "int", "steps per phase for CDK"),
    Key("eta", _float, None, (_pos, "> 0"), "float",
        "learning rate; default 0.0025 for the RBM and 0.002 for FF"),
    Key("budget", _int, None, (_pos, "> 0"), "int",
        "training budget; default 100000 for the RBM and 120000 for FF"),
    Key("budget_unit", _choice("auto", *(u.value for u in BudgetUnit)), "auto", type_name="choice",
        help="auto counts phases for the RBM and gradient steps for Forward-Forward"),
    Key("record_every", _int, None, (_pos, ">= 1"), "int", "recording interval; default 100 for the RBM, budget/100 for Forward-Forward"),
    # rbm
    Key("bas_n", _int, 4, (lambda v: 2 <= v <= 5, "in 2..5"), "int", "Bars-And-Stripes side length"),
    Key("n_hidden", _int, 16, (_pos, ">= 1"), "int", "RBM hidden units"),
    Key("init_std", _float, 0.01, (_nonneg, ">= 0"), "float", "RBM initial weight noise"),
    Key("prob_hidden_pos", _bool, True, None, "bool", "positive-phase statistics use P(h|v)"),
    Key("prob_hidden_neg", _bool, False, None, "bool", "negative-phase statistics use P(h|v)"),
    # ff
    Key("ff_hidden", _list(_int), (500, 500), (_all(_pos), "positive sizes"), "int list",
        "Forward-Forward hidden layer sizes"),
    Key("threshold", _float, 2.0, (_pos, "> 0"), "float", "goodness threshold"),
    Key("n_train", _int, 4000, (_pos, ">= 1"), "int", "MNIST training images"),
    Key("n_test", _int, 1000, (_pos, ">= 1"), "int", "MNIST evaluation images"),
    Key("mnist_dir", _str, "", None, "str", "directory with MNIST IDX files"),
    Key("binarize", _bool, False, None, "bool", "binarize MNIST pixels at 0.5"),
    # variance-scan
    Key("trace_cov_pos", _float, 0.5, (_nonneg, ">= 0"), "float", "Tr cov of the positive term"),
    Key("trace_cov_neg", _list(_float), (0.1, 0.25, 0.5, 1.0, 2.0), (_all(_nonneg), ">= 0"),
        "float list", "Tr cov of the negative term, one curve each"),
    Key("mean_sq_pos", _float, 0.0, (_nonneg, ">= 0"), "float", "squared norm of the positive mean"),
    Key("mean_sq_neg", _float, 0.0, (_nonneg, ">= 0"), "float", "squared norm of the negative mean"),
    Key("mean_dot", _float, 0.0, None, "float", "inner product of the two means"),
    Key("b_steps", _int, 19, (lambda v: v >= 2, ">= 2"), "int", "grid points in [0.05, 0.95]"),
    # bias-scan
    Key("toy", _choice("stochastic", "deterministic"), "stochastic", type_name="choice",
        help="toy dynamics"),
    Key("alpha", _float, 0.5, (lambda v: 0 < v <= 1, "in (0, 1]"), "float", "toy mixing rate"),
    Key("theta0", _float, 0.0, None, "float", "toy initial parameter"),
    Key("target", _float, 0.2, None, "float", "toy estimator offset"),
    Key("etas", _list(_float), (0.1, 0.05, 0.025, 0.0125), (_all(_pos), "> 0"), "float list",
        "learning rates to scan"),
    Key("tau_rule", _choice("sqrt", "fixed"), "sqrt", type_name="choice",
        help="sqrt uses ceil(eta**-0.5), fixed uses tau"),
    Key("phase_law", _choice("auto", "deterministic", "geometric"), "auto", type_name="choice",
        help="auto is geometric for the stochastic toy, deterministic otherwise"),
    Key("z0", _str, "stationary", None, "str", "initial toy state: stationary or a number"),
    Key("split_m", _float, 0.5, (_unit, "in (0, 1)"), "float", "split point s = tau**m"),
    Key("n_trials", _int, 10000, (_pos, ">= 1"), "int", "Monte-Carlo trials per point"),
    # line-search
    Key("model", _choice("rbm", "ff"), "rbm", type_name="choice", help="model for line-search"),
    Key("lr_min", _float, None, (_pos, "> 0"), "float",
        "smallest rate; default 0.001 for the RBM and 0.002 for FF"),
    Key("lr_max", _float, None, (_pos, "> 0"), "float",
        "largest rate; default 0.04 for the RBM and 0.05 for FF"),
    Key("n_rates", _int, 10, (lambda v: v >= 2, ">= 2"), "int", "rates in the log-spaced grid"),
]
KEY_MAP = {k.name: k for k in KEYS}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def replace(self, **kw) -> "RunConfig":
        return _finish({**self.values, **kw}, None)

    @property
    def is_ff(self) -> bool:
        return self.experiment == "train-ff" or (self.experiment == "line-search" and self.model == "ff")

    def schedule(self, eta: float | None = None) -> ScheduleConfig:
        mode = Mode(self.mode)
        unit = self.budget_unit
        if unit == "auto":
            unit = "gradient_steps" if self.is_ff else "phases"
        return ScheduleConfig(
            mode=mode, b=self.b, tau=self.tau, eta=self.eta if eta is None else eta,
            total_budget=self.budget, budget_unit=unit, k=self.k, record_every=self.record_every,
        )


def _parse_value(key: Key, raw: str, where):
    try:
        value = key.parse(raw)
    except ValueError as exc:
        opts = getattr(key.parse, "options", None)
        expect = f"one of {', '.join(opts)}" if opts else key.type_name or "value"
        raise ConfigError(f"{key.name}: expected {expect}, got {raw.strip()!r} ({exc})", where) from None
    if key.check is not None:
        pred, desc = key.check
        if not pred(value):
            raise ConfigError(f"{key.name}: out of range, must be {desc}, got {raw.strip()}", where)
    return value


def _finish(values: dict, where_of) -> RunConfig:
    if values.get("experiment") is None:
        raise ConfigError("missing required key 'experiment'")
    full = {k.name: k.default for k in KEYS}
    full.update(values)
    where = (where_of or {}).get
    # defaults that depend on other keys
    ff = full["experiment"] == "train-ff" or (full["experiment"] == "line-search"
                                              and full["model"] == "ff")
    fill = {
        "tau": 150 if full["mode"] == Mode.ISD_AOL_RANDOM_T.value else 100,
        "eta": 0.002 if ff else 0.0025,
        "budget": 120_000 if ff else 100_000,
        "lr_min": 0.002 if full["model"] == "ff" else 0.001,
        "lr_max": 0.05 if full["model"] == "ff" else 0.04,
    }
    for name, value in fill.items():
        if full[name] is None:
            full[name] = value
    if full["record_every"] is None:
        full["record_every"] = max(1, full["budget"] // 100) if ff else 100
    if full["z0"] != "stationary":
        try:
            _float(full["z0"])
        except ValueError:
            raise ConfigError(f"z0: expected 'stationary' or a number, got {full['z0']!r}",
                              where("z0")) from None
    cfg = RunConfig(full)
    try:
        cfg.schedule()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    lo, hi = cfg.lr_min, cfg.lr_max
    if not lo < hi:
        raise ConfigError(f"lr_min ({lo}) must be below lr_max ({hi})", where("lr_min"))
    return cfg


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse flat ``key = value`` text; ``overrides`` (raw strings) win over the file.

    Unknown keys, malformed values, out-of-range values, duplicates and a
    missing ``experiment`` are reported as :class:`ConfigError` with the
    offending line number.
    """
    values, where = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        name, raw = (s.strip() for s in body.split("=", 1))
        if name not in KEY_MAP:
            raise ConfigError(f"unknown key {name!r}", lineno)
        if name in values:
            raise ConfigError(f"duplicate key {name!r} (first set on line {where[name]})", lineno)
        values[name] = _parse_value(KEY_MAP[name], raw, lineno)
        where[name] = lineno
    for name, raw in (overrides or {}).items():
        if name not in KEY_MAP:
            raise ConfigError(f"unknown key {name!r}", f"flag --{name}")
        values[name] = _parse_value(KEY_MAP[name], str(raw), f"flag --{name}")
        where[name] = f"flag --{name}"
    return _finish(values, where)


def render_config(cfg: RunConfig) -> str:
    """Every key in schema order, one ``key = value`` line each."""
    return "".join(f"{k.name} = {_fmt(cfg.values[k.name])}\n" for k in KEYS)


def config_hash(cfg: RunConfig) -> str:
    """Digest of everything that affects results; where the files go is left out."""
    text = "".join(line for line in render_config(cfg).splitlines(keepends=True)
                   if line.split(" = ")[0] not in ("output_dir", "run_name"))
    return hashlib.sha256(text.encode()).hexdigest()


# output ------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(header, rows, cfg: RunConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    buf.write(f"# config-sha256: {config_hash(cfg)}\n")
    return buf.getvalue()


def output_dir(cfg: RunConfig) -> str:
    return cfg.output_dir or os.environ.get(OUTPUT_ENV) or "results"


def _run_name(cfg: RunConfig) -> str:
    if cfg.run_name:
        return cfg.run_name
    parts = [cfg.experiment]
    if cfg.experiment in ("train-rbm", "train-ff", "line-search"):
        parts.append(cfg.mode)
        if Mode(cfg.mode) is not Mode.TWO_TERM_CDK:
            parts.append(f"b{cfg.b:g}")
    if cfg.experiment == "bias-scan":
        parts.append(cfg.toy)
    parts.append(f"seed{cfg.seed}")
    return "_".join(parts)


def write_outputs(cfg: RunConfig, header, rows) -> str:
    out = output_dir(cfg)
    os.makedirs(out, exist_ok=True)
    stem = os.path.join(out, _run_name(cfg))
    with open(stem + ".csv", "w", encoding="utf-8", newline="") as f:
        f.write(csv_text(header, rows, cfg))
    with open(stem + ".config", "w", encoding="utf-8") as f:
        f.write(render_config(cfg))
    return stem + ".csv"


# experiments ---------------------------------------------------------------

def _records(result):
    return [r.row() for r in result.records]


def _train_rbm(cfg, eta=None):
    from .experiments import train_rbm

    result, _ = train_rbm(cfg.schedule(eta), cfg.seed, n_hidden=cfg.n_hidden, bas_n=cfg.bas_n,
                          init_std=cfg.init_std, prob_hidden_pos=cfg.prob_hidden_pos,
                          prob_hidden_neg=cfg.prob_hidden_neg)
    return result


def _mnist(cfg):
    train, test = load_mnist_subset(cfg.n_train, cfg.n_test, seed=cfg.seed,
                                    mnist_dir=cfg.mnist_dir or None)
    if cfg.binarize:
        train, test = binarize(train), binarize(test)
    return train, test


def _train_ff(cfg, eta=None, data=None):
    from .experiments import train_ff

    train, test = data if data is not None else _mnist(cfg)
    result, _ = train_ff(cfg.schedule(eta), cfg.seed, train, test, hidden=cfg.ff_hidden,
                         threshold=cfg.threshold)
    return result


def variance_rows(cfg):
    bs = np.linspace(0.05, 0.95, cfg.b_steps)
    rows = []
    for tn in cfg.trace_cov_neg:
        m = estimator.PhaseMoments.from_scalars(cfg.trace_cov_pos, tn, cfg.mean_sq_pos,
                                                cfg.mean_sq_neg, cfg.mean_dot)
        isd = estimator.estimator_variance_trace(m, bs)
        two = estimator.two_term_variance_trace(m)
        b_min = estimator.optimal_positive_probability(m)
        for b, v in zip(bs, isd):
            rows.append([round(float(b), 12), float(tn), float(v), float(two), b_min])
    return ["b", "trace_cov_neg", "isd_trace", "two_term_trace", "b_min"], rows


def bias_rows(cfg):
    rng = np.random.default_rng(cfg.seed)
    spec_cls = theory.ToyMarkovSpec if cfg.toy == "stochastic" else theory.ToyDeterministicSpec
    law_kind = cfg.phase_law
    if law_kind == "auto":
        law_kind = "geometric" if cfg.toy == "stochastic" else "deterministic"
    z0 = None if cfg.z0 == "stationary" else float(cfg.z0)
    rows, points = [], []
    for eta in cfg.etas:
        tau = theory.tau_for_eta(eta) if cfg.tau_rule == "sqrt" else (cfg.tau or 100)
        spec = spec_cls(alpha=cfg.alpha, theta0=cfg.theta0, target=cfg.target, eta=eta,
                        tau=tau, m=cfg.split_m, z0=z0)
        bm = theory.measure_bias(spec, PhaseLengthLaw(law_kind, tau), cfg.n_trials, rng)
        rows.append([bm.eta, bm.tau, bm.s, bm.n_trials, bm.mean_G, bm.stderr, bm.truth, bm.bias,
                     spec.envelope()])
        points.append((bm.eta, bm.bias))
    header = ["eta", "tau", "s", "n_trials", "mean_G", "stderr", "truth", "bias", "envelope"]
    return header, rows, points


def run(cfg: RunConfig, out=None) -> int:
    """Execute one experiment; returns the process exit status."""
    out = sys.stdout if out is None else out
    exp = cfg.experiment
    if exp == "bas-nll-oracle":
        n = len(generate_bas(cfg.bas_n))
        print(f"BAS n={cfg.bas_n}: {n} patterns, NLL floor ln({n}) = {math.log(n):.4f}", file=out)
        return 0
    if exp == "variance-scan":
        header, rows = variance_rows(cfg)
    elif exp == "bias-scan":
        header, rows, points = bias_rows(cfg)
        if len(points) >= 3 and all(y > 0 for _, y in points):
            slope, _, r2 = theory.scaling_fit(points)
            print(f"log-log slope of bias vs eta: {slope:.3f} (r^2 {r2:.3f})", file=out)
    elif exp == "train-rbm":
        header, rows = TrialRecord.FIELDS, _records(_train_rbm(cfg))
    elif exp == "train-ff":
        header, rows = TrialRecord.FIELDS, _records(_train_ff(cfg))
    elif exp == "line-search":
        data = _mnist(cfg) if cfg.model == "ff" else None

        def train(lr):
            res = _train_ff(cfg, lr, data) if cfg.model == "ff" else _train_rbm(cfg, lr)
            return res.final_metric

        lo, hi = cfg.lr_min, cfg.lr_max
        try:
            best, table = learning_rate_line_search(train, lo, hi, cfg.n_rates)
        except NoViableRateError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        header = ["lr", "final_metric", "status"]
        rows = [[lr, v, "ok" if ok else DIVERGED] for lr, v, ok in table]
        print(f"best learning rate: {best!r}", file=out)
    else:  # pragma: no cover - guarded by the config parser
        raise ConfigError(f"unknown experiment {exp!r}")
    path = write_outputs(cfg, header, rows)
    print(f"wrote {path}", file=out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexcl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="experiment")
    for exp in EXPERIMENTS:
        p = sub.add_parser(exp, help=f"run {exp}")
        p.add_argument("--config", help="flat key = value config file")
        for key in KEYS[1:]:
            flag = "--" + key.name
            aliases = [flag] + ([flag.replace("_", "-")] if "_" in key.name else [])
            p.add_argument(*aliases, dest=key.name, default=None, metavar="VALUE",
                           help=key.help)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    text = ""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
    overrides = {k.name: getattr(args, k.name) for k in KEYS[1:] if getattr(args, k.name) is not None}
    overrides["experiment"] = args.experiment
    try:
        cfg = parse_config(text, overrides)
    except ConfigError as exc:
        where = args.config or "<flags>"
        print(f"{where}: config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
