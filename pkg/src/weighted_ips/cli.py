"""Experiment driver: config parsing, study grids, CSV tables and plot data.

Config files are flat ``key = value`` text; lists are comma separated and
``#`` starts a comment. Command-line flags override file values.

CSV columns, in order::

    study, d, m, N, epsilon, n, M, Q, seed, statistic, value, stderr

preceded by one ``#`` line holding the resolved config and package version
as JSON. Floats are written with 17 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import importlib
import json
import logging
import math
import os
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from weighted_ips import __version__
from weighted_ips.analysis import (
    SimulationSetup,
    coupling_diagnostic,
    error_report,
    evaluation_points,
    fit_rate,
    replicate,
    replication_seeds,
    timestep_study,
)
from weighted_ips.model import ConfigurationError, check_assumptions
from weighted_ips.simulator import NumericalBlowupError, run
from weighted_ips.testcases import (
    BarenblattParams,
    assumption_box,
    barenblatt_model,
    select_profile_variant,
)

log = logging.getLogger(__name__)

OUTPUT_ENV = "WIPS_OUTPUT_DIR"
COLUMNS = ("study", "d", "m", "N", "epsilon", "n", "M", "Q", "seed", "statistic", "value", "stderr")
STUDIES = ("variance-vs-N", "variance-vs-eps", "bias-vs-eps", "timestep", "coupling", "single-run")
TESTCASES = ("barenblatt", "conservative", "custom")

EXIT_USAGE = 2
EXIT_BLOWUP = 3


class UsageError(ConfigurationError):
    pass


@dataclass
class ExperimentConfig:
    study: str = "single-run"
    testcase: str = "barenblatt"
    d: int = 1
    m: float = 1.5
    mu: float = 0.0
    A: float = 2.0 / 3.0
    T: float = 1.0
    n: list[int] = field(default_factory=lambda: [10])
    N: list[int] = field(default_factory=lambda: [1000])
    epsilon: list[float] = field(default_factory=lambda: [0.4])
    M: int = 100
    Q: int = 1000
    seed: int = 0
    driver: str = "iid"
    n_ref: int | None = None
    pairing: str = "independent"
    weight_rule: str = "left"
    ref_factor: int = 4
    factory: str | None = None
    exact: str | None = None
    out: str | None = None
    threads: int | None = None

    def setup(self) -> SimulationSetup:
        base = dict(epsilon=self.epsilon[0], n_particles=self.N[0], n_steps=self.n[0], horizon=self.T,
                    driver=self.driver, weight_rule=self.weight_rule)
        if self.testcase == "custom":
            return SimulationSetup(factory=_import(self.factory), exact_fn=_import(self.exact) if self.exact else None,
                                   **base)
        return SimulationSetup(params=self.params(), **base)

    def params(self) -> BarenblattParams:
        A = 0.0 if self.testcase == "conservative" else self.A
        return BarenblattParams(m=self.m, mu=self.mu, A=A, d=self.d)

    def echo(self) -> dict:
        """Resolved config minus scheduling and output keys, which cannot change results."""
        out = asdict(self)
        for key in ("threads", "out"):
            out.pop(key)
        return out


_LISTS = {"n": int, "N": int, "epsilon": float}
_SCALARS = {
    "study": str, "testcase": str, "d": int, "m": float, "mu": float, "A": float, "T": float, "M": int, "Q": int,
    "seed": int, "driver": str, "n_ref": int, "pairing": str, "weight_rule": str, "ref_factor": int,
    "factory": str, "exact": str, "out": str, "threads": int,
}
_ALIASES = {"eps": "epsilon"}


def _import(path: str):
    if not path or ":" not in path:
        raise UsageError(f"expected 'module:function', got {path!r}")
    mod, name = path.split(":", 1)
    return getattr(importlib.import_module(mod), name)


def _parse_one(kind, text: str):
    if kind is int:
        value = float(text)
        if not value.is_integer():
            raise ValueError(text)
        return int(value)
    return kind(text)


def _convert(key: str, raw: str):
    kind = _LISTS.get(key) or _SCALARS[key]
    parts = [p.strip() for p in str(raw).split(",") if p.strip()] if key in _LISTS else [str(raw).strip()]
    try:
        values = [_parse_one(kind, p) for p in parts]
    except ValueError:
        raise UsageError(f"malformed value for {key}: {raw!r}") from None
    if key in _LISTS:
        if not values:
            raise UsageError(f"{key} needs at least one value")
        return values
    return values[0]


def read_config_file(path) -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[_ALIASES.get(key, key)] = value
    return raw


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve a config from an optional file plus overrides (overrides win)."""
    raw = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[_ALIASES.get(key, key)] = value
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = value if not isinstance(value, str) else _convert(key, value)
    for key in _LISTS:
        if key in values and not isinstance(values[key], list):
            values[key] = [values[key]]
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.study not in STUDIES:
        raise UsageError(f"unknown study {cfg.study!r}; choose from {', '.join(STUDIES)}")
    if cfg.testcase not in TESTCASES:
        raise UsageError(f"unknown testcase {cfg.testcase!r}")
    if cfg.testcase == "custom" and not cfg.factory:
        raise UsageError("testcase=custom needs factory=module:function")
    if not cfg.m > 1:
        raise UsageError(f"m must exceed 1, got {cfg.m}")
    if cfg.driver not in ("iid", "antithetic"):
        raise UsageError(f"unknown driver {cfg.driver!r}")
    for key in ("d", "T", "M", "Q"):
        if not getattr(cfg, key) > 0:
            raise UsageError(f"{key} must be positive")
    for key in ("n", "N", "epsilon"):
        if any(not v > 0 for v in getattr(cfg, key)):
            raise UsageError(f"{key} values must be positive")
    lists = {k: len(getattr(cfg, k)) for k in ("n", "N", "epsilon")}
    shape = {
        "variance-vs-N": ({"N"}, {"n"}),
        "variance-vs-eps": ({"epsilon"}, {"n"}),
        "bias-vs-eps": ({"epsilon"}, {"n", "N"}),
        "timestep": ({"n"}, {"N", "epsilon"}),
        "coupling": ({"N"}, {"n", "epsilon"}),
        "single-run": (set(), {"n", "N", "epsilon"}),
    }[cfg.study]
    multi, single = shape
    for key in multi:
        if lists[key] < 2:
            raise UsageError(f"study={cfg.study} needs a list of {key} values")
    for key in single:
        if lists[key] != 1:
            raise UsageError(f"study={cfg.study} takes a single {key} value")
    if cfg.study in ("variance-vs-N", "variance-vs-eps", "bias-vs-eps", "timestep") and cfg.M < 3:
        raise UsageError("M must be at least 3 for error reports")
    if cfg.study == "timestep":
        if cfg.n_ref is None:
            raise UsageError("study=timestep needs n_ref")
        if cfg.pairing not in ("independent", "brownian"):
            raise UsageError(f"unknown pairing {cfg.pairing!r}")
    if cfg.driver == "antithetic" and any(N % 2 for N in cfg.N):
        raise UsageError("antithetic driver needs even N")


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


class CsvSink:
    """Row writer that flushes after every row so partial results survive."""

    def __init__(self, path: Path, cfg: ExperimentConfig):
        self.path = path
        self.cfg = cfg
        self._fh = open(path, "w", newline="")
        header = {"version": __version__, "config": cfg.echo()}
        self._fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(COLUMNS)
        self.rows: list[dict] = []

    def write(self, N, epsilon, n, statistic, value, stderr=float("nan")):
        cfg = self.cfg
        row = dict(study=cfg.study, d=cfg.d, m=cfg.m, N=N, epsilon=epsilon, n=n, M=cfg.M, Q=cfg.Q, seed=cfg.seed,
                   statistic=statistic, value=value, stderr=stderr)
        self.rows.append(row)
        self._writer.writerow([_fmt(row[c]) for c in COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _workers(cfg: ExperimentConfig) -> int:
    return cfg.threads if cfg.threads else (os.cpu_count() or 1)


def _report_rows(sink: CsvSink, setup: SimulationSetup, rep) -> None:
    N, eps, n = setup.n_particles, setup.epsilon, setup.n_steps
    sink.write(N, eps, n, "mise", rep.mise, rep.mise_se)
    sink.write(N, eps, n, "variance", rep.variance, rep.variance_se)
    sink.write(N, eps, n, "bias_sq", rep.bias_sq, rep.bias_sq_se)
    sink.write(N, eps, n, "bias_sq_raw", rep.bias_sq_raw)


def _grid_study(cfg: ExperimentConfig, sink: CsvSink) -> dict:
    base = cfg.setup()
    points = evaluation_points(base.initial_law(), cfg.Q, cfg.seed)
    seeds = replication_seeds(cfg.seed, cfg.M)
    curves: dict[tuple, list] = defaultdict(list)
    for eps in cfg.epsilon:
        for N in cfg.N:
            setup = base.with_(epsilon=eps, n_particles=N)
            batch = replicate(setup, seeds, points, _workers(cfg))
            rep = error_report(batch, setup.exact, cfg.T)
            _report_rows(sink, setup, rep)
            if cfg.study == "variance-vs-N":
                curves[("variance", "N", "epsilon", eps)].append((N, rep.variance))
            elif cfg.study == "variance-vs-eps":
                curves[("variance", "epsilon", "N", N)].append((eps, rep.variance))
            else:
                curves[("bias_sq", "epsilon", "N", N)].append((eps, rep.bias_sq))
    return _fits(curves)


def _fits(curves: dict) -> dict:
    out = []
    for (stat, xname, fixed, fixed_value), pts in curves.items():
        entry = {"statistic": stat, "versus": xname, fixed: fixed_value, "points": pts}
        usable = [(x, y) for x, y in pts if y > 0]
        if len(usable) >= 3:
            fit = fit_rate(usable)
            entry.update(slope=fit.slope, intercept=fit.intercept, r2=fit.r2)
            if fit.r2 < 0.9:
                entry["flag"] = "R2 below 0.9"
        else:
            entry["slope"] = None
        out.append(entry)
    return {"fits": out}


def _timestep(cfg: ExperimentConfig, sink: CsvSink) -> dict:
    setup = cfg.setup()
    points = evaluation_points(setup.initial_law(), cfg.Q, cfg.seed)
    seeds = replication_seeds(cfg.seed, cfg.M, tag=0)
    ref_seeds = replication_seeds(cfg.seed, cfg.M, tag=1) if cfg.pairing == "independent" else None
    rows = timestep_study(setup, cfg.n, cfg.n_ref, seeds, ref_seeds, points, _workers(cfg), pairing=cfg.pairing)
    N, eps = setup.n_particles, setup.epsilon
    for r in rows:
        sink.write(N, eps, r.n, "variance", r.variance)
        sink.write(N, eps, r.n, "variance_n", r.variance_n)
        sink.write(N, eps, r.n, "variance_ref", r.variance_ref)
        sink.write(N, eps, r.n, "bias_sq", r.bias_sq, r.bias_sq_se)
        sink.write(N, eps, r.n, "bias_sq_raw", r.bias_sq_raw, r.bias_sq_se)
        sink.write(N, eps, r.n, "total", r.total, r.total_se)
    curves = {
        ("bias_sq", "n", "N", N): [(r.n, r.bias_sq) for r in rows],
        ("variance", "n", "N", N): [(r.n, r.variance) for r in rows],
    }
    summary = _fits(curves)
    summary.update(n_ref=cfg.n_ref, pairing=cfg.pairing)
    return summary


def _coupling(cfg: ExperimentConfig, sink: CsvSink) -> dict:
    setup = cfg.setup()
    rep = coupling_diagnostic(setup, cfg.N, cfg.seed, cfg.ref_factor, n_seeds=cfg.M, stability=True)
    eps, n = setup.epsilon, setup.n_steps
    for N, dist, dist2 in zip(rep.n_values, rep.distances, rep.distances_double_ref):
        sink.write(N, eps, n, "coupled_distance", dist)
        sink.write(N, eps, n, "coupled_distance_double_ref", dist2)
    summary = _fits({("coupled_distance", "N", "N_ref", rep.n_ref): list(zip(rep.n_values, rep.distances))})
    summary.update(n_ref=rep.n_ref, max_relative_shift=rep.max_relative_shift)
    return summary


def _single(cfg: ExperimentConfig, sink: CsvSink) -> dict:
    setup = cfg.setup()
    model = setup.model()
    traj = run(model, setup.kernel(), setup.grid(), setup.brownian(), setup.n_particles, cfg.seed)
    N, eps, n = setup.n_particles, setup.epsilon, setup.n_steps
    x, w = traj.final
    sums = traj.weight_sums
    sink.write(N, eps, n, "total_weight", sums[-1])
    sink.write(N, eps, n, "total_weight_min", float(sums.min()))
    sink.write(N, eps, n, "total_weight_max", float(sums.max()))
    sink.write(N, eps, n, "max_abs_log_weight", float(np.max(np.abs(np.log(w)))))
    summary = {"total_weight": sums[-1], "total_weight_equals_N": bool(np.all(sums == N))}
    if model.d == 1:
        mass = final_mass(traj)
        sink.write(N, eps, n, "mass", mass)
        summary["mass"] = mass
    return summary


def final_mass(traj) -> float:
    """Trapezoid mass of the final one-dimensional estimate on a padded grid."""
    est = traj.final_estimate()
    eps = est.kernel.epsilon
    lo, hi = est.positions.min() - 10 * eps, est.positions.max() + 10 * eps
    ys = np.linspace(lo, hi, int(math.ceil((hi - lo) / (eps / 20))) + 1)
    return float(np.trapezoid(est(ys[:, None]), ys))


_RUNNERS = {
    "variance-vs-N": _grid_study,
    "variance-vs-eps": _grid_study,
    "bias-vs-eps": _grid_study,
    "timestep": _timestep,
    "coupling": _coupling,
    "single-run": _single,
}


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out or os.environ.get(OUTPUT_ENV) or "results")


def run_study(cfg: ExperimentConfig) -> int:
    """Execute the study; write ``<study>.csv`` and ``<study>_summary.json``."""
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{cfg.study}.csv"
    sink = CsvSink(csv_path, cfg)
    status = 0
    try:
        summary = _RUNNERS[cfg.study](cfg, sink)
    except NumericalBlowupError as exc:
        log.error("simulation blew up: %s", exc)
        sink.write(cfg.N[0], cfg.epsilon[0], cfg.n[0], "failed", float("nan"))
        summary = {"failed": str(exc)}
        status = EXIT_BLOWUP
    finally:
        sink.close()
    summary.update(study=cfg.study, version=__version__, config=cfg.echo(), csv=str(csv_path))
    (out / f"{cfg.study}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    return status


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if len(lines) < 2:
        raise ValueError(f"{path} holds no data rows")
    return list(csv.DictReader(lines))


_PLOTS = {
    "variance-vs-N": [("variance", "N", "epsilon")],
    "variance-vs-eps": [("variance", "epsilon", "N")],
    "bias-vs-eps": [("bias_sq", "epsilon", "N")],
    "timestep": [("bias_sq", "n", "N"), ("variance", "n", "N")],
    "coupling": [("coupled_distance", "N", "epsilon")],
}


def emit_plotdata(csv_path, study: str, out_dir=None) -> list[Path]:
    """Write one ``log x  log y`` file per curve next to the CSV (or in ``out_dir``)."""
    if study not in _PLOTS:
        raise UsageError(f"no rate plot for study {study!r}")
    rows = [r for r in read_csv(csv_path) if r["study"] == study]
    if not rows:
        raise ValueError(f"{csv_path} has no rows for study {study}")
    out_dir = Path(out_dir) if out_dir else Path(csv_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stat, xkey, key in _PLOTS[study]:
        picked = [r for r in rows if r["statistic"] == stat]
        if not picked:
            raise ValueError(f"{csv_path} has no {stat!r} rows for study {study}")
        groups: dict[str, list] = defaultdict(list)
        for r in picked:
            groups[r[key]].append((float(r[xkey]), float(r["value"])))
        for label, pts in sorted(groups.items()):
            pts.sort()
            path = out_dir / f"{study}_{stat}_{key}{label}.dat"
            with open(path, "w") as fh:
                fh.write(f"# log({xkey}) log({stat})  {key}={label}\n")
                for x, y in pts:
                    if y > 0:
                        fh.write(f"{math.log(x):.17g} {math.log(y):.17g}\n")
                    else:
                        fh.write(f"# dropped {xkey}={x!r}: nonpositive {stat}\n")
            written.append(path)
    return written


def run_check(cfg: ExperimentConfig, n_samples: int = 2000) -> int:
    params = cfg.params()
    report = select_profile_variant(params)
    sel = report.selected
    print("residual slopes by variant:")
    for key, slope in report.slopes.items():
        verdict = "pass" if report.passed(key) else "fail"
        print(f"  {'/'.join(key):<22s} slope {slope:6.3f}  {verdict}")
    if sel is None:
        print("no Barenblatt variant passed the residual oracle")
        return 1
    print(f"selected variant: radial={sel.radial} normalization={sel.normalization} form={sel.form}")
    model = barenblatt_model(sel, horizon=cfg.T)
    ar = check_assumptions(model, n_samples, assumption_box(sel, cfg.T), seed=cfg.seed, horizon=cfg.T)
    print(f"declared m_lambda = {model.consts.m_lambda:.6g}, sampled max |lambda| = {ar.max_abs_lambda:.6g}")
    for v in ar.violations:
        print(f"  violation: {v}")
    print("assumption spot-check:", "passed" if not ar.violations else f"{len(ar)} violation(s)")
    return 0 if not ar.violations else 1


def _overrides(args) -> dict:
    out = {}
    for key in ("study", "N", "eps", "n", "seed", "threads", "out"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weighted-ips", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a study grid and write CSV + summary")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--study", choices=STUDIES)
    p.add_argument("--N", help="particle count(s), comma separated")
    p.add_argument("--eps", help="bandwidth(s), comma separated")
    p.add_argument("--n", help="time step count(s), comma separated")
    p.add_argument("--seed")
    p.add_argument("--threads", help="worker processes (default: all cores)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./results)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config key")

    p = sub.add_parser("plot", help="turn a study CSV into log-log two-column files")
    p.add_argument("--csv", required=True)
    p.add_argument("--study", required=True, choices=STUDIES)
    p.add_argument("--out")

    p = sub.add_parser("check", help="assumption spot-checks and the PDE-residual oracle")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--samples", type=int, default=2000)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return run_study(parse_config(args.config, _overrides(args)))
        if args.command == "plot":
            for path in emit_plotdata(args.csv, args.study, args.out):
                print(path)
            return 0
        return run_check(parse_config(args.config, _overrides(args)), args.samples)
    except (ConfigurationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
