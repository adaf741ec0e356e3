"""Error estimation across replications, rate fits and coupling diagnostics.

Integrated squared errors are estimated by importance sampling: evaluation
points ``X^j`` are drawn from the initial density ``v0`` and each squared
error is weighted by ``1 / v0(X^j)``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from weighted_ips import rng
from weighted_ips.kernel import MollifierKernel
from weighted_ips.model import ConfigurationError, InitialLaw, Model
from weighted_ips.simulator import BrownianDriver, TimeGrid, run
from weighted_ips.testcases import BarenblattParams, barenblatt_model, exact_solution

log = logging.getLogger(__name__)

MIN_DENSITY = 1e-12


class DegenerateWeightError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationSetup:
    """Everything needed to run one replication, picklable for worker pools.

    Either ``params`` (the Barenblatt family) or ``factory`` is given;
    ``factory(kernel, horizon)`` must be a module-level function returning a
    :class:`Model`, and ``exact(t, X)`` the reference solution if known.
    """

    params: BarenblattParams | None = None
    factory: Callable[[MollifierKernel, float], Model] | None = None
    exact_fn: Callable[[float, np.ndarray], np.ndarray] | None = None
    epsilon: float = 0.4
    n_particles: int = 1000
    n_steps: int = 10
    horizon: float = 1.0
    driver: str = "iid"
    weight_rule: str = "left"
    refine: int = 1

    def __post_init__(self):
        if (self.params is None) == (self.factory is None):
            raise ConfigurationError("give exactly one of params or factory")

    def with_(self, **changes) -> SimulationSetup:
        return replace(self, **changes)

    @property
    def d(self) -> int:
        return self.params.d if self.params is not None else self.model().d

    def kernel(self) -> MollifierKernel:
        return MollifierKernel(self.epsilon, self.d)

    def model(self) -> Model:
        kernel = MollifierKernel(self.epsilon, self.params.d) if self.params is not None else None
        if self.params is not None:
            return barenblatt_model(self.params, kernel, self.horizon)
        return self.factory(kernel, self.horizon)

    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.n_steps)

    def exact(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.exact_fn is not None:
            return self.exact_fn(t, x)
        if self.params is None:
            raise ConfigurationError("no exact solution for this setup")
        return exact_solution(t, x, self.params)

    def initial_law(self) -> InitialLaw:
        return self.model().init

    def brownian(self) -> BrownianDriver:
        return BrownianDriver(self.driver, refine=self.refine)


def replication_seeds(seed_base: int, count: int, tag: int = 0) -> list[int]:
    """Per-replication seeds; replication ``i`` keeps its seed when ``count`` grows."""
    return [rng.derive_seed(seed_base, tag, i) for i in range(count)]


def evaluation_points(init: InitialLaw, n_points: int, seed: int) -> np.ndarray:
    """``Q`` points drawn from the initial law, resampling any with ``v0 < 1e-12``."""
    if init.density is None:
        raise ConfigurationError("initial law has no density; importance weights undefined")
    point_seed = rng.derive_seed(seed, rng.POINTS, 0)
    pts = init.sample(point_seed, np.arange(n_points))
    bad = np.flatnonzero(init.density(pts) < MIN_DENSITY)
    next_id = n_points
    while bad.size:
        fresh = init.sample(point_seed, np.arange(next_id, next_id + bad.size))
        next_id += bad.size
        pts[bad] = fresh
        bad = bad[init.density(fresh) < MIN_DENSITY]
    return pts


@dataclass
class ReplicationBatch:
    """Final estimates of ``M`` replications evaluated at shared points.

    ``values[i, j]`` is replication ``i`` at point ``X^j``.
    """

    points: np.ndarray
    values: np.ndarray
    config: dict = field(default_factory=dict)
    weight_sums: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.points.shape[0]:
            raise ValueError("values must have one column per evaluation point")

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def Q(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_estimates(cls, estimates, points, config=None) -> ReplicationBatch:
        pts = np.atleast_2d(points)
        return cls(pts, np.stack([est(pts) for est in estimates]), dict(config or {}))


def _one_replication(setup: SimulationSetup, seed: int, points: np.ndarray):
    traj = run(setup.model(), setup.kernel(), setup.grid(), setup.brownian(), setup.n_particles, seed,
               weight_rule=setup.weight_rule)
    return traj.final_estimate()(points), traj.weight_sums


def replicate(setup: SimulationSetup, seeds: Sequence[int], points: np.ndarray, workers: int = 1) -> ReplicationBatch:
    """Run one replication per seed and evaluate each final estimate at ``points``.

    Results are ordered by seed position whatever the number of workers.
    """
    points = np.ascontiguousarray(points, dtype=float)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replication, [setup] * len(seeds), seeds, [points] * len(seeds)))
    else:
        model = setup.model()
        kernel, grid, driver = setup.kernel(), setup.grid(), setup.brownian()
        results = []
        for s in seeds:
            traj = run(model, kernel, grid, driver, setup.n_particles, s, weight_rule=setup.weight_rule)
            results.append((traj.final_estimate()(points), traj.weight_sums))
    config = dict(N=setup.n_particles, epsilon=setup.epsilon, n=setup.n_steps, d=setup.d, driver=setup.driver)
    return ReplicationBatch(points, np.stack([r[0] for r in results]), config, np.stack([r[1] for r in results]))


@dataclass
class ErrorReport:
    mise: float
    variance: float
    bias_sq: float
    mise_se: float
    variance_se: float
    bias_sq_se: float
    bias_sq_raw: float
    config: dict = field(default_factory=dict)


def _densities(batch: ReplicationBatch, exact, t: float) -> tuple[np.ndarray, np.ndarray]:
    v0 = np.asarray(exact(0.0, batch.points), dtype=float)
    if np.any(v0 < MIN_DENSITY):
        raise DegenerateWeightError("evaluation point with initial density below 1e-12; resample it upstream")
    return v0, np.asarray(exact(t, batch.points), dtype=float)


def _jackknife_se(loo: np.ndarray) -> float:
    m = loo.shape[0]
    return float(math.sqrt((m - 1) / m * np.sum((loo - loo.mean()) ** 2)))


def _split(values: np.ndarray, target: np.ndarray, inv_v0: np.ndarray) -> tuple[float, float]:
    m = values.shape[0]
    mean = values.mean(axis=0)
    var = np.sum((values - mean) ** 2, axis=0) / (m - 1)
    variance = float(np.mean(var * inv_v0))
    bias_raw = float(np.mean((mean - target) ** 2 * inv_v0)) - variance / m
    return variance, bias_raw


def _split_leave_one_out(values: np.ndarray, target: np.ndarray, inv_v0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = values.shape[0]
    mean = values.mean(axis=0)
    dev = values - mean
    ss = np.sum(dev**2, axis=0)
    # removing row i: new mean and sum of squares by the downdating formulas
    loo_mean = mean - dev / (m - 1)
    loo_ss = ss - dev**2 * m / (m - 1)
    loo_var = loo_ss / (m - 2)
    variance = np.mean(loo_var * inv_v0, axis=1)
    bias = np.mean((loo_mean - target) ** 2 * inv_v0, axis=1) - variance / (m - 1)
    return variance, bias


def mise_estimate(batch: ReplicationBatch, exact, t: float) -> tuple[float, float]:
    """Importance-sampled MISE and its standard error over replications."""
    v0, vt = _densities(batch, exact, t)
    per_rep = np.mean((batch.values - vt) ** 2 / v0, axis=1)
    mise = float(per_rep.mean())
    se = float(per_rep.std(ddof=1) / math.sqrt(batch.M)) if batch.M > 1 else float("nan")
    return mise, se


def variance_bias_split(batch: ReplicationBatch, exact, t: float) -> tuple[float, float]:
    """Variance and squared bias, the latter corrected by ``variance / M`` and floored at 0."""
    if batch.M < 2:
        raise ConfigurationError("variance/bias split needs at least 2 replications")
    v0, vt = _densities(batch, exact, t)
    variance, bias_raw = _split(batch.values, vt, 1.0 / v0)
    if bias_raw < 0:
        log.info("squared bias %.3e below zero after finite-M correction; floored", bias_raw)
    return variance, max(bias_raw, 0.0)


def error_report(batch: ReplicationBatch, exact, t: float) -> ErrorReport:
    """MISE, variance and squared bias with jackknife standard errors."""
    if batch.M < 3:
        raise ConfigurationError("error report needs at least 3 replications for jackknife errors")
    v0, vt = _densities(batch, exact, t)
    inv = 1.0 / v0
    mise, mise_se = mise_estimate(batch, exact, t)
    variance, bias_raw = _split(batch.values, vt, inv)
    loo_var, loo_bias = _split_leave_one_out(batch.values, vt, inv)
    if bias_raw < 0:
        log.info("squared bias %.3e below zero after finite-M correction; floored", bias_raw)
    return ErrorReport(
        mise=mise,
        variance=variance,
        bias_sq=max(bias_raw, 0.0),
        mise_se=mise_se,
        variance_se=_jackknife_se(loo_var),
        bias_sq_se=_jackknife_se(loo_bias),
        bias_sq_raw=bias_raw,
        config=dict(batch.config, M=batch.M, Q=batch.Q),
    )


@dataclass
class RateFit:
    x: np.ndarray
    y: np.ndarray
    slope: float
    intercept: float
    r2: float


def fit_rate(points) -> RateFit:
    """Least squares line through ``(log x, log y)``."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ConfigurationError("rate fit needs at least 3 (x, y) pairs")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("rate fit needs positive abscissae and ordinates")
    lx, ly = np.log(x), np.log(y)
    res = stats.linregress(lx, ly)
    resid = ly - (res.intercept + res.slope * lx)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    # exact fits (including flat ones) count as R^2 = 1 despite rounding
    tiny = ly.size * (1e-13 * max(1.0, float(np.max(np.abs(ly))))) ** 2
    r2 = 1.0 if ss_res <= tiny else 1.0 - ss_res / ss_tot
    return RateFit(x, y, float(res.slope), float(res.intercept), r2)


@dataclass
class TimestepRow:
    n: int
    variance: float
    bias_sq: float
    bias_sq_raw: float
    total: float
    variance_n: float
    variance_ref: float
    bias_sq_se: float
    total_se: float


def _bias_of_difference(diff: np.ndarray, inv_v0: np.ndarray) -> tuple[float, float]:
    """Unbiased ``||E diff||^2`` from paired rows and its jackknife error."""
    m = diff.shape[0]
    mean = diff.mean(axis=0)
    dev = diff - mean
    var = np.sum(dev**2, axis=0) / (m - 1)
    raw = float(np.mean((mean**2 - var / m) * inv_v0))
    loo_mean = mean - dev / (m - 1)
    loo_var = (np.sum(dev**2, axis=0) - dev**2 * m / (m - 1)) / (m - 2)
    loo = np.mean((loo_mean**2 - loo_var / (m - 1)) * inv_v0, axis=1)
    return raw, _jackknife_se(loo)


def _bias_of_means(a: np.ndarray, b: np.ndarray, inv_v0: np.ndarray) -> tuple[float, float]:
    """Unbiased ``||E a - E b||^2`` from independent batches, jackknifed over both."""

    def stat(x, y):
        return (np.mean((x.mean(axis=0) - y.mean(axis=0)) ** 2 * inv_v0)
                - np.mean(np.var(x, axis=0, ddof=1) * inv_v0) / x.shape[0]
                - np.mean(np.var(y, axis=0, ddof=1) * inv_v0) / y.shape[0])

    raw = float(stat(a, b))
    se_a = _jackknife_se(np.array([stat(np.delete(a, i, 0), b) for i in range(a.shape[0])]))
    se_b = _jackknife_se(np.array([stat(a, np.delete(b, i, 0)) for i in range(b.shape[0])]))
    return raw, math.hypot(se_a, se_b)


def timestep_study(
    setup: SimulationSetup,
    n_values: Sequence[int],
    n_ref: int,
    seeds: Sequence[int],
    ref_seeds: Sequence[int] | None,
    points: np.ndarray,
    workers: int = 1,
    pairing: str = "independent",
) -> list[TimestepRow]:
    """Split ``E||u^n - u^{n_ref}||^2`` into variance and squared bias for each ``n``.

    ``pairing="independent"``: reference and tested batches use disjoint
    seeds; variance is ``V_n + V_ref`` and squared bias
    ``||mean_n - mean_ref||^2 - V_n/M - V_ref/M_ref``.

    ``pairing="brownian"``: replication ``i`` of every grid uses ``seeds[i]``
    and the coarse increments are sums of the reference increments, so both
    runs follow one Brownian path from one initial sample. Squared bias is
    then ``||mean(d)||^2 - Var(d)/M`` for the paired differences ``d``, which
    estimates the same quantity with far less noise. The variance term is
    still ``V_n + V_ref``.
    """
    if n_ref <= max(n_values):
        raise ConfigurationError("reference step count must exceed every tested step count")
    bad = [n for n in n_values if n_ref % n]
    if bad:
        raise ConfigurationError(f"reference grid does not nest the grids with n={bad}")
    if pairing == "independent":
        if ref_seeds is None or set(seeds) & set(ref_seeds):
            raise ConfigurationError("reference and tested runs must use disjoint seeds")
    elif pairing == "brownian":
        ref_seeds = seeds
    else:
        raise ConfigurationError(f"unknown pairing {pairing!r}")
    if len(seeds) < 3 or len(ref_seeds) < 3:
        raise ConfigurationError("time-step study needs at least 3 replications per grid")
    inv = 1.0 / setup.initial_law().density(points)
    ref = replicate(setup.with_(n_steps=n_ref, refine=1), ref_seeds, points, workers).values
    m_ref = ref.shape[0]
    v_ref = float(np.mean(np.var(ref, axis=0, ddof=1) * inv))
    rows = []
    for n in n_values:
        refine = n_ref // n if pairing == "brownian" else 1
        vals = replicate(setup.with_(n_steps=n, refine=refine), seeds, points, workers).values
        m = vals.shape[0]
        v_n = float(np.mean(np.var(vals, axis=0, ddof=1) * inv))
        if pairing == "brownian":
            bias_raw, bias_se = _bias_of_difference(vals - ref, inv)
        else:
            bias_raw, bias_se = _bias_of_means(vals, ref, inv)
        k = min(m, m_ref)
        per_pair = np.mean((vals[:k] - ref[:k]) ** 2 * inv, axis=1)
        if bias_raw < 0:
            log.info("n=%d: squared bias %.3e below zero after correction; floored", n, bias_raw)
        rows.append(TimestepRow(
            n=n,
            variance=v_n + v_ref,
            bias_sq=max(bias_raw, 0.0),
            bias_sq_raw=bias_raw,
            total=float(per_pair.mean()),
            variance_n=v_n,
            variance_ref=v_ref,
            bias_sq_se=bias_se,
            total_se=float(per_pair.std(ddof=1) / math.sqrt(k)),
        ))
    return rows


@dataclass
class CouplingReport:
    n_values: list[int]
    distances: list[float]
    n_ref: int
    fit: RateFit | None
    distances_double_ref: list[float] | None = None
    max_relative_shift: float | None = None


def _paths(setup: SimulationSetup, model, n_particles: int, seed: int) -> np.ndarray:
    traj = run(model, setup.kernel(), setup.grid(), setup.brownian(), n_particles, seed, record="full",
               weight_rule=setup.weight_rule)
    return np.stack(traj.positions)


def _coupled_distance(paths: np.ndarray, ref: np.ndarray, n_match: int) -> float:
    diff = paths[:, :n_match, :] - ref[:, :n_match, :]
    return float(np.mean(np.max(np.sum(diff * diff, axis=2), axis=0)))


def coupling_diagnostic(
    setup: SimulationSetup,
    n_values: Sequence[int],
    seed: int,
    ref_factor: int = 4,
    n_seeds: int = 1,
    stability: bool = True,
) -> CouplingReport:
    """Pathwise distance between finite systems and a large reference system.

    Particle ``i`` sees the same initial point and noise in every system, so
    the first particles of a run with ``ref_factor * max(n_values)`` particles
    stand in for the non-interacting limit. Reported: mean over ``i`` below
    ``min(n_values)`` of ``sup_k |x^N_{k,i} - x^ref_{k,i}|^2``, averaged over
    ``n_seeds`` seeds. With ``stability`` the reference size is also doubled.
    """
    n_values = sorted(int(n) for n in n_values)
    n_match = n_values[0]
    n_ref = ref_factor * n_values[-1]
    model = setup.model()
    seeds = replication_seeds(seed, n_seeds, tag=1)
    dist = np.zeros(len(n_values))
    dist2 = np.zeros(len(n_values))
    for s in seeds:
        ref = _paths(setup, model, n_ref, s)
        ref2 = _paths(setup, model, 2 * n_ref, s) if stability else None
        for i, n in enumerate(n_values):
            paths = _paths(setup, model, n, s)
            dist[i] += _coupled_distance(paths, ref, n_match) / n_seeds
            if stability:
                dist2[i] += _coupled_distance(paths, ref2, n_match) / n_seeds
    fit = fit_rate(zip(n_values, dist)) if len(n_values) >= 3 and np.all(dist > 0) else None
    report = CouplingReport(n_values, dist.tolist(), n_ref, fit)
    if stability:
        report.distances_double_ref = dist2.tolist()
        with np.errstate(divide="ignore", invalid="ignore"):
            shift = np.where(dist > 0, np.abs(dist2 - dist) / dist, 0.0)
        report.max_relative_shift = float(np.max(shift))
    return report
