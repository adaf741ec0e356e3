"""Time-discretised weighted interacting particle system.

One step, with every particle reading the same frozen estimate ``u_k``:

    x_{k+1} = x_k + Phi(t_k, x_k, u_k(x_k)) sqrt(dt) eps_{k+1} + g(t_k, x_k, u_k(x_k)) dt
    G_{k+1} = G_k exp(Lambda(t_k, x_k, u_k(x_k)) dt)
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from weighted_ips import rng
from weighted_ips.kernel import DensityEstimate, MollifierKernel, kde_eval_batch
from weighted_ips.model import ConfigurationError, Model


class NumericalBlowupError(RuntimeError):
    def __init__(self, message: str, particle: int, step: int):
        super().__init__(f"{message} (particle {particle}, step {step})")
        self.particle = particle
        self.step = step


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ConfigurationError(f"n_steps must be a nonnegative integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps if self.n_steps else 0.0

    def node(self, k: int) -> float:
        return self.horizon if k == self.n_steps else k * self.dt

    @property
    def nodes(self) -> np.ndarray:
        return np.array([self.node(k) for k in range(self.n_steps + 1)])

    def floor_node(self, s: float) -> float:
        """Grid time ``t_k`` with ``s`` in ``[t_k, t_{k+1})``."""
        if self.n_steps == 0:
            return 0.0
        k = min(int(math.floor(s / self.dt)), self.n_steps)
        return self.node(k)


@dataclass(frozen=True)
class BrownianDriver:
    """Source of the standard Gaussian increments ``eps^j_k``.

    ``kind`` is ``"iid"``, ``"antithetic"`` (particle ``j + N/2`` receives the
    negated draw of particle ``j``) or ``"custom"``, where
    ``generator(step, n_particles, p, seed)`` returns an ``(N, p)`` array.
    Particle ``j`` draws from stream ``j`` and substream ``step`` of the
    counter-based generator, so its noise does not depend on ``N``.

    With ``refine = r > 1`` each increment is the normalised sum of ``r``
    draws of a grid ``r`` times finer, ``(e_{(k-1)r+1} + ... + e_{kr}) / sqrt(r)``.
    A run on ``n`` steps with ``refine = n_ref // n`` then follows the same
    Brownian path as a run on ``n_ref`` steps with the same seed.
    """

    kind: str = "iid"
    seed: int | None = None
    generator: Callable[[int, int, int, int], np.ndarray] | None = field(default=None, compare=False)
    refine: int = 1

    def __post_init__(self):
        if self.kind not in ("iid", "antithetic", "custom"):
            raise ConfigurationError(f"unknown driver kind {self.kind!r}")
        if self.kind == "custom" and self.generator is None:
            raise ConfigurationError("custom driver needs a generator")
        if int(self.refine) != self.refine or self.refine < 1:
            raise ConfigurationError(f"refine must be a positive integer, got {self.refine}")

    def check_size(self, n_particles: int) -> None:
        if self.kind == "antithetic" and n_particles % 2:
            raise ConfigurationError(f"antithetic driver needs an even particle count, got {n_particles}")

    def _draw(self, seed: int, streams: np.ndarray, step: int, p: int) -> np.ndarray:
        r = self.refine
        if r == 1:
            return rng.normals(seed, rng.NOISE, streams, step, p)
        total = rng.normals(seed, rng.NOISE, streams, (step - 1) * r + 1, p)
        for i in range(2, r + 1):
            total += rng.normals(seed, rng.NOISE, streams, (step - 1) * r + i, p)
        return total / math.sqrt(r)

    def normals(self, step: int, n_particles: int, p: int, seed: int) -> np.ndarray:
        seed = seed if self.seed is None else self.seed
        if self.kind == "iid":
            return self._draw(seed, np.arange(n_particles), step, p)
        if self.kind == "antithetic":
            self.check_size(n_particles)
            half = self._draw(seed, np.arange(n_particles // 2), step, p)
            return np.concatenate([half, -half])
        out = np.asarray(self.generator(step, n_particles, p, seed), dtype=float)
        if out.shape != (n_particles, p):
            raise ConfigurationError(f"custom driver returned shape {out.shape}, expected {(n_particles, p)}")
        return out


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    positions: np.ndarray
    weights: np.ndarray
    step_index: int = 0
    seed: int = 0

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def estimate(self, kernel: MollifierKernel, time: float) -> DensityEstimate:
        return DensityEstimate(self.positions, self.weights, kernel, time)


@dataclass(eq=False)
class Trajectory:
    """Recorded snapshots; ``weight_sums[k]`` is kept for every step."""

    times: np.ndarray
    positions: list[np.ndarray]
    weights: list[np.ndarray]
    weight_sums: np.ndarray
    kernel: MollifierKernel
    grid: TimeGrid

    @property
    def final(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions[-1], self.weights[-1]

    def final_estimate(self) -> DensityEstimate:
        x, w = self.final
        return DensityEstimate(x, w, self.kernel, self.grid.horizon)


def init_ensemble(model: Model, n_particles: int, seed: int) -> ParticleEnsemble:
    """Draw i.i.d. starting points (particle ``j`` from stream ``j``), unit weights."""
    if n_particles < 1:
        raise ConfigurationError(f"need at least one particle, got {n_particles}")
    x = model.init.sample(seed, np.arange(n_particles))
    if not np.all(np.isfinite(x)):
        raise SamplingError("initial law produced non-finite positions")
    return ParticleEnsemble(np.ascontiguousarray(x), np.ones(n_particles), 0, seed)


def _first_bad(arr: np.ndarray) -> int | None:
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def step(
    ensemble: ParticleEnsemble,
    model: Model,
    kernel: MollifierKernel,
    grid: TimeGrid,
    driver: BrownianDriver,
    weight_rule: str = "left",
) -> ParticleEnsemble:
    """Advance one grid step.

    ``weight_rule="left"`` evaluates the weighting term at the old position
    and old estimate. ``"trapezoid"`` averages it with a predictor evaluation
    at the new position; it is an exploration option only.
    """
    k = ensemble.step_index
    if k >= grid.n_steps:
        raise ConfigurationError(f"step index {k} already at the end of a {grid.n_steps}-step grid")
    x, w = ensemble.positions, ensemble.weights
    n = x.shape[0]
    t = grid.node(k)
    dt = grid.dt
    z = kde_eval_batch(DensityEstimate(x, w, kernel, t), x)

    phi = model.phi(t, x, z)
    g = model.g(t, x, z)
    lam = model.lam(t, x, z)
    for name, arr in (("phi", phi), ("g", g), ("lambda", lam)):
        j = _first_bad(arr)
        if j is not None:
            raise NumericalBlowupError(f"non-finite {name}", j, k)

    eps = driver.normals(k + 1, n, model.p, ensemble.seed)
    x_new = x + np.matmul(phi, eps[:, :, None])[:, :, 0] * math.sqrt(dt) + g * dt
    j = _first_bad(x_new)
    if j is not None:
        raise NumericalBlowupError("non-finite position", j, k)

    w_new = w * np.exp(lam * dt)
    if weight_rule == "trapezoid":
        t1 = grid.node(k + 1)
        z1 = kde_eval_batch(DensityEstimate(x_new, w_new, kernel, t1), x_new)
        lam1 = model.lam(t1, x_new, z1)
        w_new = w * np.exp(0.5 * (lam + lam1) * dt)
    elif weight_rule != "left":
        raise ConfigurationError(f"unknown weight rule {weight_rule!r}")
    j = _first_bad(w_new)
    if j is not None or not np.all(w_new > 0):
        raise NumericalBlowupError("weight left (0, inf)", j if j is not None else int(np.argmin(w_new)), k)
    return ParticleEnsemble(x_new, w_new, k + 1, ensemble.seed)


def run(
    model: Model,
    kernel: MollifierKernel,
    grid: TimeGrid,
    driver: BrownianDriver,
    n_particles: int,
    seed: int,
    record: str = "final",
    weight_rule: str = "left",
) -> Trajectory:
    """Initialise and apply ``grid.n_steps`` steps."""
    if record not in ("final", "full"):
        raise ConfigurationError(f"record must be 'final' or 'full', got {record!r}")
    if kernel.d != model.d:
        raise ConfigurationError(f"kernel dimension {kernel.d} does not match model dimension {model.d}")
    driver.check_size(n_particles)
    ens = init_ensemble(model, n_particles, seed)
    positions = [ens.positions]
    weights = [ens.weights]
    sums = [math.fsum(ens.weights)]
    for _ in range(grid.n_steps):
        ens = step(ens, model, kernel, grid, driver, weight_rule)
        sums.append(math.fsum(ens.weights))
        if record == "full":
            positions.append(ens.positions)
            weights.append(ens.weights)
    if record == "final":
        positions, weights = [ens.positions], [ens.weights]
        times = np.array([grid.horizon if grid.n_steps else 0.0])
    else:
        times = grid.nodes
    return Trajectory(times, positions, weights, np.array(sums), kernel, grid)


def complexity_estimate(n_particles: int, n_steps: int, n_queries: int = 0) -> int:
    """Kernel evaluations: ``n N^2`` for the dynamics plus ``Q N`` at the end."""
    return n_steps * n_particles * n_particles + n_queries * n_particles
