"""Coefficients, regularity constants and initial law of the McKean-type SDE.

Coefficient callables are vectorised over particles: with ``x`` of shape
``(n, d)`` and ``z`` of shape ``(n,)`` they return

* ``phi(t, x, z)`` -> ``(n, d, p)``  diffusion matrix
* ``g(t, x, z)``   -> ``(n, d)``     drift
* ``lam(t, x, z)`` -> ``(n,)``       weighting (zero-order) term
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from weighted_ips import rng


class ConfigurationError(ValueError):
    """Inconsistent or invalid configuration."""


@dataclass(frozen=True)
class Coefficients:
    phi: Callable
    g: Callable
    lam: Callable
    d: int
    p: int


@dataclass(frozen=True)
class AssumptionConstants:
    """Declared bounds. ``None`` means "not declared", and is then not checked.

    ``z_max`` is the range ``[0, z_max]`` of the density argument over which
    the bounds were established, when narrower than ``m_k * exp(T m_lambda)``.
    """

    m_lambda: float = 0.0
    l_lambda: float | None = None
    l_phi: float | None = None
    l_g: float | None = None
    l_k: float | None = None
    m_k: float | None = None
    z_max: float | None = None

    def __post_init__(self):
        for name in ("m_lambda", "l_lambda", "l_phi", "l_g", "l_k", "m_k", "z_max"):
            value = getattr(self, name)
            if value is None:
                continue
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"{name} must be finite and nonnegative, got {value}")


@dataclass(frozen=True)
class InitialLaw:
    """Law of the initial particle positions.

    ``sampler(seed, ids)`` returns one point per id, shape ``(len(ids), d)``.
    It must be a pure function of ``(seed, id)`` so that particle ``j`` keeps
    its starting point whatever the ensemble size.
    """

    sampler: Callable[[int, np.ndarray], np.ndarray]
    d: int
    density: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    box: tuple[np.ndarray, np.ndarray] | None = None

    def sample(self, seed: int, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        out = np.asarray(self.sampler(seed, ids), dtype=float)
        return out.reshape(ids.shape[0], self.d)

    @classmethod
    def point_mass(cls, x0) -> InitialLaw:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))

        def sampler(seed, ids):
            return np.broadcast_to(x0, (len(ids), x0.shape[0])).copy()

        return cls(sampler=sampler, d=x0.shape[0])

    @classmethod
    def gaussian(cls, mean, cov) -> InitialLaw:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        d = mean.shape[0]
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(d)
        chol = np.linalg.cholesky(cov)
        inv = np.linalg.inv(cov)
        norm = 1.0 / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))

        def sampler(seed, ids):
            z = rng.normals(seed, rng.INIT, ids, 0, d)
            return mean + z @ chol.T

        def density(x):
            y = np.atleast_2d(x) - mean
            return norm * np.exp(-0.5 * np.einsum("ni,ij,nj->n", y, inv, y))

        half = 8.0 * np.sqrt(np.diag(cov))
        return cls(sampler=sampler, d=d, density=density, box=(mean - half, mean + half))


@dataclass(frozen=True)
class Model:
    coeffs: Coefficients
    consts: AssumptionConstants
    init: InitialLaw

    @property
    def d(self) -> int:
        return self.coeffs.d

    @property
    def p(self) -> int:
        return self.coeffs.p

    def phi(self, t, x, z) -> np.ndarray:
        return np.asarray(self.coeffs.phi(t, np.atleast_2d(x), np.atleast_1d(z)), dtype=float)

    def g(self, t, x, z) -> np.ndarray:
        return np.asarray(self.coeffs.g(t, np.atleast_2d(x), np.atleast_1d(z)), dtype=float)

    def lam(self, t, x, z) -> np.ndarray:
        return np.asarray(self.coeffs.lam(t, np.atleast_2d(x), np.atleast_1d(z)), dtype=float)


def make_model(coeffs: Coefficients, consts: AssumptionConstants, init: InitialLaw) -> Model:
    """Validate dimensions by probing the coefficients, then freeze them."""
    d, p = coeffs.d, coeffs.p
    if int(d) != d or d < 1 or int(p) != p or p < 1:
        raise ConfigurationError(f"dimensions must be positive integers, got d={d}, p={p}")
    if init.d != d:
        raise ConfigurationError(f"initial law lives in R^{init.d}, coefficients in R^{d}")
    x = np.zeros((2, d))
    z = np.zeros(2)
    model = Model(coeffs, consts, init)
    shapes = {
        "phi": (model.phi(0.0, x, z).shape, (2, d, p)),
        "g": (model.g(0.0, x, z).shape, (2, d)),
        "lam": (model.lam(0.0, x, z).shape, (2,)),
    }
    for name, (got, want) in shapes.items():
        if got != want:
            raise ConfigurationError(f"{name} returned shape {got[1:]}, expected {want[1:]}")
    return model


@dataclass
class AssumptionReport:
    violations: list[str] = field(default_factory=list)
    max_abs_lambda: float = 0.0
    lipschitz_estimates: dict[str, float] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)


def _quotients(fn, t, x, z, h):
    """Largest centred difference quotient along each space axis and along z."""
    n, d = x.shape
    best = np.zeros(n)
    for i in range(d + 1):
        xp, xm, zp, zm = x.copy(), x.copy(), z.copy(), z.copy()
        if i < d:
            xp[:, i] += h
            xm[:, i] -= h
        else:
            zp += h
            zm -= h
        diff = np.asarray(fn(t, xp, zp)) - np.asarray(fn(t, xm, zm))
        q = np.sqrt(np.sum(diff.reshape(n, -1) ** 2, axis=1)) / (2 * h)
        best = np.maximum(best, q)
    return float(np.max(best))


def check_assumptions(
    model: Model,
    n_samples: int,
    box,
    seed: int = 0,
    horizon: float = 1.0,
    z_max: float | None = None,
    step: float = 1e-5,
    tolerance: float = 0.05,
) -> AssumptionReport:
    """Randomised spot-check of the declared bounds.

    Samples ``(t, x, z)`` uniformly in ``[0, horizon] x box x [0, z_max]``.
    ``z_max`` defaults to the declared ``consts.z_max``, else to
    ``m_k * exp(horizon * m_lambda)``, the largest value the density estimate
    can reach.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (model.d,)) for b in box)
    consts = model.consts
    if z_max is None:
        z_max = consts.z_max
    if z_max is None:
        m_k = consts.m_k if consts.m_k is not None else 1.0
        z_max = m_k * math.exp(horizon * consts.m_lambda)
    u = rng.uniforms(seed, rng.CHECKS, np.arange(n_samples), 0, model.d + 2)
    t = u[:, 0] * horizon
    x = lo + (hi - lo) * u[:, 1 : 1 + model.d]
    z = u[:, -1] * z_max

    report = AssumptionReport()
    lam = np.concatenate([model.lam(ti, xi[None], zi[None]) for ti, xi, zi in zip(t, x, z)])
    report.max_abs_lambda = float(np.max(np.abs(lam)))
    if report.max_abs_lambda > consts.m_lambda:
        report.violations.append(
            f"|lambda| reaches {report.max_abs_lambda:.6g} > declared m_lambda={consts.m_lambda:.6g}"
        )

    for name, fn, declared in (
        ("lambda", model.lam, consts.l_lambda),
        ("phi", model.phi, consts.l_phi),
        ("g", model.g, consts.l_g),
    ):
        if declared is None:
            continue
        est = max(_quotients(fn, ti, xi[None], np.array([zi]), step) for ti, xi, zi in zip(t, x, z))
        report.lipschitz_estimates[name] = est
        if est > declared * (1 + tolerance):
            report.violations.append(f"Lipschitz quotient of {name} is {est:.6g} > declared {declared:.6g}")

    for s in np.linspace(0.0, horizon, 11):
        origin = np.zeros((1, model.d))
        zero = np.zeros(1)
        if not (np.all(np.isfinite(model.phi(s, origin, zero))) and np.all(np.isfinite(model.g(s, origin, zero)))):
            report.violations.append(f"phi or g not finite at (t={s:.3g}, 0, 0)")
            break
    return report
