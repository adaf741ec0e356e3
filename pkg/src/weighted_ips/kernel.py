"""Mollifier kernels and the exponentially weighted kernel density estimator.

The estimator is

    u(y) = (1/N) * sum_j w_j * K_eps(y - x_j),   K_eps(x) = eps**-d * phi(x / eps)

with ``w_j`` the multiplicative particle weights. Sums run over particles in a
fixed order with compensated accumulation, so results are bit-reproducible
and do not depend on how query points are batched.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numba
import numpy as np

from weighted_ips.model import ConfigurationError

_BLOCK = 16


@dataclass(frozen=True)
class MollifierKernel:
    """Scaled mollifier ``K_eps``.

    Parameters
    ----------
    epsilon : float
        Bandwidth, > 0.
    d : int
        Spatial dimension.
    base : {"gaussian", "custom"}
        Kernel family. ``"custom"`` requires ``profile``, the unit-bandwidth
        density evaluated on arrays of shape ``(..., d)``.
    sup_profile, lipschitz_profile : float, optional
        Sup norm and Lipschitz constant of a custom ``profile``.
    cutoff : float, optional
        Ignore particles farther than ``cutoff * epsilon`` from the query
        point. Off by default; a performance knob only.
    """

    epsilon: float
    d: int = 1
    base: str = "gaussian"
    profile: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    sup_profile: float | None = None
    lipschitz_profile: float | None = None
    cutoff: float | None = None

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigurationError(f"epsilon must be positive and finite, got {self.epsilon}")
        if int(self.d) != self.d or self.d < 1:
            raise ConfigurationError(f"dimension must be a positive integer, got {self.d}")
        if self.base not in ("gaussian", "custom"):
            raise ConfigurationError(f"unknown kernel family {self.base!r}")
        if self.base == "custom" and self.profile is None:
            raise ConfigurationError("custom kernel needs a profile function")
        if self.cutoff is not None and self.cutoff <= 0:
            raise ConfigurationError("cutoff must be positive")

    @property
    def m_k(self) -> float:
        """sup K_eps."""
        if self.base == "gaussian":
            return (2 * math.pi) ** (-self.d / 2) * self.epsilon ** (-self.d)
        if self.sup_profile is None:
            raise ConfigurationError("custom kernel has no declared sup bound")
        return self.sup_profile * self.epsilon ** (-self.d)

    @property
    def l_k(self) -> float:
        """sup |grad K_eps|."""
        if self.base == "gaussian":
            return (2 * math.pi) ** (-self.d / 2) * math.exp(-0.5) * self.epsilon ** (-(self.d + 1))
        if self.lipschitz_profile is None:
            raise ConfigurationError("custom kernel has no declared Lipschitz constant")
        return self.lipschitz_profile * self.epsilon ** (-(self.d + 1))

    def __call__(self, x) -> np.ndarray:
        """Evaluate ``K_eps`` at points of shape ``(..., d)``."""
        u = np.asarray(x, dtype=float) / self.epsilon
        if self.base == "gaussian":
            r2 = np.sum(u * u, axis=-1)
            return (2 * math.pi) ** (-self.d / 2) * np.exp(-0.5 * r2) * self.epsilon ** (-self.d)
        return np.asarray(self.profile(u), dtype=float) * self.epsilon ** (-self.d)


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """Frozen weighted KDE snapshot at grid time ``time``."""

    positions: np.ndarray
    weights: np.ndarray
    kernel: MollifierKernel
    time: float = 0.0

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos.reshape(-1, 1) if self.kernel.d == 1 else pos.reshape(1, -1)
        w = np.ascontiguousarray(self.weights, dtype=float)
        if pos.shape[0] == 0:
            raise ValueError("density estimate needs at least one particle")
        if pos.shape[1] != self.kernel.d:
            raise ValueError(f"positions have dimension {pos.shape[1]}, kernel has {self.kernel.d}")
        if w.shape != (pos.shape[0],):
            raise ValueError("one weight per particle required")
        if not np.all(w > 0):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def __call__(self, ys) -> np.ndarray:
        return kde_eval_batch(self, ys)


@numba.njit(cache=True)
def _neg_half_sq_dist(ys, xs, inv_eps, out):
    nq, d = ys.shape
    for q in range(nq):
        for j in range(xs.shape[0]):
            r2 = 0.0
            for k in range(d):
                t = (ys[q, k] - xs[j, k]) * inv_eps
                r2 += t * t
            out[q, j] = -0.5 * r2


@numba.njit(cache=True)
def _compensated_rows(terms, w, out):
    # four interleaved Kahan lanes over j, merged in a fixed order
    n = terms.shape[1]
    n4 = n - n % 4
    for q in range(terms.shape[0]):
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        c3 = 0.0
        for j in range(0, n4, 4):
            y = terms[q, j] * w[j] - c0
            t = s0 + y
            c0 = (t - s0) - y
            s0 = t
            y = terms[q, j + 1] * w[j + 1] - c1
            t = s1 + y
            c1 = (t - s1) - y
            s1 = t
            y = terms[q, j + 2] * w[j + 2] - c2
            t = s2 + y
            c2 = (t - s2) - y
            s2 = t
            y = terms[q, j + 3] * w[j + 3] - c3
            t = s3 + y
            c3 = (t - s3) - y
            s3 = t
        s = 0.0
        c = 0.0
        for v in (s0, -c0, s1, -c1, s2, -c2, s3, -c3):
            y = v - c
            t = s + y
            c = (t - s) - y
            s = t
        for j in range(n4, n):
            y = terms[q, j] * w[j] - c
            t = s + y
            c = (t - s) - y
            s = t
        out[q] = s


def _as_queries(ys, d: int) -> np.ndarray:
    ys = np.asarray(ys, dtype=float)
    if ys.ndim == 0:
        ys = ys.reshape(1, 1)
    elif ys.ndim == 1:
        ys = ys.reshape(-1, 1) if d == 1 else ys.reshape(1, -1)
    if ys.shape[-1] != d:
        raise ValueError(f"query points have dimension {ys.shape[-1]}, expected {d}")
    return np.ascontiguousarray(ys)


def _weighted_sums(est: DensityEstimate, ys: np.ndarray) -> np.ndarray:
    kern = est.kernel
    xs = est.positions
    w = est.weights
    out = np.empty(ys.shape[0])
    buf = np.empty((_BLOCK, xs.shape[0]))
    inv = 1.0 / kern.epsilon
    for s in range(0, ys.shape[0], _BLOCK):
        yb = ys[s : s + _BLOCK]
        tb = buf[: yb.shape[0]]
        if kern.base == "gaussian":
            _neg_half_sq_dist(yb, xs, inv, tb)
            np.exp(tb, out=tb)
        else:
            tb[...] = kern.profile((yb[:, None, :] - xs[None, :, :]) * inv)
        _compensated_rows(tb, w, out[s : s + yb.shape[0]])
    return out


def _weighted_sums_cutoff(est: DensityEstimate, ys: np.ndarray) -> np.ndarray:
    from scipy.spatial import cKDTree

    kern = est.kernel
    tree = cKDTree(est.positions)
    radius = kern.cutoff * kern.epsilon
    out = np.empty(ys.shape[0])
    inv = 1.0 / kern.epsilon
    for q, nbrs in enumerate(tree.query_ball_point(ys, radius)):
        idx = np.sort(np.asarray(nbrs, dtype=np.intp))
        if idx.size == 0:
            out[q] = 0.0
            continue
        xs = est.positions[idx]
        tb = np.empty((1, idx.size))
        if kern.base == "gaussian":
            _neg_half_sq_dist(ys[q : q + 1], xs, inv, tb)
            np.exp(tb, out=tb)
        else:
            tb[0] = kern.profile((ys[q] - xs) * inv)
        _compensated_rows(tb, np.ascontiguousarray(est.weights[idx]), out[q : q + 1])
    return out


def kde_eval_batch(est: DensityEstimate, ys) -> np.ndarray:
    """Evaluate the estimate at ``Q`` points, shape ``(Q, d)``."""
    ys = _as_queries(ys, est.kernel.d)
    if est.kernel.cutoff is None:
        sums = _weighted_sums(est, ys)
    else:
        sums = _weighted_sums_cutoff(est, ys)
    kern = est.kernel
    if kern.base == "gaussian":
        scale = (2 * math.pi) ** (-kern.d / 2) * kern.epsilon ** (-kern.d)
    else:
        scale = kern.epsilon ** (-kern.d)
    return sums * (scale / est.n_particles)


def kde_eval(est: DensityEstimate, y) -> float:
    """Evaluate the estimate at a single point."""
    y = np.asarray(y, dtype=float).reshape(1, est.kernel.d)
    return float(kde_eval_batch(est, y)[0])


def kde_lipschitz_bound(est: DensityEstimate, m_lambda: float | None = None) -> float:
    """Lipschitz constant dominating the estimate.

    With ``m_lambda`` the a-priori bound ``L_K * exp(t * m_lambda)`` is
    returned; otherwise ``L_K * max(weights)``, which is never larger.
    """
    l_k = est.kernel.l_k
    if m_lambda is None:
        return l_k * float(np.max(est.weights))
    return l_k * math.exp(est.time * m_lambda)
