"""Integrated variance of a static kernel estimate drawn i.i.d. from v(T, .).

For i.i.d. samples the pointwise variance is ``((K^2 * v) - (K * v)^2) / N``.
Its integral shows how far the bandwidth grid is from the small-bandwidth
regime where the variance scales like ``1 / (N eps^d)``.
"""

from __future__ import annotations

import numpy as np

from weighted_ips.analysis import fit_rate
from weighted_ips.testcases import BarenblattParams, exact_solution


def integrated_variance(eps: float, params: BarenblattParams, t: float = 1.0, n: int = 1) -> float:
    R = params.support_radius(t + 2.0)
    y = np.linspace(-R, R, 4001)
    dy = y[1] - y[0]
    v = exact_solution(t, y[:, None], params)
    x = np.linspace(-R - 8 * eps, R + 8 * eps, 4001)
    K = np.exp(-0.5 * ((x[:, None] - y[None, :]) / eps) ** 2) / (np.sqrt(2 * np.pi) * eps)
    first = (K * v).sum(axis=1) * dy
    second = (K**2 * v).sum(axis=1) * dy
    return float((second - first**2).sum() * (x[1] - x[0])) / n


def main() -> None:
    params = BarenblattParams()
    for grid in ([0.2, 0.3, 0.45, 0.67, 1.0], [0.02, 0.03, 0.05, 0.08, 0.12]):
        pts = [(e, integrated_variance(e, params)) for e in grid]
        for e, val in pts:
            print(f"eps {e:5.2f}  N * variance {val:.5g}")
        print(f"slope {fit_rate(pts).slope:.3f}\n")


if __name__ == "__main__":
    main()
