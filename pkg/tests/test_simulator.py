from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate

from conftest import gaussian_model
from weighted_ips import rng
from weighted_ips.kernel import MollifierKernel
from weighted_ips.model import ConfigurationError, InitialLaw, make_model, AssumptionConstants, Coefficients
from weighted_ips.simulator import (
    BrownianDriver,
    NumericalBlowupError,
    ParticleEnsemble,
    SamplingError,
    TimeGrid,
    complexity_estimate,
    init_ensemble,
    run,
    step,
)
from weighted_ips.testcases import barenblatt_coefficients, barenblatt_model, initial_density


def test_time_grid():
    grid = TimeGrid(1.0, 10)
    assert grid.dt == 0.1
    assert grid.nodes[0] == 0 and grid.nodes[-1] == 1.0
    assert np.all(np.diff(grid.nodes) > 0)
    assert grid.floor_node(0.35) == pytest.approx(0.3)
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 3)
    with pytest.raises(ConfigurationError):
        TimeGrid(1.0, -1)


def test_point_mass_init():
    model = make_model(gaussian_model().coeffs, AssumptionConstants(), InitialLaw.point_mass([1.5]))
    ens = init_ensemble(model, 7, seed=0)
    assert np.all(ens.positions == 1.5) and np.all(ens.weights == 1) and ens.step_index == 0


def test_init_deterministic(benchmark_params):
    model = barenblatt_model(benchmark_params)
    a = init_ensemble(model, 100, seed=4)
    b = init_ensemble(model, 100, seed=4)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_barenblatt_init_moments(benchmark_params):
    model = barenblatt_model(benchmark_params)
    x = init_ensemble(model, 10_000, seed=1).positions[:, 0]
    R = 1.01 * benchmark_params.support_radius(2.0)
    dens = lambda s: float(initial_density(np.array([[s]]), benchmark_params)[0])
    m1 = integrate.quad(lambda s: s * dens(s), -R, R)[0]
    m2 = integrate.quad(lambda s: s * s * dens(s), -R, R)[0]
    var = m2 - m1**2
    assert abs(x.mean() - m1) < 3 * math.sqrt(var / x.size)
    fourth = integrate.quad(lambda s: (s - m1) ** 4 * dens(s), -R, R)[0]
    assert abs(x.var() - var) < 3 * math.sqrt((fourth - var**2) / x.size)


def test_sampler_failure_reported():
    def broken(seed, ids):
        return np.full((len(ids), 1), np.nan)

    model = make_model(gaussian_model().coeffs, AssumptionConstants(), InitialLaw(broken, 1))
    with pytest.raises(SamplingError):
        init_ensemble(model, 3, 0)


def test_zero_dynamics_static():
    model = gaussian_model()
    traj = run(model, MollifierKernel(0.5), TimeGrid(1.0, 5), BrownianDriver(), 20, seed=2, record="full")
    for x, w in zip(traj.positions, traj.weights):
        np.testing.assert_array_equal(x, traj.positions[0])
        assert np.all(w == 1)


def test_constant_drift_shifts():
    model = gaussian_model(d=2, drift=[1.0, 0.0])
    grid = TimeGrid(1.0, 4)
    ens = init_ensemble(model, 10, 0)
    new = step(ens, model, MollifierKernel(0.5, 2), grid, BrownianDriver())
    np.testing.assert_allclose(new.positions[:, 0] - ens.positions[:, 0], 0.25, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(new.positions[:, 1], ens.positions[:, 1])


def test_two_particle_scalar_recomputation(benchmark_params):
    model = barenblatt_model(benchmark_params)
    kern = MollifierKernel(0.4)
    grid = TimeGrid(1.0, 10)
    eps = np.array([[0.7], [-1.3]])
    driver = BrownianDriver("custom", generator=lambda k, n, p, s: eps)
    ens = ParticleEnsemble(np.array([[0.2], [-0.5]]), np.array([1.0, 1.1]))
    new = step(ens, model, kern, grid, driver)

    p = benchmark_params
    C = p.C
    dt = 0.1
    for j in range(2):
        xj = ens.positions[j, 0]
        z = sum(ens.weights[i] * math.exp(-0.5 * ((xj - ens.positions[i, 0]) / 0.4) ** 2) for i in range(2))
        z /= 2 * 0.4 * math.sqrt(2 * math.pi)
        f = C * math.exp(-0.5 * p.A[0, 0] * xj * xj)
        s = (z / f) ** (p.m - 1)
        a = p.A[0, 0]
        x_new = xj + math.sqrt(s) * math.sqrt(dt) * eps[j, 0] - s * a * xj * dt
        lam = s * 0.5 * ((a * xj) ** 2 - a)
        assert new.positions[j, 0] == pytest.approx(x_new, rel=1e-13)
        assert new.weights[j] == pytest.approx(ens.weights[j] * math.exp(lam * dt), rel=1e-13)


def test_frozen_snapshot_independent_of_order(benchmark_params):
    model = barenblatt_model(benchmark_params)
    kern = MollifierKernel(0.4)
    grid = TimeGrid(1.0, 10)
    ens = init_ensemble(model, 60, 3)
    perm = rng.random_words(0, rng.CHECKS, np.arange(60), 0, 1)[:, 0].argsort()
    eps = rng.normals(3, rng.NOISE, np.arange(60), 1, 1)
    fwd = step(ens, model, kern, grid, BrownianDriver("custom", generator=lambda k, n, p, s: eps))
    shuffled = ParticleEnsemble(ens.positions[perm], ens.weights[perm], 0, 3)
    back = step(shuffled, model, kern, grid, BrownianDriver("custom", generator=lambda k, n, p, s: eps[perm]))
    np.testing.assert_allclose(back.positions, fwd.positions[perm], rtol=1e-14)
    np.testing.assert_allclose(back.weights, fwd.weights[perm], rtol=1e-14)


def test_blowup_names_particle_and_step():
    def lam(t, x, z):
        out = np.zeros(x.shape[0])
        out[x[:, 0] > 0.5] = np.inf
        return out

    coeffs = Coefficients(
        phi=lambda t, x, z: np.zeros((x.shape[0], 1, 1)),
        g=lambda t, x, z: np.zeros((x.shape[0], 1)),
        lam=lam,
        d=1,
        p=1,
    )
    model = make_model(coeffs, AssumptionConstants(), InitialLaw(lambda s, ids: np.array([[0.0], [1.0], [0.0]])[ids], 1))
    with pytest.raises(NumericalBlowupError) as err:
        run(model, MollifierKernel(1.0), TimeGrid(1.0, 2), BrownianDriver(), 3, 0)
    assert err.value.particle == 1 and err.value.step == 0


def test_n_zero_trajectory():
    traj = run(gaussian_model(), MollifierKernel(1.0), TimeGrid(1.0, 0), BrownianDriver(), 5, 0, record="full")
    assert len(traj.positions) == 1
    np.testing.assert_array_equal(traj.weight_sums, [5.0])


def test_conservative_weights_exact(conservative_params):
    model = barenblatt_model(conservative_params)
    traj = run(model, MollifierKernel(0.4), TimeGrid(1.0, 5), BrownianDriver(), 200, 1, record="full")
    assert all(np.all(w == 1.0) for w in traj.weights)
    assert np.all(traj.weight_sums == 200)


def test_full_record_length(benchmark_params):
    traj = run(barenblatt_model(benchmark_params), MollifierKernel(0.4), TimeGrid(1.0, 6), BrownianDriver(), 30, 0, record="full")
    assert len(traj.positions) == 7 and len(traj.times) == 7


def test_run_deterministic(benchmark_params):
    args = (barenblatt_model(benchmark_params), MollifierKernel(0.4), TimeGrid(1.0, 5), BrownianDriver(), 100, 7)
    a, b = run(*args), run(*args)
    np.testing.assert_array_equal(a.final[0], b.final[0])
    np.testing.assert_array_equal(a.final[1], b.final[1])


def test_antithetic_increments_negated():
    drv = BrownianDriver("antithetic")
    for k in range(1, 6):
        e = drv.normals(k, 10, 2, seed=3)
        np.testing.assert_array_equal(e[5:], -e[:5])
        np.testing.assert_array_equal(e[:5], BrownianDriver().normals(k, 5, 2, seed=3))


def test_antithetic_odd_rejected():
    with pytest.raises(ConfigurationError):
        run(gaussian_model(), MollifierKernel(1.0), TimeGrid(1.0, 2), BrownianDriver("antithetic"), 5, 0)


def test_antithetic_mean_preserved():
    model = make_model(gaussian_model(phi=1.0).coeffs, AssumptionConstants(), InitialLaw.point_mass([0.0]))
    traj = run(model, MollifierKernel(1.0), TimeGrid(1.0, 8), BrownianDriver("antithetic"), 40, 2, record="full")
    for x in traj.positions:
        np.testing.assert_array_equal(x[20:], -x[:20])
        assert np.all(x[:20] + x[20:] == 0.0)


def test_refined_driver_sums_fine_path():
    coarse = BrownianDriver(refine=4).normals(2, 6, 1, seed=1)
    fine = sum(BrownianDriver().normals(k, 6, 1, seed=1) for k in range(5, 9)) / 2.0
    np.testing.assert_allclose(coarse, fine, rtol=1e-15)


def test_noise_independent_of_ensemble_size(benchmark_params):
    small = BrownianDriver().normals(3, 10, 1, seed=5)
    large = BrownianDriver().normals(3, 1000, 1, seed=5)
    np.testing.assert_array_equal(small, large[:10])


def test_one_step_displacement_scales_with_dt():
    model = make_model(gaussian_model(phi=0.8, drift=[0.3]).coeffs, AssumptionConstants(), InitialLaw.gaussian([0.0], 1.0))
    worst = []
    for n in (10, 20, 40):
        traj = run(model, MollifierKernel(0.5), TimeGrid(1.0, n), BrownianDriver(), 4000, 1, record="full")
        worst.append(max(np.mean((b - a) ** 2) for a, b in zip(traj.positions, traj.positions[1:])))
    slope = np.polyfit(np.log([0.1, 0.05, 0.025]), np.log(worst), 1)[0]
    assert abs(slope - 1) < 0.1


def test_weight_bound(benchmark_params):
    model = barenblatt_model(benchmark_params, MollifierKernel(0.4))
    grid = TimeGrid(1.0, 10)
    traj = run(model, MollifierKernel(0.4), grid, BrownianDriver(), 300, 0, record="full")
    M = model.consts.m_lambda
    for t, w in zip(traj.times, traj.weights):
        assert np.all(np.abs(np.log(w)) <= t * M + 1e-12)


def test_trapezoid_rule_runs(benchmark_params):
    traj = run(barenblatt_model(benchmark_params), MollifierKernel(0.4), TimeGrid(1.0, 4), BrownianDriver(), 50, 0,
               weight_rule="trapezoid")
    assert np.all(traj.final[1] > 0)
    with pytest.raises(ConfigurationError):
        run(barenblatt_model(benchmark_params), MollifierKernel(0.4), TimeGrid(1.0, 4), BrownianDriver(), 50, 0,
            weight_rule="midpoint")


@pytest.mark.parametrize("N,n,Q,expected", [(100, 10, 0, 10**5), (5000, 10, 0, 2.5e8), (10**4, 10, 0, 10**9)])
def test_complexity(N, n, Q, expected):
    assert complexity_estimate(N, n, Q) == expected
