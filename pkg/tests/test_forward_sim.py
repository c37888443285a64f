import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ergodic_hjb.core_model import ControlProblem
from ergodic_hjb.forward_sim import (
    BlowUpError,
    EmpiricalMeasure,
    TiltSpec,
    estimate_contraction,
    estimate_invariant_measure,
    estimate_second_moment,
    fit_decay_slope,
    fit_moment_bound,
    simulate_closed_loop,
    simulate_paths,
    write_jumps_csv,
    write_paths_csv,
)
from ergodic_hjb.grid import Grid
from ergodic_hjb.pde_solver import Policy


def euler_ou_moments(x0, sigma2, dt, n):
    # [DERIVED] exact law of the Euler chain X' = (1 - dt) X + sigma sqrt(dt) N
    r = 1.0 - dt
    return x0 * r**n, sigma2 * dt * (1 - r ** (2 * n)) / (1 - r * r)


def test_euler_ou_mean_and_variance(singleton):
    ens = simulate_paths(singleton, [1.5], [0.0], 0.01, 1.0, 20_000, seed=2)
    mean, var = euler_ou_moments(1.5, 2.0, 0.01, 100)
    xt = ens.X[-1, :, 0]
    assert abs(xt.mean() - mean) <= 4 * xt.std() / np.sqrt(len(xt))
    assert xt.var(ddof=1) == pytest.approx(var, rel=0.04)
    m2, se = estimate_second_moment(ens, 1.0)
    assert abs(m2 - (mean**2 + var)) <= 4 * se


def test_same_seed_same_paths_any_worker_count(two_control):
    a = simulate_paths(two_control, [0.0], [1.0], 0.05, 1.0, 300, seed=9, block_size=64)
    b = simulate_paths(two_control, [0.0], [1.0], 0.05, 1.0, 300, seed=9, block_size=64, workers=3)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.regime_index, b.regime_index)
    np.testing.assert_array_equal(a.jump_time, b.jump_time)
    c = simulate_paths(two_control, [0.0], [1.0], 0.05, 1.0, 300, seed=10, block_size=64)
    assert not np.array_equal(a.X, c.X)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 200))
def test_jump_log_matches_regime_path(two_control, seed, n):
    ens = simulate_paths(two_control, [0.0], [-1.0], 0.1, 2.0, n, seed=seed, block_size=37)
    assert ens.regime_index.shape == (21, n)
    for p in range(min(n, 5)):
        for t, a in ens.jump_log(p):
            k = ens.time_index(t)
            assert ens.regimes[k, p, 0] == a[0]
    assert ens.jump_counts().sum() == len(ens.jump_time)
    assert np.all(ens.tilt_weight == 1.0)


def test_jump_rate(two_control):
    dt, T = 0.01, 5.0
    ens = simulate_paths(two_control, [0.0], [1.0], dt, T, 4000, seed=4)
    counts = ens.jump_counts()
    expected = round(T / dt) * -np.expm1(-two_control.intensity_total * dt)  # [DERIVED] Bernoulli per step
    assert abs(counts.mean() - expected) <= 4 * counts.std() / np.sqrt(len(counts))


def test_tilted_weights_are_unbiased(two_control):
    dt, T = 0.01, 5.0
    tilt = TiltSpec.constant(2.0, 1)
    ens = simulate_paths(two_control, [0.0], [1.0], dt, T, 4000, tilt=tilt, seed=4)
    w = ens.tilt_weight[-1]
    assert ens.tilted and np.all(w > 0)
    assert abs(w.mean() - 1.0) <= 4 * w.std() / np.sqrt(len(w))
    counts = ens.jump_counts()
    # jumps happen twice as often under the tilt; weighting restores the untilted mean
    p, p_nu = -np.expm1(-2.0 * dt), -np.expm1(-4.0 * dt)
    assert counts.mean() == pytest.approx(round(T / dt) * p_nu, rel=0.05)
    weighted = w * counts
    assert abs(weighted.mean() - round(T / dt) * p) <= 4 * weighted.std() / np.sqrt(len(w))


def test_tilt_range_checked(two_control):
    with pytest.raises(ValueError, match="leaves"):
        simulate_paths(two_control, [0.0], [1.0], 0.1, 1.0, 10, tilt=TiltSpec.constant(0.5, 1))
    with pytest.raises(ValueError, match="leaves"):
        simulate_paths(two_control, [0.0], [1.0], 0.1, 1.0, 10, tilt=TiltSpec(lambda t, a: 1.0 + 3.0 * t, 2))
    with pytest.raises(ValueError):
        TiltSpec.constant(1.0, 0)


def test_input_validation(two_control):
    with pytest.raises(ValueError):
        simulate_paths(two_control, [0.0], [0.5], 0.1, 1.0, 10)
    with pytest.raises(ValueError):
        simulate_paths(two_control, [0.0], [1.0], 0.0, 1.0, 10)
    with pytest.raises(ValueError):
        simulate_paths(two_control, [0.0], [1.0], 0.1, 1.0, 0)
    ens = simulate_paths(two_control, [0.0], [1.0], 0.1, 1.0, 10)
    with pytest.raises(ValueError, match="time grid"):
        ens.time_index(0.05)


def test_blowup_detected():
    unstable = ControlProblem(
        dim_x=1, controls=[0.0], drift=lambda x, a: 5.0 * x, diffusion=lambda x, a: np.ones((len(x), 1, 1)),
        running_cost=lambda x, a, y: np.zeros(len(x)), data_h=lambda x: np.zeros(len(x)), gamma=1.0, lip_b_sigma=5.0, lip_f=1.0,
    )
    with pytest.raises(BlowUpError):
        simulate_paths(unstable, [1.0], [0.0], 0.01, 5.0, 10, blowup_radius=100.0)
    with pytest.raises(BlowUpError):
        simulate_closed_loop(unstable, 0, [1.0], 0.01, 500, 10, blowup_radius=100.0)


def test_contraction_matches_exact_euler_factor(singleton):
    dt = 0.01
    est = estimate_contraction(singleton, [2.0], [0.5], [0.0], dt, [0.0, 1.0, 2.0], 100, seed=1)
    for t, m, se in est:
        assert m == pytest.approx(2.25 * (1 - dt) ** (2 * round(t / dt)), rel=1e-10)
        assert se == pytest.approx(0.0, abs=1e-12)
    assert fit_decay_slope(est) == pytest.approx(2 * np.log(1 - dt) / dt, rel=1e-8)
    with pytest.raises(ValueError):
        estimate_contraction(singleton, [1.0], [1.0], [0.0], dt, [1.0], 10)
    with pytest.raises(ValueError):
        fit_decay_slope([(0.0, 1.0, 0.0)])


def test_contraction_with_regime_dependent_drift(two_control):
    # the additive control term cancels in the difference
    est = estimate_contraction(two_control, [1.0], [-1.0], [1.0], 0.01, [0.0, 1.0], 500, seed=2)
    assert est[1][1] == pytest.approx(4.0 * 0.99**200, rel=1e-10)


def test_moment_bound(singleton):
    ens = simulate_paths(singleton, [3.0], [0.0], 0.01, 3.0, 2000, seed=3)
    C = fit_moment_bound(ens)
    assert 0.9 <= C <= 1.1  # E|X_t|^2 peaks at t = 0 with value 9 = 0.9 (1 + 9)


def test_invariant_measure_under_sign_feedback(two_control):
    # [DERIVED] sign feedback: stationary density proportional to exp(-(|x| - 1)^2)
    dens = lambda x: np.exp(-((abs(x) - 1.0) ** 2))
    z = integrate.quad(dens, -np.inf, np.inf)[0]
    m2 = integrate.quad(lambda x: x * x * dens(x), -np.inf, np.inf)[0] / z
    g = Grid([(-8.0, 8.0)], 0.01)
    pol = Policy(g, (g.points[:, 0] > 0).astype(np.int64), two_control.controls)
    meas = estimate_invariant_measure(two_control, pol, 6.0, 20_000, 0.005, 200, seed=8, n_chains=500)
    assert abs(meas.second_moment - m2) <= 4 * meas.second_moment_se
    assert abs(meas.mean[0]) <= 4 * meas.mean_se[0]
    assert meas.integrate(lambda x: np.ones(len(x))) == pytest.approx(1.0)


def test_closed_loop_cost_integral_is_left_point(singleton):
    out = simulate_closed_loop(singleton, None, [1.0], 0.5, 1, 3, running_cost=True)
    np.testing.assert_allclose(out["cost_integral"], 0.5)
    with pytest.raises(ValueError):
        simulate_closed_loop(singleton, 3, [1.0], 0.5, 1, 3)
    with pytest.raises(ValueError, match="invalid control"):
        simulate_closed_loop(singleton, lambda x: np.full(len(x), 2), [1.0], 0.5, 1, 3)


def test_empirical_measure_validation():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 1)), np.array([0.7, 0.7]), np.zeros(1), 0.0)


def test_csv_writers_round_trip(two_control, tmp_path):
    ens = simulate_paths(two_control, [0.3], [1.0], 0.1, 0.5, 4, seed=1)
    write_paths_csv(ens, tmp_path / "paths.csv")
    write_jumps_csv(ens, tmp_path / "jumps.csv")
    rows = list(csv.reader(open(tmp_path / "paths.csv")))
    assert rows[0] == ["path", "t", "x_1", "regime", "tilt_weight"]
    assert len(rows) == 1 + 4 * 6
    xs = np.array([float(r[2]) for r in rows[1:]]).reshape(4, 6).T
    np.testing.assert_array_equal(xs, ens.X[:, :, 0])
    jumps = list(csv.reader(open(tmp_path / "jumps.csv")))
    assert jumps[0] == ["path", "t", "regime"] and len(jumps) == 1 + len(ens.jump_time)
