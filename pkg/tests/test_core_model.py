import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ergodic_hjb.builtins import BUILTINS, PolynomialCost, problem_from_spec
from ergodic_hjb.core_model import (
    ASSUMPTIONS,
    ControlProblem,
    cost_depends_on_y,
    dissipativity_margin,
    make_ou_problem,
    validate_problem,
)


def quad_cost(x, a, y):
    return x[:, 0] ** 2


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_builtins_satisfy_assumptions(name):
    rep = validate_problem(BUILTINS[name].problem(), n_samples=4096)
    assert rep.ok, rep.margins
    assert set(rep.passed) == set(ASSUMPTIONS)
    assert rep.worst_dissipativity_quotient <= -1.0 + 1e-9


def test_ou_vectorized_coefficients(two_control):
    x = np.linspace(-2, 2, 5)[:, None]
    np.testing.assert_allclose(two_control.b(x, 0)[:, 0], -x[:, 0] - 1.0)
    np.testing.assert_allclose(two_control.b(x, 1)[:, 0], -x[:, 0] + 1.0)
    assert two_control.sigma(x, 0).shape == (5, 1, 1)
    np.testing.assert_allclose(two_control.f(x, 1, 0.0), -x[:, 0] ** 2 + 2 * x[:, 0])
    assert two_control.control_rate == pytest.approx(1.0)


def test_control_index(two_control):
    assert two_control.control_index([1.0]) == 1
    assert two_control.control_index(-1.0) == 0
    with pytest.raises(ValueError, match="not in the control list"):
        two_control.control_index([0.5])
    with pytest.raises(ValueError, match="wrong length"):
        two_control.control_index([1.0, 1.0])


def test_duplicate_controls_rejected():
    with pytest.raises(ValueError, match="duplicate-free"):
        make_ou_problem(-1.0, 0.0, 1.0, [0.0, 0.0], 1.0, quad_cost)


@pytest.mark.parametrize("attr", ["gamma", "lip_f", "intensity_total"])
def test_nonpositive_constants_rejected(attr):
    kwargs = dict(dim_x=1, controls=[0.0], drift=lambda x, a: -x, diffusion=lambda x, a: np.ones((len(x), 1, 1)),
                  running_cost=quad_cost, data_h=lambda x: np.zeros(len(x)), gamma=1.0, lip_b_sigma=1.0, lip_f=1.0)
    kwargs[attr] = 0.0
    with pytest.raises(ValueError, match=attr):
        ControlProblem(**kwargs)


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(0.1, 5.0), excess=st.floats(0.05, 3.0))
def test_unstable_drift_rejected(rate, excess):
    # claimed rate larger than the true rate of B = -rate
    with pytest.raises(ValueError, match="not uniformly stable"):
        make_ou_problem(-rate, 0.0, 1.0, [0.0], rate + excess, quad_cost)


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(0.2, 5.0), x=st.floats(-50, 50), xp=st.floats(-50, 50), shift=st.floats(-3, 3))
def test_dissipativity_margin_of_ou_equals_minus_rate(rate, x, xp, shift):
    if abs(x - xp) < 1e-3:
        return
    p = make_ou_problem(-rate, shift, 1.3, [0.0], rate, quad_cost)
    assert dissipativity_margin(p, [x], [xp]) == pytest.approx(-rate, rel=1e-9)


def test_validate_reports_violations_without_raising():
    # f = x^2 is not Lipschitz with constant 1 on the sampling box
    p = make_ou_problem(-1.0, 0.0, 1.0, [0.0], 1.0, quad_cost, lip_f=1.0)
    rep = validate_problem(p, n_samples=512)
    assert not rep.ok
    assert not rep.passed["H2_lipschitz_f"]
    assert rep.passed["H1_dissipativity"]


def test_validate_is_seeded():
    p = BUILTINS["ou_two_control"].problem()
    assert validate_problem(p, 300, seed=4).margins == validate_problem(p, 300, seed=4).margins


def test_y_dependence_and_kappa():
    spec = {"family": "ou", "controls": [0.0], "B": -1.0, "D": 0.0, "Sigma": 1.0, "gamma": 1.0,
            "cost": {"x2": 1.0, "y": -0.5}, "lip_f": 25.0}
    p = problem_from_spec(spec)
    assert cost_depends_on_y(p)
    assert p.kappa == pytest.approx(0.5)
    rep = validate_problem(p, n_samples=512)
    assert rep.passed["H2_monotone_y"] and rep.passed["H3_strict_decay"]
    assert not cost_depends_on_y(BUILTINS["ou_singleton_quadratic"].problem())


def test_increasing_in_y_violates_monotonicity():
    spec = {"family": "ou", "controls": [0.0], "B": -1.0, "D": 0.0, "Sigma": 1.0, "gamma": 1.0,
            "cost": {"x2": 1.0, "y": 0.5}, "lip_f": 25.0}
    rep = validate_problem(problem_from_spec(spec), n_samples=512)
    assert not rep.passed["H2_monotone_y"]


def test_unknown_cost_key_rejected():
    with pytest.raises(ValueError):
        PolynomialCost.from_dict({"x3": 1.0})


def test_custom_polynomial_family():
    spec = {"family": "custom-polynomial", "drift_coeffs": [0.0, -1.0, 0.0, -1.0], "drift_control": 1.0, "sigma": 1.0,
            "controls": [-1.0, 1.0], "gamma": 1.0, "cost": {"x2": -1.0, "ax": 2.0}, "lip_f": 22.0}
    p = problem_from_spec(spec)
    x = np.array([[2.0]])
    assert p.b(x, 1)[0, 0] == pytest.approx(-2.0 - 8.0 + 1.0)
    assert validate_problem(p, n_samples=1024).passed["H1_dissipativity"]
