import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dipolescope.lm import FitProblem, finite_difference_jacobian, format_value_error, lm_fit


def line(p, x):
    return p[0] * x + p[1]


def decay(p, t):
    return p[0] * np.exp(-p[1] * t)


def decay_jac(p, t):
    e = np.exp(-p[1] * t)
    return np.column_stack([e, -p[0] * t * e])


T = np.linspace(0, 5, 100)


def test_exact_linear_fit():
    x = np.linspace(-3, 7, 25)
    r = lm_fit(FitProblem(line, x, 2.5 * x - 1.25, 1.0, [0.0, 0.0], names=["a", "b"]))
    assert r.converged
    assert r["a"] == pytest.approx(2.5, abs=1e-10)
    assert r["b"] == pytest.approx(-1.25, abs=1e-10)


def test_linear_covariance_matches_normal_equations():
    x = np.linspace(0, 1, 11)
    sigma = 0.1 + x
    r = lm_fit(FitProblem(line, x, 3 * x, sigma, [1.0, 1.0]))
    A = np.column_stack([x, np.ones_like(x)]) / sigma[:, None]
    assert r.covariance == pytest.approx(np.linalg.inv(A.T @ A), rel=1e-5)
    assert np.allclose(r.covariance, r.covariance.T)
    assert np.all(np.linalg.eigvalsh(r.covariance) >= 0)
    assert r.stderr == pytest.approx(np.sqrt(np.diag(r.covariance)))


def test_exponential_coverage():
    # 1% noise on 100 points; the rate should fall within 3 standard errors
    # for nearly every seed and within 1 for about 68%
    rng = np.random.default_rng(2024)
    clean = decay([1.0, 0.8], T)
    z = []
    for _ in range(500):
        y = clean + 0.01 * rng.standard_normal(T.size)
        r = lm_fit(FitProblem(decay, T, y, 0.01, [0.5, 0.3], log_params=[True, True]))
        assert r.converged
        z.append((r.params[1] - 0.8) / r.stderr[1])
    z = np.abs(np.array(z))
    assert np.mean(z < 3) >= 0.98
    assert 0.61 <= np.mean(z < 1) <= 0.75


def test_reduced_chi2_near_one():
    rng = np.random.default_rng(5)
    y = decay([1.0, 0.8], T) + 0.01 * rng.standard_normal(T.size)
    r = lm_fit(FitProblem(decay, T, y, 0.01, [0.5, 0.3]))
    assert r.reduced_chi2 == pytest.approx(1.0, abs=0.2)


def test_degenerate_parameters_reported():
    # only a + b is identifiable
    x = np.linspace(0, 1, 20)
    r = lm_fit(FitProblem(lambda p, s: (p[0] + p[1]) * s, x, 2 * x, 1.0, [0.3, 0.1]))
    assert r.singular
    assert "singular" in r.message
    assert np.all(np.isinf(r.covariance))
    assert r.to_dict()["stderr"] == [None, None]


def test_iteration_limit_flagged():
    y = decay([1.0, 0.8], T)
    r = lm_fit(FitProblem(decay, T, y, 0.01, [20.0, 9.0]), max_iter=2)
    assert not r.converged
    assert r.iterations == 2
    assert "maximum iterations" in r.message


def test_rejects_bad_problems():
    with pytest.raises(ValueError):
        FitProblem(line, [0.0], [1.0], 1.0, [1.0, 2.0])
    with pytest.raises(ValueError):
        FitProblem(line, [0.0, 1.0], [1.0, 2.0], [1.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        FitProblem(decay, T, T, 1.0, [-1.0, 1.0], log_params=[True, False])
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        lm_fit(FitProblem(lambda p, t: np.log(p[0]) * t, T, T, 1.0, [-1.0]))


def test_log_parameters_stay_positive():
    # data pulling the rate towards zero never drives it negative
    y = np.full(T.size, 1.0)
    r = lm_fit(FitProblem(decay, T, y, 0.01, [1.0, 2.0], log_params=[True, True]))
    assert r.params[1] > 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(0.05, 3.0))
def test_fd_jacobian_matches_analytic(a, k):
    prob = FitProblem(decay, T, decay([a, k], T), 1.0, [a, k])
    fd = finite_difference_jacobian(prob, [a, k])
    exact = decay_jac([a, k], T)
    assert np.max(np.abs(fd - exact)) < 1e-4 * np.max(np.abs(exact))


def test_analytic_and_fd_fits_agree():
    rng = np.random.default_rng(9)
    y = decay([2.0, 0.5], T) + 0.01 * rng.standard_normal(T.size)
    a = lm_fit(FitProblem(decay, T, y, 0.01, [1.0, 1.0], jacobian=decay_jac))
    b = lm_fit(FitProblem(decay, T, y, 0.01, [1.0, 1.0]))
    assert a.params == pytest.approx(b.params, rel=1e-6)
    assert a.stderr == pytest.approx(b.stderr, rel=1e-4)


def test_against_scipy_least_squares():
    optimize = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(13)
    sigma = 0.02 * (1 + T)
    y = decay([3.0, 1.2], T) + sigma * rng.standard_normal(T.size)
    ours = lm_fit(FitProblem(decay, T, y, sigma, [1.0, 0.5]))
    ref = optimize.least_squares(lambda p: (y - decay(p, T)) / sigma, [1.0, 0.5], method="lm",
                                 xtol=1e-15, ftol=1e-15, gtol=1e-15)
    assert ours.params == pytest.approx(ref.x, rel=1e-6)
    assert ours.chi2 == pytest.approx(float(ref.fun @ ref.fun), rel=1e-9)


def test_format_value_error():
    assert format_value_error(15.2, 2.1) == "15(2)"
    assert format_value_error(275.3, 4.2) == "275(4)"
    assert format_value_error(1.1e-4, 1.2e-5) == "1.10(12)e-04"
    assert format_value_error(2.3e-4, 0.2e-4) == "2.3(2)e-04"
    assert format_value_error(0.5, 0.0) == "0.5"


def test_json_and_summary():
    x = np.linspace(0, 1, 10)
    r = lm_fit(FitProblem(line, x, x + 1, 0.1, [0.0, 0.0], names=["a", "b"]))
    d = json.loads(r.to_json())
    assert d["names"] == ["a", "b"]
    assert len(d["covariance"]) == 2 and d["converged"] is True
    assert math.isclose(d["params"][0], 1.0, abs_tol=1e-9)
    text = r.summary({"a": (1e3, "mHz")})
    assert text.splitlines()[0].startswith("a = 1000(")
    assert "converged" in text.splitlines()[-1]
