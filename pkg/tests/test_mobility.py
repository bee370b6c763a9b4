import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semidot.domain_fields import GridDomain, make_potentials
from semidot.mobility import (Mobility, MobilityError, check_assumptions, dtheta1, dtheta_log_da,
                              singular_integral, theta_eval, theta_log)

pos = st.floats(1e-8, 1e8)


def log_mean_oracle(a, b):
    a, b = mpmath.mpf(a), mpmath.mpf(b)
    if a == b:
        return a
    return (a - b) / (mpmath.log(a) - mpmath.log(b))


def test_theta_log_examples():
    assert theta_log(1.0, 1.0) == 1.0
    assert theta_log(0.0, 1.0) == 0.0
    assert theta_log(1.0, 0.0) == 0.0
    assert theta_log(1.0, np.e) == pytest.approx(np.e - 1.0, rel=1e-15)
    with pytest.raises(MobilityError):
        theta_log(-1.0, 1.0)


@settings(max_examples=300, deadline=None)
@given(pos, pos)
def test_theta_log_matches_high_precision(a, b):
    mpmath.mp.dps = 40
    assert theta_log(a, b) == pytest.approx(float(log_mean_oracle(a, b)), rel=2e-14)


@pytest.mark.parametrize("eps", [1e-3, 1e-7, 1e-9, 1e-12, 0.0])
def test_theta_log_near_diagonal(eps):
    mpmath.mp.dps = 50
    a, b = 2.0, 2.0 * (1 + eps)
    assert theta_log(a, b) == pytest.approx(float(log_mean_oracle(a, b)), rel=1e-14)


@settings(max_examples=300, deadline=None)
@given(pos, pos, st.floats(1e-4, 1e4))
def test_theta_log_mean_inequalities_and_homogeneity(a, b, lam):
    t = theta_log(a, b)
    assert min(a, b) * (1 - 1e-14) <= t <= max(a, b) * (1 + 1e-14)
    assert np.sqrt(a * b) * (1 - 1e-14) <= t <= 0.5 * (a + b) * (1 + 1e-14)
    assert theta_log(b, a) == t
    assert theta_log(lam * a, lam * b) == pytest.approx(lam * t, rel=1e-13)


def test_dtheta_diagonal_and_examples():
    assert dtheta_log_da(1.0, 1.0) == 0.5
    mpmath.mp.dps = 40
    fd = mpmath.diff(lambda x: log_mean_oracle(x, mpmath.e), 1)
    assert dtheta_log_da(1.0, np.e) == pytest.approx(float(fd), rel=1e-13)
    with pytest.raises(MobilityError):
        dtheta_log_da(0.0, 1.0)


def test_dtheta_against_central_differences():
    rng = np.random.default_rng(7)
    a = np.exp(rng.uniform(-5, 5, 1000))
    b = a * np.exp(rng.uniform(-4, 4, 1000))
    h = 1e-6 * a
    fd = (theta_log(a + h, b) - theta_log(a - h, b)) / (2 * h)
    d = dtheta_log_da(a, b)
    assert np.max(np.abs(fd - d) / np.abs(d)) <= 1e-6


def test_series_branch_is_continuous():
    b = 1.0
    for delta in (0.99e-6, 1.01e-6):
        a = np.exp(delta)
        mpmath.mp.dps = 50
        fd = mpmath.diff(lambda x: log_mean_oracle(x, 1), mpmath.e ** mpmath.mpf(delta))
        assert dtheta_log_da(a, b) == pytest.approx(float(fd), rel=1e-9)


def test_theta_eval_examples():
    d = GridDomain(1, 1.0, 5)
    pot0 = make_potentials(d, 2, {"kind": "zero"}, {"kind": "zero"})
    mi = Mobility.mass_independent(pot0)
    assert theta_eval(mi, (2,), 0, 1, 0.3, 7.0) == 1.0
    assert dtheta1(mi, (2,), 0, 1, 0.3, 7.0) == 0.0
    lm = Mobility.log_mean(pot0)
    assert theta_eval(lm, (2,), 0, 1, 0.4, 0.4) == pytest.approx(0.4, rel=1e-15)
    assert dtheta1(lm, (2,), 0, 1, 1.0, 1.0) == pytest.approx(0.5, rel=1e-15)
    pot = make_potentials(d, 2, {"kind": "zero", "shift": [0.0, 1.0]})
    assert theta_eval(Mobility.log_mean(pot), (0,), 0, 1, 1.0, np.exp(-1.0)) == pytest.approx(1.0, rel=1e-15)


def test_theta_field_shapes_and_values():
    d = GridDomain(1, 1.0, 7)
    pot = make_potentials(d, 3, {"kind": "quadratic", "shift": [0.0, 0.2, 0.4]}, {"kind": "quadratic"})
    f = np.random.default_rng(0).uniform(0.1, 1.0, (7, 3))
    th = Mobility.mass_independent(pot).theta(f)
    assert th.shape == (7, 3, 3)
    assert np.allclose(th[:, 0, 1], np.exp(-pot.W))
    lm = Mobility.log_mean(pot).theta(f)
    u = f * np.exp(pot.V)
    assert lm[3, 0, 2] == pytest.approx(theta_log(u[3, 0], u[3, 2]), rel=1e-15)
    assert np.array_equal(lm, np.swapaxes(lm, 1, 2))
    d1 = Mobility.log_mean(pot).dtheta1(f)
    h = 1e-7
    g = f.copy()
    g[4, 1] += h
    fd = (Mobility.log_mean(pot).theta(g)[4, 1, 2] - lm[4, 1, 2]) / h
    assert d1[4, 1, 2] == pytest.approx(fd, rel=1e-5)


def test_singular_integral_matches_quadrature_oracle():
    mpmath.mp.dps = 30
    oracle = mpmath.quad(lambda t: 1 / mpmath.sqrt(log_mean_oracle(1 - t, t)), [0, 0.5, 1])
    assert singular_integral(theta_log) == pytest.approx(float(oracle), rel=1e-8)
    # theta = 1: integral is 1
    assert singular_integral(lambda s, t: np.ones(np.broadcast(s, t).shape)) == pytest.approx(1.0, rel=1e-13)


@pytest.mark.parametrize("kind", ["mass_independent", "log_mean"])
def test_check_assumptions_pass(kind):
    d = GridDomain(1, 3.0, 32)
    pot = make_potentials(d, 2, {"kind": "quadratic", "shift": [0.0, 0.5]}, {"kind": "quadratic"})
    rep = check_assumptions(Mobility.from_spec({"kind": kind}, pot), np.random.default_rng(1))
    assert rep.passed, rep.checks
    assert all(np.isfinite(c) for c in rep.constants.values())


def test_from_spec_rejects_unknown():
    d = GridDomain(1, 1.0, 5)
    pot = make_potentials(d, 1, {"kind": "zero"})
    with pytest.raises(MobilityError):
        Mobility.from_spec({"kind": "harmonic"}, pot)
