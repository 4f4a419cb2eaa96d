import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advad.schedule import constraint_radius, make_schedule

mpmath.mp.dps = 60


def mp_alphas(T, beta_min, beta_max):
    """Extended-precision cumulative product oracle."""
    if T == 1:
        betas = [mpmath.mpf(beta_min)]
    else:
        lo, hi = mpmath.mpf(beta_min), mpmath.mpf(beta_max)
        betas = [lo + (hi - lo) * i / (T - 1) for i in range(T)]
    alphas = [mpmath.mpf(1)]
    for b in betas:
        alphas.append(alphas[-1] * (1 - b))
    return alphas


def test_single_step_closed_form():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alpha[0] == 1.0
    assert s.alpha[1] == 0.5
    # sqrt(0.5)/sqrt(0.5) - 0 = 1
    assert s.lam[1] == pytest.approx(1.0, abs=1e-15)


def test_alpha_matches_extended_precision_product():
    s = make_schedule(1000, 1e-4, 0.02)
    oracle = mp_alphas(1000, 1e-4, 0.02)
    for t in (1, 10, 100, 500, 1000):
        rel = abs(s.alpha[t] - float(oracle[t])) / float(oracle[t])
        assert rel < 1e-12, f"t={t}: rel err {rel}"


def test_telescoping_identity_default():
    s = make_schedule(1000)
    total = s.lam[1:].sum()
    target = np.sqrt(1.0 - s.alpha[1000]) / np.sqrt(s.alpha[1000])
    assert abs(total - target) / target <= 1e-6


@pytest.mark.parametrize("T,bmin,bmax", [
    (1, 0.5, 0.5), (10, 1e-4, 0.02), (25, 1e-3, 0.05), (100, 1e-4, 0.02),
    (1000, 1e-4, 0.02), (1000, 1e-5, 0.001), (50, 0.01, 0.3),
])
def test_schedule_invariants_grid(T, bmin, bmax):
    s = make_schedule(T, bmin, bmax)
    assert s.alpha[0] == 1.0
    assert np.all(np.diff(s.alpha) < 0), "alpha must strictly decrease"
    assert np.all(s.alpha[1:] > 0)
    assert np.all(s.lam[1:] > 0), "lambda_t must be positive"
    total = s.lam[1:].sum()
    assert abs(total - s.lambda_total) / s.lambda_total <= 1e-6
    # noise-to-signal ratio strictly increasing, so prefix sums increase
    assert np.all(np.diff(s.nsr) > 0)


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 400),
       bmin=st.floats(1e-6, 0.05),
       spread=st.floats(0.0, 0.3))
def test_schedule_invariants_property(T, bmin, spread):
    bmax = min(bmin + spread, 0.9)
    s = make_schedule(T, bmin, bmax)
    assert np.all(np.diff(s.alpha) < 0)
    assert np.all(s.lam[1:] > 0)
    assert abs(s.lam[1:].sum() - s.lambda_total) <= 1e-6 * s.lambda_total


def test_budget_consistency():
    # rho * sum(lambda) recovers the image-space budget
    for T in (10, 100, 1000):
        s = make_schedule(T)
        xi = 2 * 8 / 255
        rho = constraint_radius(s, xi).rho
        assert abs(rho * s.lam[1:].sum() - xi) <= 1e-6 * xi


def test_constraint_radius_zero_budget():
    s = make_schedule(10)
    assert constraint_radius(s, 0.0).rho == 0.0


def test_constraint_radius_half_alpha():
    s = make_schedule(1, 0.5, 0.5)       # alpha_T = 0.5 => factor is 1
    assert constraint_radius(s, 0.1).rho == pytest.approx(0.1, abs=1e-15)


def test_constraint_radius_against_oracle():
    s = make_schedule(1000, 1e-4, 0.02)
    xi = 2 * 8 / 255
    got = constraint_radius(s, xi).rho
    a = mp_alphas(1000, 1e-4, 0.02)[1000]
    want = float(mpmath.sqrt(a) / mpmath.sqrt(1 - a) * mpmath.mpf(xi))
    assert abs(got - want) / want < 1e-12


@pytest.mark.parametrize("T,bmin,bmax", [
    (0, 1e-4, 0.02), (-3, 1e-4, 0.02), (10, 0.0, 0.02),
    (10, -0.1, 0.02), (10, 0.05, 0.01), (10, 0.5, 1.0),
])
def test_make_schedule_rejects_bad_args(T, bmin, bmax):
    with pytest.raises(ValueError):
        make_schedule(T, bmin, bmax)


def test_constraint_radius_rejects_negative():
    with pytest.raises(ValueError):
        constraint_radius(make_schedule(5), -0.1)


def test_schedule_summary_serialization():
    s = make_schedule(100, 1e-4, 0.02)
    d = s.summary()
    assert d == {"T": 100, "beta_min": 1e-4, "beta_max": 0.02,
                 "alpha_T": s.alpha_T}
