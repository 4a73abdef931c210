import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitdiff.schedule import (
    COSINE_BETA_CLIP,
    alpha_bar_at_time,
    alpha_bar_continuous,
    beta_sde,
    make_cosine_schedule,
    make_linear_schedule,
)

# Hand-computed reference values for the 4-step linear schedule
# (beta_start=1e-4, beta_end=0.02), frozen from an independent calculation.
LIN4_BETAS = [0.0001, 0.006733333333333334, 0.013366666666666667, 0.02]
LIN4_ABAR = [0.9999, 0.99316734, 0.979892003222, 0.96029416315756]
LIN4_POSTVAR = [0.0, 9.85462957813289e-05, 0.004541968534955731, 0.010128484060311945]

# Same for the 4-step cosine schedule with offset 0.008.
COS4_BETAS = [0.1529878386730953, 0.41695808751199426, 0.7078587123971634, 0.999]
COS4_ABAR = [0.8470121613269047, 0.4938435904406378, 0.14427210238573585, 0.00014427210238573596]


def test_linear_schedule_matches_reference():
    s = make_linear_schedule(4)
    np.testing.assert_allclose(s.betas, LIN4_BETAS, rtol=1e-14)
    np.testing.assert_allclose(s.alphas, 1.0 - np.array(LIN4_BETAS), rtol=1e-14)
    np.testing.assert_allclose(s.alpha_bars, LIN4_ABAR, rtol=1e-12)
    np.testing.assert_allclose(s.posterior_variances, LIN4_POSTVAR, rtol=1e-12)
    assert s.kind == "linear"
    assert s.num_steps == 4


def test_cosine_schedule_matches_reference():
    s = make_cosine_schedule(4)
    np.testing.assert_allclose(s.betas, COS4_BETAS, rtol=1e-12)
    np.testing.assert_allclose(s.alpha_bars, COS4_ABAR, rtol=1e-12)
    assert s.kind == "cosine"


def test_cosine_beta_clip_applies():
    s = make_cosine_schedule(1000)
    assert s.betas.max() <= COSINE_BETA_CLIP
    assert s.betas[-1] == pytest.approx(COSINE_BETA_CLIP)


def test_first_posterior_variance_is_zero():
    for s in (make_linear_schedule(10), make_cosine_schedule(10)):
        assert s.posterior_variances[0] == 0.0
        assert (s.posterior_variances[1:] > 0.0).all()


def test_arrays_are_float64_and_readonly():
    s = make_linear_schedule(10)
    for name in ("betas", "alphas", "alpha_bars", "posterior_variances"):
        arr = getattr(s, name)
        assert arr.dtype == np.float64
        with pytest.raises(ValueError):
            arr[0] = 0.5


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=200),
    kind=st.sampled_from(["linear", "cosine"]),
)
def test_alpha_bar_strictly_decreasing(n, kind):
    s = make_linear_schedule(n) if kind == "linear" else make_cosine_schedule(n)
    assert (s.betas > 0).all() and (s.betas < 1).all()
    assert (np.diff(s.alpha_bars) < 0).all() or n == 1
    assert 0 < s.alpha_bars[-1] < 1
    # cumulative product consistency
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(1.0 - s.betas), rtol=1e-13)


def test_invalid_construction():
    with pytest.raises(ValueError):
        make_linear_schedule(0)
    with pytest.raises(ValueError):
        make_linear_schedule(10, beta_start=0.0)
    with pytest.raises(ValueError):
        make_linear_schedule(10, beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        make_cosine_schedule(10, offset=0.0)


def test_alpha_bar_at_time_convention():
    s = make_linear_schedule(4)
    assert alpha_bar_at_time(s, 0) == 1.0
    assert alpha_bar_at_time(s, 1) == pytest.approx(LIN4_ABAR[0], rel=1e-12)
    assert alpha_bar_at_time(s, 4) == pytest.approx(LIN4_ABAR[3], rel=1e-12)
    with pytest.raises(ValueError):
        alpha_bar_at_time(s, -1)
    with pytest.raises(ValueError):
        alpha_bar_at_time(s, 5)


def test_beta_sde_values():
    s = make_linear_schedule(4)
    # on-grid: t = 3/4 lands exactly on array index 2
    assert beta_sde(s, 0.75) == pytest.approx(4 * LIN4_BETAS[2], rel=1e-12)
    assert beta_sde(s, 1.0) == pytest.approx(4 * LIN4_BETAS[3], rel=1e-12)
    # halfway between indices 1 and 2, frozen reference value
    assert beta_sde(s, 0.625) == pytest.approx(0.0402, rel=1e-12)
    with pytest.raises(ValueError):
        beta_sde(s, 0.0)
    with pytest.raises(ValueError):
        beta_sde(s, 1.5)


def test_alpha_bar_continuous_values():
    s = make_linear_schedule(4)
    assert alpha_bar_continuous(s, 0.0) == 1.0
    assert alpha_bar_continuous(s, 1.0) == pytest.approx(LIN4_ABAR[3], rel=1e-12)
    assert alpha_bar_continuous(s, 0.625) == pytest.approx(0.9865296716109999, rel=1e-12)
    # below the first grid point it blends toward clean data
    lo = alpha_bar_continuous(s, 0.1)
    assert LIN4_ABAR[0] < lo < 1.0
    with pytest.raises(ValueError):
        alpha_bar_continuous(s, -0.1)


def test_beta_sde_interpolation_is_monotone_for_linear():
    s = make_linear_schedule(100)
    vals = [beta_sde(s, t) for t in np.linspace(0.02, 1.0, 50)]
    assert all(b - a >= -1e-12 for a, b in zip(vals, vals[1:]))
