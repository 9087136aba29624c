import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qmlopt.quantile_est import (empirical_quantile, normal_quantile_cov, sectioning_panel,
                                 validate_estimators)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_order_statistic_convention():
    x = np.arange(1.0, 11.0)[::-1]
    assert empirical_quantile(x, 0.5) == 5.0   # floor(5) -> 5th order statistic
    assert empirical_quantile(x, 0.95) == 9.0  # floor(9.5) -> 9th
    assert empirical_quantile(x, 0.01) == 1.0  # clamped to the minimum
    assert np.array_equal(empirical_quantile(x, [0.5, 0.95]), [5.0, 9.0])


def test_empty_sample_rejected():
    with pytest.raises(ValueError):
        empirical_quantile([], 0.5)


def test_exact_product_not_lost_to_rounding():
    # 0.6 * 10 is 6.000000000000001 or 5.999...; either way the 6th statistic
    assert empirical_quantile(np.arange(10.0), 0.6) == 5.0


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.integers(1, 200), elements=finite),
       st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_quantile_monotone_in_level(x, a, b):
    lo, hi = sorted((a, b))
    assert empirical_quantile(x, lo) <= empirical_quantile(x, hi)


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.integers(20, 300), elements=finite), st.integers(2, 10))
def test_panel_covariance_is_psd(x, n_b):
    panel = sectioning_panel(x, [0.3, 0.6, 0.9], n_b)
    eig = np.linalg.eigvalsh(panel.noise_cov)
    assert eig.min() >= -1e-9 * max(1.0, eig.max())
    assert np.allclose(panel.noise_cov, panel.noise_cov.T)


@settings(max_examples=40, deadline=None)
@given(arrays(float, st.integers(20, 200), elements=finite), finite, st.floats(0.1, 10))
def test_panel_affine_equivariance(x, shift, scale):
    p = sectioning_panel(x, [0.5, 0.9])
    q = sectioning_panel(scale * x + shift, [0.5, 0.9])
    assert np.allclose(q.point_estimates, scale * p.point_estimates + shift, rtol=1e-9, atol=1e-6)
    assert np.allclose(q.noise_cov, scale**2 * p.noise_cov, rtol=1e-7, atol=1e-6 * scale**2 * (1 + np.abs(x).max()) ** 2)


def test_panel_hand_computed():
    # two batches [0..4], [5..9]; level 0.6: full = x(6) = 5, batches x(3) = 2 and 7
    x = np.arange(10.0)
    p = sectioning_panel(x, [0.6], n_b=2)
    assert p.point_estimates[0] == 5.0
    assert p.noise_cov[0, 0] == pytest.approx(((2 - 5) ** 2 + (7 - 5) ** 2) / 2)
    assert p.n_c == 5 and p.n_used == 10


def test_remainder_excluded_from_batches():
    x = np.arange(13.0)
    p = sectioning_panel(x, [0.5], n_b=2)
    assert p.n_c == 6
    assert p.point_estimates[0] == 5.0  # floor(6.5) = 6th statistic of all 13


def test_low_confidence_flag():
    assert sectioning_panel(np.arange(2.0), [0.6], n_b=2).low_confidence
    assert not sectioning_panel(np.arange(100.0), [0.6], n_b=10).low_confidence


def test_invalid_batching():
    with pytest.raises(ValueError):
        sectioning_panel(np.arange(10.0), [0.5], n_b=1)
    with pytest.raises(ValueError):
        sectioning_panel(np.arange(3.0), [0.5], n_b=5)


def test_normal_cov_oracle_values():
    assert normal_quantile_cov(0.6, 0.95) == pytest.approx(0.7530, abs=5e-4)
    assert normal_quantile_cov(0.5, 0.5) == pytest.approx(np.pi / 2, rel=1e-12)
    assert normal_quantile_cov(0.95, 0.6) == normal_quantile_cov(0.6, 0.95)


def test_validate_estimators_small_run_reports():
    checks = validate_estimators(n=2000, n_panels=50, seed=1)
    assert [c.name for c in checks] == ["cov(0.6,0.95)", "var(0.5)"]
    assert all(np.isfinite(c.ratio) for c in checks)
