"""Confidence intervals and the paired t-test against reference values."""

import math

import numpy as np
import pytest
from scipy import stats as sps

from flatshot.errors import ConfigError, ShapeMismatchError
from flatshot.stats import ci95, paired_ttest, student_t_two_sided_p


def test_t_cdf_matches_scipy_reference_grid():
    worst = 0.0
    for df in (1, 2, 4, 9, 19, 99, 599):
        for t in (-5.0, -2.3, -1.0, -0.1, 0.0, 0.5, 1.1767, 2.0, 4.5, 10.0):
            mine = student_t_two_sided_p(t, df)
            ref = 2.0 * sps.t.sf(abs(t), df)
            worst = max(worst, abs(mine - ref))
    assert worst < 1e-6


def test_reference_table_example():
    # d = a - b = [1, -1, 2, 0, 1]: t = 0.6 / (sqrt(1.3)/sqrt(5)) = 1.17670
    a = np.array([1.0, -1.0, 2.0, 0.0, 1.0])
    b = np.zeros(5)
    result = paired_ttest(a, b)
    assert result.df == 4
    assert result.t == pytest.approx(1.176696810829104, abs=1e-9)
    assert result.p == pytest.approx(0.304558784680535, abs=1e-6)
    assert result.p == pytest.approx(0.305, abs=1e-3)
    assert not result.significant and not result.degenerate


def test_constant_shift_is_significant():
    b = np.linspace(0.0, 1.0, 10)
    a = b + 0.5 + 0.001 * np.sin(np.arange(10))  # tiny jitter keeps variance non-zero
    result = paired_ttest(a, b)
    assert result.t > 100
    assert result.significant


def test_identical_samples_flag_degenerate():
    a = np.array([0.2, 0.4, 0.6])
    result = paired_ttest(a, a.copy())
    assert result.degenerate
    assert result.t == 0.0 and result.p == 1.0 and not result.significant


def test_constant_nonzero_difference_flag_degenerate():
    a = np.array([1.0, 2.0, 3.0])
    result = paired_ttest(a + 0.5, a)
    assert result.degenerate and result.significant
    assert math.isinf(result.t) and result.p == 0.0


def test_ttest_input_validation():
    with pytest.raises(ShapeMismatchError):
        paired_ttest(np.zeros(3), np.zeros(4))
    with pytest.raises(ConfigError):
        paired_ttest(np.zeros(1), np.zeros(1))


def test_ci95_constant_vector():
    mean, half = ci95(np.full(7, 0.42))
    assert mean == pytest.approx(0.42)
    assert half == 0.0


def test_ci95_two_point_example():
    mean, half = ci95(np.array([0.0, 1.0]))
    assert mean == pytest.approx(0.5)
    # 1.96 * std([0,1], ddof=1) / sqrt(2) = 1.96 * 0.5 = 0.98
    assert half == pytest.approx(0.98, abs=1e-12)


def test_ci95_scales_linearly():
    x = np.array([0.1, 0.5, 0.9, 0.3])
    mean, half = ci95(x)
    mean_s, half_s = ci95(100.0 * x)
    assert mean_s == pytest.approx(100.0 * mean)
    assert half_s == pytest.approx(100.0 * half)


def test_ci95_needs_two_samples():
    with pytest.raises(ConfigError):
        ci95(np.array([1.0]))
