"""Confidence intervals and the paired t-test.

The two-sided p-value of the t statistic comes from the regularised
incomplete beta function, evaluated with the continued-fraction scheme
(modified Lentz), so the library needs no statistical tables at runtime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError

_BETACF_MAX_ITER = 300
_BETACF_EPS = 3e-16
_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ConfigError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T_df| >= |t|) for the Student t distribution."""
    if df < 1:
        raise ConfigError("degrees of freedom must be >= 1")
    if math.isinf(t):
        return 0.0
    return betainc_regularized(0.5 * df, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    """Outcome of a paired t-test at the 0.05 level."""

    t: float
    df: int
    p: float
    significant: bool
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "df": self.df,
            "p": self.p,
            "significant": self.significant,
            "degenerate": self.degenerate,
        }


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test of ``a`` against ``b``.

    Zero-variance differences flag the result as degenerate rather than
    raising: identical inputs give t = 0, p = 1; a constant non-zero
    shift gives an infinite statistic.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError("paired samples must be 1-D arrays of equal length")
    n = a.size
    if n < 2:
        raise ConfigError("need at least two pairs")
    d = a - b
    df = n - 1
    sd = float(d.std(ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, df=df, p=1.0, significant=False, degenerate=True)
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t=t, df=df, p=0.0, significant=True, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = student_t_two_sided_p(t, df)
    return TTestResult(t=t, df=df, p=p, significant=p < 0.05)


def ci95(accuracies) -> tuple[float, float]:
    """Mean and 95% half-width 1.96 * sample std / sqrt(T)."""
    x = np.asarray(accuracies, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ConfigError("ci95 needs a 1-D sample of size >= 2")
    half = 1.96 * float(x.std(ddof=1)) / math.sqrt(x.size)
    return float(x.mean()), half
