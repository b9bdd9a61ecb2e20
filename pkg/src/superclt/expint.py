"""Integrals of exponentials over intervals and triangles, via divided differences of exp.

Every moment formula reduces to integrals of e^{-a s - b v} over [0, t] or over the
triangle {s, v >= 0, s + v <= t}. These are the first and second divided
differences of exp at scaled nodes, evaluated here without cancellation when
nodes coalesce (repeated eigenvalues, critical tuning 2 lambda_k = lambda_1).
"""
from __future__ import annotations

import math

_TAYLOR_SPREAD = 0.1
_TAYLOR_TERMS = 18


def phi1(z: float) -> float:
    """(e^z - 1)/z with the removable singularity filled in."""
    if z == 0.0:
        return 1.0
    return math.expm1(z) / z


def dd1(x0: float, x1: float) -> float:
    """First divided difference of exp: (e^{x1} - e^{x0})/(x1 - x0)."""
    hi, lo = (x0, x1) if x0 >= x1 else (x1, x0)
    return math.exp(hi) * phi1(lo - hi)


def dd2(x0: float, x1: float, x2: float) -> float:
    """Second divided difference of exp, i.e. the simplex integral of e^{x . u}."""
    a, b, c = sorted((x0, x1, x2), reverse=True)
    spread = a - c
    if spread < _TAYLOR_SPREAD:
        # e^c * sum_n h_n(a-c, b-c, 0)/(n+2)!, h_n = complete homogeneous polynomial
        d1, d2 = a - c, b - c
        total = 0.0
        hn_prev_powers = [1.0]     # d1^i d2^(n-i) for the current n
        fact = 2.0
        for n in range(_TAYLOR_TERMS):
            if n > 0:
                hn_prev_powers = [p * d2 for p in hn_prev_powers] + [hn_prev_powers[-1] * d1]
                fact *= n + 2
            total += sum(hn_prev_powers) / fact
        return math.exp(c) * total
    return (dd1(a, b) - dd1(b, c)) / spread


def interval_exp(c: float, t: float) -> float:
    """int_0^t e^{-c s} ds."""
    return t * dd1(-c * t, 0.0)


def conv_exp(a: float, b: float, t: float) -> float:
    """int_0^t e^{-a s - b (t - s)} ds."""
    return t * dd1(-a * t, -b * t)


def triangle_exp(a: float, b: float, t: float) -> float:
    """Double integral of e^{-a s - b v} over s, v >= 0, s + v <= t."""
    return t * t * dd2(-a * t, -b * t, 0.0)


def tail_exp(c: float) -> float:
    """int_0^inf e^{-c s} ds for c > 0."""
    if not c > 0:
        raise ValueError(f"divergent tail integral: decay rate {c:.6g} is not positive")
    return 1.0 / c

