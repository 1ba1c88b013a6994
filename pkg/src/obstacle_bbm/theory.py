"""Closed-form constants, radii and leading-order predictions.

All functions are pure. The principal Dirichlet eigenvalue of ``-1/2 Laplacian``
on a ball is obtained from the first positive zero of ``J_{d/2-1}``, which is
located by bisection on a 60-digit power series (no special-function library).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, localcontext
from functools import lru_cache

__all__ = [
    "ModelConstants",
    "DerivedConstants",
    "bessel_zero",
    "principal_eigenvalue",
    "unit_ball_volume",
    "derived_constants",
    "clearing_radius",
    "moderate_clearing_radius",
    "covering_scale",
    "predicted_log_mass",
    "confinement_log_asymptote",
    "lln_statistic",
]


@dataclass(frozen=True)
class ModelConstants:
    d: int
    nu: float
    beta: float

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be an integer >= 1, got {self.d!r}")
        if not self.nu > 0:
            raise ValueError(f"intensity nu must be > 0, got {self.nu!r}")
        if not self.beta > 0:
            raise ValueError(f"branching rate beta must be > 0, got {self.beta!r}")


@dataclass(frozen=True)
class DerivedConstants:
    omega_d: float
    lambda_d: float
    R0: float
    c_dnu: float
    R_cr: float


def _series_sign_part(order: Decimal, x: float, prec: int = 60) -> Decimal:
    """Sum_k (-x^2/4)^k / (k! (order+1)_k); J_order(x) is this times (x/2)^order / Gamma(order+1)."""
    with localcontext() as ctx:
        ctx.prec = prec
        q = -(Decimal(x) ** 2) / 4
        term = Decimal(1)
        total = Decimal(1)
        tiny = Decimal(10) ** (-(prec - 5))
        k = 0
        while True:
            k += 1
            term = term * q / (k * (k + order))
            total += term
            if abs(term) < tiny and k > abs(float(q)):
                break
        return total


@lru_cache(maxsize=None)
def bessel_zero(order2: int) -> float:
    """First positive zero of ``J_{order2/2}`` (``order2 >= -1``), to double precision."""
    if order2 < -1:
        raise ValueError("only orders >= -1/2 are supported")
    order = Decimal(order2) / 2
    step = 0.05
    lo = step
    f_lo = _series_sign_part(order, lo)
    hi = lo + step
    # coarse scan; (0, 20) covers d <= 30, beyond that the scan simply continues
    while True:
        f_hi = _series_sign_part(order, hi)
        if (f_lo > 0) != (f_hi > 0):
            break
        lo, f_lo = hi, f_hi
        hi += step
        if hi > 500:
            raise RuntimeError("no Bessel zero bracketed")
    while hi - lo > 1e-15:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        f_mid = _series_sign_part(order, mid)
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def principal_eigenvalue(d: int, r: float = 1.0) -> float:
    """Bottom Dirichlet eigenvalue of ``-1/2 Laplacian`` on ``B(0, r)`` in ``d`` dimensions."""
    if int(d) != d or d < 1:
        raise ValueError(f"dimension must be an integer >= 1, got {d!r}")
    if not r > 0:
        raise ValueError(f"radius must be > 0, got {r!r}")
    j = bessel_zero(int(d) - 2)
    return j * j / (2.0 * r * r)


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def derived_constants(mc: ModelConstants) -> DerivedConstants:
    omega = unit_ball_volume(mc.d)
    lam = principal_eigenvalue(mc.d, 1.0)
    R0 = (mc.d / (mc.nu * omega)) ** (1.0 / mc.d)
    c = lam * (mc.d / (mc.nu * omega)) ** (-2.0 / mc.d)
    return DerivedConstants(
        omega_d=omega,
        lambda_d=lam,
        R0=R0,
        c_dnu=c,
        R_cr=math.sqrt(lam / mc.beta),
    )


def _R0(d: int, nu: float) -> float:
    return (d / (nu * unit_ball_volume(d))) ** (1.0 / d)


def clearing_radius(variant: str, ell: float, c_param: float = 1.0, *, d: int, nu: float) -> float:
    """Almost-sure clearing radius in a cube of half-side ``ell``.

    ``propB``: ``R0 (log ell)^(1/d) - (log log ell)^2`` (can be negative).
    ``lemma1``: ``R0 / 5^(1/d) * (log(c ell))^(1/d)``.
    """
    R0 = _R0(d, nu)
    if variant == "propB":
        if not ell > 1:
            raise ValueError("propB radius needs ell > 1")
        L = math.log(ell)
        return R0 * L ** (1.0 / d) - math.log(L) ** 2
    if variant == "lemma1":
        if c_param < 1:
            raise ValueError("lemma1 radius needs c >= 1")
        if not ell * c_param > 1:
            raise ValueError("lemma1 radius needs c * ell > 1")
        return R0 / 5 ** (1.0 / d) * math.log(c_param * ell) ** (1.0 / d)
    raise ValueError(f"unknown clearing-radius variant {variant!r}")


def moderate_clearing_radius(t: float, mc: ModelConstants) -> float:
    if not t > math.e:
        raise ValueError(f"moderate clearing radius needs t > e, got {t!r}")
    R0 = _R0(mc.d, mc.nu)
    return (
        R0 / 3.0 / 5 ** (1.0 / mc.d) * (2.0 / 3.0) ** (1.0 / mc.d)
        * math.log(math.log(t)) ** (1.0 / mc.d)
    )


def covering_scale(t: float) -> float:
    if not t > 1:
        raise ValueError(f"covering scale needs t > 1, got {t!r}")
    return math.log(t) ** (2.0 / 3.0)


def _c_dnu(mc: ModelConstants) -> float:
    return derived_constants(mc).c_dnu


def predicted_log_mass(t: float, mc: ModelConstants) -> float:
    """Leading-order exponent ``beta t - c(d, nu) t / (log t)^(2/d)``."""
    if not t > 1:
        raise ValueError(f"predicted log mass needs t > 1, got {t!r}")
    return mc.beta * t - _c_dnu(mc) * t / math.log(t) ** (2.0 / mc.d)


def confinement_log_asymptote(t: float, r: float, d: int) -> float:
    if not t > 0 or not r > 0:
        raise ValueError("confinement asymptote needs t > 0 and r > 0")
    return -principal_eigenvalue(d, r) * t


def lln_statistic(log_N: float, t: float, mc: ModelConstants) -> float:
    """``(log t)^(2/d) (log N / t - beta)``; tends to ``-c(d, nu)`` given survival."""
    if not t > 1:
        raise ValueError(f"LLN statistic needs t > 1, got {t!r}")
    return math.log(t) ** (2.0 / mc.d) * (log_N / t - mc.beta)
