"""Quadratic exponential tilting of the stable jump measure.

With ``phi(x) = a x**2 + b x`` the tilt of a jump ``x -> x + y`` is
``exp(a (2 x y + y**2) + b y)``.  Against a Gaussian kernel ``N(0, r**2 sg**2)``
the tilted kernel is again Gaussian, with the closed-form normaliser computed
here, and that normaliser is bounded uniformly in ``r`` by :func:`envelope`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stable import StableSpec


@dataclass(frozen=True)
class TiltCoeffs:
    """Per-dimension quadratic tilt coefficients at one time point."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if a.shape != b.shape:
            raise ValueError("a and b must have the same shape")
        if not np.all(a < 0.0):
            raise ValueError("every tilt coefficient a must be strictly negative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.a.size

    def k1(self, dim: int, x):
        return 2.0 * self.a[dim] * x + self.b[dim]


@dataclass(frozen=True)
class ConditionalGaussian:
    mu_y: float
    var_y: float
    c_norm: float
    log_c_norm: float


def log_tilt_factor(coeffs: TiltCoeffs, dim: int, x, y):
    a, b = coeffs.a[dim], coeffs.b[dim]
    return a * (2.0 * x * y + y * y) + b * y


def log_tilt_factor_joint(coeffs: TiltCoeffs, x, y):
    """Log of the d-dimensional tilt factor: the sum of per-dimension logs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.sum(coeffs.a * (2.0 * x * y + y * y) + coeffs.b * y))


def conditional_params(a, k1, r, sigma_g):
    """Vectorised ``(mu_y, var_y, log_c)`` for arrays ``a < 0``, ``k1``, ``r > 0``."""
    rs2 = (np.asarray(r, dtype=float) * sigma_g) ** 2
    k2 = a - 0.5 / rs2
    var = -0.5 / k2
    mu = k1 * var
    # -2 K2 r^2 sg^2 = 1 + 2|a| r^2 sg^2
    log_c = -k1 * k1 / (4.0 * k2) - 0.5 * np.log1p(-2.0 * a * rs2)
    return mu, var, log_c


def conditional_gaussian(coeffs: TiltCoeffs, dim: int, x: float, r: float, spec: StableSpec) -> ConditionalGaussian:
    if not r > 0:
        raise ValueError("mixing scale r must be positive")
    mu, var, log_c = conditional_params(coeffs.a[dim], coeffs.k1(dim, x), r, spec.sigma_g)
    return ConditionalGaussian(float(mu), float(var), float(np.exp(log_c)), float(log_c))


def log_envelope_params(a, k1):
    return k1 * k1 / (4.0 * np.abs(a))


def envelope(coeffs: TiltCoeffs, dim: int, x: float) -> float:
    """Uniform-in-r bound ``exp(K1**2 / (4 |a|))`` on the normaliser."""
    return float(np.exp(log_envelope_params(coeffs.a[dim], coeffs.k1(dim, x))))


def log_envelope(coeffs: TiltCoeffs, dim: int, x: float) -> float:
    return float(log_envelope_params(coeffs.a[dim], coeffs.k1(dim, x)))
