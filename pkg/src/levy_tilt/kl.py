"""Jump cost of the path-space KL: ``I(t, x) = int (H ln H - H + 1) dnu_tau``.

Three independent routes are provided: the Monte Carlo estimator used in
training (Pareto samples, folded over the symmetric measure), an adaptive
quadrature, and a series in ``K1`` built from upper incomplete gamma values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, special

from .stable import StableSpec, one_sided_mass, sample_jump_magnitude
from .tilting import TiltCoeffs

_SMALL_L = 1e-4


def kl_integrand_log(L):
    """``g(L) = L e^L - e^L + 1``, i.e. ``H ln H - H + 1`` at ``H = e^L``.

    Uses the Taylor series ``L^2/2 + L^3/3 + L^4/8`` for ``|L| < 1e-4``.
    """
    L = np.asarray(L, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = L * np.exp(L) - np.expm1(L)
    small = np.abs(L) < _SMALL_L
    if np.any(small):
        Ls = L[small] if L.ndim else L
        series = Ls * Ls * (0.5 + Ls * (1.0 / 3.0 + Ls / 8.0))
        if L.ndim:
            out[small] = series
        else:
            out = series
    return out if out.ndim else float(out)


def kl_integrand_log_grad(L):
    """``g'(L) = L e^L``."""
    L = np.asarray(L, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        return L * np.exp(L)


def kl_integrand(coeffs: TiltCoeffs, dim: int, x, y):
    a, b = coeffs.a[dim], coeffs.b[dim]
    return kl_integrand_log(a * (2.0 * x * y + y * y) + b * y)


@dataclass
class KLStepEstimate:
    value: float
    std_error: float
    k_samples: int
    per_dim: np.ndarray = field(repr=False, default=None)


def estimate_kl_step(coeffs: TiltCoeffs, x, spec: StableSpec, k: int,
                     shared_samples: Optional[np.ndarray] = None, rng=None) -> KLStepEstimate:
    """Monte Carlo estimate of the jump cost at state ``x`` (summed over dimensions).

    ``shared_samples`` (shape ``(d, k)``, e.g. ``IntensityEstimate.samples``)
    are used instead of fresh draws when given.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    if shared_samples is None:
        if k < 1:
            raise ValueError("k must be >= 1")
        if rng is None:
            raise ValueError("need rng or shared_samples")
        y = sample_jump_magnitude(spec, rng.random((d, k)))
    else:
        y = np.asarray(shared_samples, dtype=float).reshape(d, -1)
        k = y.shape[1]
    a = coeffs.a[:, None]
    k1 = (2.0 * coeffs.a * x + coeffs.b)[:, None]
    terms = one_sided_mass(spec) * (kl_integrand_log(a * y * y + k1 * y) + kl_integrand_log(a * y * y - k1 * y))
    per_dim = terms.mean(axis=1)
    se = terms.std(axis=1, ddof=1) / math.sqrt(k) if k > 1 else np.zeros(d)
    return KLStepEstimate(float(per_dim.sum()), float(np.sqrt(np.sum(se**2))), k, per_dim)


class QuadratureError(RuntimeError):
    pass


def _upper_limit(a: float, k1: float, spec: StableSpec) -> float:
    # beyond this |y| both e^{L(+y)} and e^{L(-y)} are below e^{-60}
    aa = abs(a)
    y = (abs(k1) + math.sqrt(k1 * k1 + 240.0 * aa)) / (2.0 * aa)
    return max(y, 10.0 * spec.tau)


def kl_quadrature(coeffs: TiltCoeffs, dim: int, x: float, spec: StableSpec, rtol: float = 1e-8) -> float:
    """Adaptive quadrature of ``int_tau^inf (f(y) + f(-y)) y^(-1-alpha) dy``.

    Integrates in ``log y`` up to a cutoff where the tilt factors are below
    ``e^-60`` and adds the analytic remainder ``2 Y^-alpha / alpha`` beyond it.
    """
    a = float(coeffs.a[dim])
    k1 = float(coeffs.k1(dim, x))
    alpha = spec.alpha
    y_max = _upper_limit(a, k1, spec)

    def integrand(u):
        y = math.exp(u)
        lp = a * y * y + k1 * y
        lm = a * y * y - k1 * y
        return (kl_integrand_log(lp) + kl_integrand_log(lm)) * math.exp(-alpha * u)

    lo, hi = math.log(spec.tau), math.log(y_max)
    # split at the scale where the quadratic part becomes active
    pts = [p for p in (math.log(1.0 / math.sqrt(abs(a))),) if lo < p < hi]
    val, err = integrate.quad(integrand, lo, hi, points=pts or None, limit=500, epsabs=0.0, epsrel=rtol * 0.1)
    tail = 2.0 * y_max ** (-alpha) / alpha
    total = val + tail
    if err > rtol * abs(total) and err > 1e-300:
        raise QuadratureError(f"quadrature reached only {err / abs(total):.2e} relative tolerance")
    return total


def upper_gamma(s: float, z: float) -> float:
    """Upper incomplete gamma ``Gamma(s, z)`` for ``s > -1`` and ``z > 0``.

    ``s <= 0`` goes through ``Gamma(s, z) = (Gamma(s + 1, z) - z^s e^-z) / s``.
    """
    return math.exp(log_upper_gamma(s, z))


def log_upper_gamma(s: float, z: float) -> float:
    if s > 0:
        return math.log(special.gammaincc(s, z)) + special.gammaln(s) if special.gammaincc(s, z) > 0 \
            else _log_upper_gamma_asymptotic(s, z)
    if s == 0:
        return math.log(special.exp1(z))
    if s <= -1:
        raise ValueError("upper_gamma needs s > -1")
    g1 = math.exp(log_upper_gamma(s + 1.0, z))
    return math.log((g1 - z**s * math.exp(-z)) / s)


def _log_upper_gamma_asymptotic(s: float, z: float) -> float:
    # large-z expansion, used only when gammaincc underflows
    return (s - 1.0) * math.log(z) - z + math.log1p((s - 1.0) / z)


@dataclass
class KLSeriesResult:
    value: float
    components: dict
    diverging: bool
    n_terms: int


def _gamma_series(p: float, k1: float, a: float, tau: float, n_terms: int):
    """``sum_n k1^n / n! * 1/2 |a|^{-(n+p+1)/2} Gamma((n+p+1)/2, |a| tau^2)`` and its terms."""
    aa = abs(a)
    z = aa * tau * tau
    terms = np.zeros(n_terms)
    for n in range(n_terms):
        if k1 == 0.0 and n > 0:
            continue
        s = 0.5 * (n + p + 1.0)
        log_mag = (n * math.log(abs(k1)) if n else 0.0) - special.gammaln(n + 1.0) \
            - s * math.log(aa) + log_upper_gamma(s, z) - math.log(2.0)
        sign = -1.0 if (k1 < 0 and n % 2) else 1.0
        terms[n] = sign * math.exp(log_mag)
    return terms.sum(), terms


def kl_series(coeffs: TiltCoeffs, dim: int, x: float, spec: StableSpec, n_terms: int = 40) -> KLSeriesResult:
    """Incomplete-gamma series for the jump cost.

    With ``L(y) = a y^2 + K1 y`` the folded integrand splits per branch
    (``+y`` and ``-y``, the latter flipping the sign of ``K1``) into::

        I1 = K1 int e^{L} y^-alpha,   I2 = a int e^{L} y^(1-alpha),
        I3 = int e^{L} y^(-1-alpha),  I4 = tau^-alpha / alpha,

    combined as ``I1 + I2 - I3 + I4``.  Each integral expands ``e^{K1 y}`` in
    powers of ``K1`` and integrates term by term against ``e^{a y^2}``.
    ``diverging`` is set when the last retained term of any branch is larger in
    magnitude than the one before it.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    a = float(coeffs.a[dim])
    if not a < 0:
        raise ValueError("series needs a < 0")
    k1 = float(coeffs.k1(dim, x))
    alpha, tau = spec.alpha, spec.tau
    comps = {}
    diverging = False
    for sign, tag in ((1.0, "+"), (-1.0, "-")):
        kk = sign * k1
        j1, t1 = _gamma_series(-alpha, kk, a, tau, n_terms)
        j2, t2 = _gamma_series(1.0 - alpha, kk, a, tau, n_terms)
        j3, t3 = _gamma_series(-1.0 - alpha, kk, a, tau, n_terms)
        comps["I1" + tag] = kk * j1
        comps["I2" + tag] = a * j2
        comps["I3" + tag] = j3
        comps["I4" + tag] = tau ** (-alpha) / alpha
        if n_terms >= 2 and kk != 0.0:
            for t in (t1, t2, t3):
                if abs(t[-1]) > abs(t[-2]):
                    diverging = True
    value = sum(comps["I1" + s] + comps["I2" + s] - comps["I3" + s] + comps["I4" + s] for s in "+-")
    return KLSeriesResult(value, comps, diverging, n_terms)
