"""Gamma-distribution special functions, three-parameter gamma fitting and
the one-sample Kolmogorov-Smirnov statistic.

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceError, ValidationError

_EPS = 1e-16
_FPMIN = 1e-300
_MAX_ITER = 100_000


def _log_prefactor(s: float, x: np.ndarray) -> np.ndarray:
    # log(x^s e^-x / Gamma(s)); x > 0
    return s * np.log(x) - x - math.lgamma(s)


def _series(s: float, x: np.ndarray) -> np.ndarray:
    """P(s, x) by the power series; meant for x < s + 1."""
    ap = np.full_like(x, s)
    term = np.full_like(x, 1.0 / s)
    total = term.copy()
    active = np.ones(x.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        ap[active] += 1.0
        term[active] *= x[active] / ap[active]
        total[active] += term[active]
        active &= np.abs(term) >= np.abs(total) * _EPS
        if not active.any():
            return total * np.exp(_log_prefactor(s, x))
    raise ConvergenceError(f"incomplete gamma series did not converge for s={s}")


def _continued_fraction(s: float, x: np.ndarray) -> np.ndarray:
    """Q(s, x) = 1 - P(s, x) by modified Lentz; meant for x >= s + 1."""
    b = x + 1.0 - s
    c = np.full_like(x, 1.0 / _FPMIN)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for i in range(1, _MAX_ITER):
        an = -i * (i - s)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _FPMIN, _FPMIN, d)
        c = b + an / c
        c = np.where(np.abs(c) < _FPMIN, _FPMIN, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) >= _EPS
        if not active.any():
            return np.exp(_log_prefactor(s, x)) * h
    raise ConvergenceError(f"incomplete gamma continued fraction did not converge for s={s}")


def gammainc(s: float, x) -> np.ndarray:
    """Vectorized regularized lower incomplete gamma ``P(s, x)`` for scalar
    ``s > 0`` and an array of ``x >= 0`` (``inf`` maps to 1)."""
    s = float(s)
    if not s > 0 or not math.isfinite(s):
        raise ValidationError(f"incomplete gamma needs finite s > 0, got {s}")
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any() or (x < 0).any():
        raise ValidationError("incomplete gamma needs x >= 0")
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    out[np.isposinf(flat)] = 1.0
    finite_pos = (flat > 0) & np.isfinite(flat)
    use_series = finite_pos & (flat < s + 1.0)
    use_cf = finite_pos & ~use_series
    if use_series.any():
        out[use_series] = _series(s, flat[use_series])
    if use_cf.any():
        out[use_cf] = 1.0 - _continued_fraction(s, flat[use_cf])
    return np.clip(out, 0.0, 1.0).reshape(x.shape)


def regularized_lower_incomplete_gamma(s: float, x: float) -> float:
    """``P(s, x) = gamma(s, x) / Gamma(s)``.

    Series expansion below ``x = s + 1``, continued fraction above.

    >>> round(regularized_lower_incomplete_gamma(1.0, math.log(2.0)), 12)
    0.5
    """
    return float(gammainc(s, np.array([x], dtype=np.float64))[0])


def digamma(x: float) -> float:
    """psi(x) for x > 0: upward recurrence to x >= 6, then the asymptotic
    series through the x**-14 term."""
    if not x > 0:
        raise ValidationError(f"digamma implemented for x > 0 only, got {x}")
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12))))))
    return acc + math.log(x) - 0.5 / x - series


def trigamma(x: float) -> float:
    """psi'(x) for x > 0, same recurrence-plus-asymptotic scheme."""
    if not x > 0:
        raise ValidationError(f"trigamma implemented for x > 0 only, got {x}")
    acc = 0.0
    while x < 6.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    # 1/x + 1/2x^2 + sum B_2k / x^(2k+1)
    series = inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (
        1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (691.0 / 2730 - inv2 * 7.0 / 6))))))
    return acc + inv + 0.5 * inv2 + series


@dataclass(frozen=True)
class GammaFit:
    """Three-parameter gamma: density of ``(x - loc) / scale`` is Gamma(shape)."""

    shape: float
    loc: float
    scale: float
    log_likelihood: float = float("nan")
    n: int = 0
    iterations: int = 0

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0 and math.isfinite(self.loc)
                and math.isfinite(self.shape) and math.isfinite(self.scale)):
            raise ValidationError(f"invalid gamma parameters {self}")

    def cdf(self, x) -> np.ndarray:
        return gamma_cdf(x, self)

    def pdf(self, x) -> np.ndarray:
        return gamma_pdf(x, self)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "loc": self.loc, "scale": self.scale,
                "log_likelihood": self.log_likelihood, "n": self.n, "iterations": self.iterations}


def gamma_cdf(x, fit: GammaFit):
    """``P(shape, (x - loc) / scale)``, zero at and below ``loc``.

    Scalars in, float out; arrays in, array out.
    """
    arr = np.asarray(x, dtype=np.float64)
    z = np.maximum((arr - fit.loc) / fit.scale, 0.0)
    out = gammainc(fit.shape, z)
    return float(out) if np.ndim(x) == 0 else out


def gamma_pdf(x, fit: GammaFit):
    arr = np.asarray(x, dtype=np.float64)
    z = (arr - fit.loc) / fit.scale
    out = np.zeros_like(z)
    pos = z > 0
    zp = z[pos]
    out[pos] = np.exp((fit.shape - 1.0) * np.log(zp) - zp - math.lgamma(fit.shape)) / fit.scale
    return float(out) if np.ndim(x) == 0 else out


def gamma_log_likelihood(samples, shape: float, loc: float, scale: float) -> float:
    y = np.asarray(samples, dtype=np.float64) - loc
    if (y <= 0).any():
        return float("-inf")
    n = y.size
    return float((shape - 1.0) * np.log(y).sum() - y.sum() / scale
                 - n * math.lgamma(shape) - n * shape * math.log(scale))


def gamma_mle_fit(samples, min_samples: int = 30, tol: float = 1e-10,
                  max_iter: int = 100) -> GammaFit:
    """Fit shape, loc and scale to ``samples``.

    The location is plugged in just below the sample minimum,
    ``loc = min - (1e-9 * (max - min) + 1e-12)``; the shape then solves
    ``log(a) - digamma(a) = log(mean(y)) - mean(log(y))`` on the shifted
    data ``y`` by Newton's method from the Choi-Wette starting point, and
    ``scale = mean(y) / a``.

    Raises
    ------
    ValidationError
        Too few, non-finite, or all-equal samples.
    ConvergenceError
        Newton did not reach ``|step| / a <= tol`` within ``max_iter``.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < min_samples:
        raise ValidationError(f"gamma fit needs at least {min_samples} samples, got {x.size}")
    if not np.isfinite(x).all():
        raise ValidationError("gamma fit samples contain non-finite values")
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise ValidationError("degenerate sample: all values equal")
    loc = lo - (1e-9 * (hi - lo) + 1e-12)
    y = x - loc
    mean_y = float(y.mean())
    s = math.log(mean_y) - float(np.log(y).mean())
    if not s > 0:
        raise ValidationError("degenerate sample: log-mean gap is not positive")
    a = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    for it in range(1, max_iter + 1):
        f = math.log(a) - digamma(a) - s
        fp = 1.0 / a - trigamma(a)
        step = f / fp
        new = a - step
        while new <= 0:
            step *= 0.5
            new = a - step
        converged = abs(new - a) / new <= tol
        a = new
        if converged:
            scale = mean_y / a
            return GammaFit(a, loc, scale, gamma_log_likelihood(x, a, loc, scale), x.size, it)
    raise ConvergenceError(
        f"gamma shape Newton did not converge in {max_iter} iterations "
        f"(a={a:.6g}, s={s:.6g}, n={x.size})")


def sample_gamma(fit: GammaFit, n: int, rng: np.random.Generator) -> np.ndarray:
    """Marsaglia-Tsang squeeze-free rejection sampler, shifted and scaled.

    Shapes below one are boosted to ``shape + 1`` and corrected with
    ``U ** (1 / shape)``.
    """
    n = int(n)
    if n < 1:
        raise ValidationError("sample_gamma needs n >= 1")
    a = fit.shape
    boost = a < 1.0
    d = (a + 1.0 if boost else a) - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        m = max(16, int(need * 1.1) + 8)
        z = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * z) ** 3
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            ok &= np.log(u) < 0.5 * z * z + d - d * v + d * np.log(np.where(ok, v, 1.0))
        got = (d * v)[ok][:need]
        out[filled:filled + got.size] = got
        filled += got.size
    if boost:
        out *= rng.random(n) ** (1.0 / a)
    return fit.loc + fit.scale * out


def ks_statistic(samples, cdf: Callable) -> float:
    """One-sample Kolmogorov-Smirnov distance ``sup |F_n(x) - F(x)|``.

    Exact: with the sample sorted, the supremum is attained at a sample
    point, either at the top or the bottom of the ECDF jump::

        D_n = max_i max(i/n - F(x_i), F(x_i) - (i-1)/n)

    ``cdf`` must accept a numpy array.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    n = x.size
    if n < 1:
        raise ValidationError("ks_statistic needs at least one sample")
    if np.isnan(x).any():
        raise ValidationError("ks_statistic samples contain NaN")
    f = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1, dtype=np.float64)
    d_plus = np.max(i / n - f)
    d_minus = np.max(f - (i - 1.0) / n)
    return float(min(max(d_plus, d_minus, 0.0), 1.0))
