"""Seedable samplers used by the Gibbs sampler.

Scalar-heavy algorithms (truncated normal, Polya-Gamma, batched Gaussian
draws from a precision matrix) run as numba kernels that take the numpy
``Generator`` directly, so a stream yields the same sequence whether it is
consumed from Python or from a kernel.
"""
from __future__ import annotations

import math

import numba
import numpy as np

#: Standardised distance from the mean beyond which one-sided tails switch
#: from inverse-CDF to exponential-proposal rejection.
TAIL_SWITCH = 3.0
#: Uniform-proposal rejection is used when its worst-case acceptance exceeds this.
UNIFORM_ACCEPT = 0.5
#: Relative diagonal jitter added on a failed Cholesky factorisation.
JITTER = 1e-8

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_MASK64 = (1 << 64) - 1


class NumericalError(RuntimeError):
    """A factorisation failed even after jitter; ``dim`` is the failing size."""

    def __init__(self, message: str, dim: int | None = None, index: int | None = None):
        super().__init__(message)
        self.dim = dim
        self.index = index


class EmptyIntervalError(ValueError):
    pass


class RngStream:
    """One logical random stream, keyed by ``(seed, stream_id)``.

    Backed by a Philox counter-based generator seeded through
    ``SeedSequence([seed, stream_id])``.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        ss = np.random.SeedSequence([self.seed, self.stream_id])
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "RngStream":
        """Independent stream derived from this stream's key and ``key``."""
        mixed = np.random.SeedSequence([self.seed, self.stream_id, *key]).generate_state(2, np.uint64)
        return RngStream(int(mixed[0]), int(mixed[1]))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


# --------------------------------------------------------------------------
# normal CDF helpers usable inside kernels


@numba.njit(cache=True)
def _ndtr(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@numba.njit(cache=True)
def _ndtri(p):
    # Acklam's rational approximation followed by one Halley step.
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q - 2.400758277161838e00) * q
               - 2.549732539343734e00) * q + 4.374664141464968e00) * q + 2.938163982698783e00) / (
            (((7.784695709041462e-03 * q + 3.224671290700398e-01) * q + 2.445134137142996e00) * q
             + 3.754408661907416e00) * q + 1.0)
    elif p <= 1.0 - plow:
        q = p - 0.5
        r = q * q
        x = (((((-3.969683028665376e01 * r + 2.209460984245205e02) * r - 2.759285104469687e02) * r
               + 1.383577518672690e02) * r - 3.066479806614716e01) * r + 2.506628277459239e00) * q / (
            ((((-5.447609879822406e01 * r + 1.615858368580409e02) * r - 1.556989798598866e02) * r
              + 6.680131188771972e01) * r - 1.328068155288572e01) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q - 2.400758277161838e00) * q
                - 2.549732539343734e00) * q + 4.374664141464968e00) * q + 2.938163982698783e00) / (
            (((7.784695709041462e-03 * q + 3.224671290700398e-01) * q + 2.445134137142996e00) * q
             + 3.754408661907416e00) * q + 1.0)
    e = _ndtr(x) - p
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


# --------------------------------------------------------------------------
# truncated normal


@numba.njit(cache=True)
def _tn_tail(rng, a, b):
    """Standard normal restricted to [a, b] with a >= TAIL_SWITCH > 0."""
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        x = a + rng.standard_exponential() / alpha
        if x < b and rng.random() <= math.exp(-0.5 * (x - alpha) ** 2):
            return x


@numba.njit(cache=True)
def _tn_uniform(rng, a, b):
    """Uniform proposal on [a, b], accepted against the density's maximum there."""
    if a > 0.0:
        m = a
    elif b < 0.0:
        m = b
    else:
        m = 0.0
    while True:
        x = a + (b - a) * rng.random()
        if rng.random() <= math.exp(0.5 * (m * m - x * x)):
            return x


@numba.njit(cache=True)
def _tn_inverse(rng, a, b):
    # mirror so the interval's left end is at or below zero: precision lives in the lower tail
    if a > 0.0:
        return -_tn_inverse(rng, -b, -a)
    fa = _ndtr(a)
    fb = _ndtr(b)
    return _ndtri(fa + rng.random() * (fb - fa))


@numba.njit(cache=True)
def _tn_std(rng, a, b):
    if a == -np.inf and b == np.inf:
        return rng.standard_normal()
    if b - a < np.inf:
        far = max(abs(a), abs(b))
        if a > 0.0:
            near = a
        elif b < 0.0:
            near = -b
        else:
            near = 0.0
        if 0.5 * (far * far - near * near) < -math.log(UNIFORM_ACCEPT):
            return _tn_uniform(rng, a, b)
    if a >= TAIL_SWITCH:
        return _tn_tail(rng, a, b)
    if b <= -TAIL_SWITCH:
        return -_tn_tail(rng, -b, -a)
    return _tn_inverse(rng, a, b)


@numba.njit(cache=True)
def _tn_kernel(rng, mean, sd, lo, hi, out):
    for i in range(mean.size):
        m = mean[i]
        s = sd[i]
        a = (lo[i] - m) / s
        b = (hi[i] - m) / s
        z = m
        ok = False
        for _ in range(64):
            z = m + s * _tn_std(rng, a, b)
            # rounding in m + s*x may land on or past a bound
            if z > lo[i] and z < hi[i]:
                ok = True
                break
        if not ok:
            if z <= lo[i]:
                z = np.nextafter(lo[i], np.inf)
            if z >= hi[i]:
                z = np.nextafter(hi[i], -np.inf)
        out[i] = z


def sample_truncated_normal(mean, variance, lower, upper, rng):
    """Draw ``N(mean, variance)`` restricted to the open interval ``(lower, upper)``.

    Arguments broadcast against each other; infinite bounds are allowed.
    Central intervals use the inverse CDF, one-sided tails beyond
    :data:`TAIL_SWITCH` standard deviations use exponential-proposal
    rejection, and short intervals use uniform-proposal rejection.
    """
    mean, variance, lower, upper = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(variance, float), np.asarray(lower, float), np.asarray(upper, float)
    )
    if np.any(variance <= 0):
        raise ValueError("variance must be positive")
    if np.any(~(lower < upper)):
        raise EmptyIntervalError("truncation interval is empty")
    shape = mean.shape
    out = np.empty(mean.size)
    _tn_kernel(
        _gen(rng),
        np.ascontiguousarray(mean).ravel(),
        np.sqrt(np.ascontiguousarray(variance).ravel()),
        np.ascontiguousarray(lower).ravel(),
        np.ascontiguousarray(upper).ravel(),
        out,
    )
    if shape == ():
        return float(out[0])
    return out.reshape(shape)


# --------------------------------------------------------------------------
# Polya-Gamma PG(1, c), exact alternating-series sampler

_PG_T = 0.64


@numba.njit(cache=True)
def _pg_coef(n, x):
    k = n + 0.5
    if x > _PG_T:
        return math.pi * k * math.exp(-0.5 * k * k * math.pi * math.pi * x)
    return math.pi * k * (2.0 / (math.pi * x)) ** 1.5 * math.exp(-2.0 * k * k / x)


@numba.njit(cache=True)
def _pg_trunc_ig(rng, z):
    """Inverse-Gaussian(1/z, 1) restricted to (0, t)."""
    t = _PG_T
    if z < 1.0 / t:
        while True:
            while True:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
                if e1 * e1 <= 2.0 * e2 / t:
                    break
            x = t / (1.0 + t * e1) ** 2
            if rng.random() <= math.exp(-0.5 * z * z * x):
                return x
    mu = 1.0 / z
    while True:
        y = rng.standard_normal() ** 2
        muy = mu * y
        x = mu + 0.5 * mu * muy - 0.5 * mu * math.sqrt(4.0 * muy + muy * muy)
        if rng.random() > mu / (mu + x):
            x = mu * mu / x
        if x < t:
            return x


@numba.njit(cache=True)
def _pg1(rng, c):
    z = 0.5 * abs(c)
    t = _PG_T
    K = 0.125 * math.pi * math.pi + 0.5 * z * z
    p = 0.5 * math.pi / K * math.exp(-K * t)
    # q = 2 exp(-z) * InverseGaussianCDF(t; 1/z, 1), split to stay finite for large z
    rt = math.sqrt(t)
    a1 = (t * z - 1.0) / rt
    a2 = -(t * z + 1.0) / rt
    q = 2.0 * (math.exp(-z) * _ndtr(a1))
    tail = _ndtr(a2)
    if tail > 0.0:
        q += 2.0 * math.exp(z + math.log(tail))
    ratio = p / (p + q)
    while True:
        if rng.random() < ratio:
            x = t + rng.standard_exponential() / K
        else:
            x = _pg_trunc_ig(rng, z)
        s = _pg_coef(0, x)
        y = rng.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _pg_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _pg_coef(n, x)
                if y > s:
                    break


@numba.njit(cache=True)
def _pg_kernel(rng, c, out):
    for i in range(c.size):
        out[i] = _pg1(rng, c[i])


def sample_polya_gamma(c, rng):
    """Exact draws from PG(1, c); ``c`` may be an array."""
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ValueError("Polya-Gamma tilt must be finite")
    out = np.empty(c.size)
    _pg_kernel(_gen(rng), np.ascontiguousarray(c).ravel(), out)
    if c.shape == ():
        return float(out[0])
    return out.reshape(c.shape)


def polya_gamma_series(c, rng, terms: int = 200, size=None):
    """Truncated sum-of-gammas representation of PG(1, c).

    ``PG(1, c) = 1/(2 pi^2) sum_k g_k / ((k - 1/2)^2 + c^2/(4 pi^2))``. Only
    meant as an independent reference for testing the exact sampler.
    """
    g = _gen(rng)
    size = 1 if size is None else size
    k = np.arange(1, terms + 1) - 0.5
    denom = k**2 + (c / (2 * np.pi)) ** 2
    draws = g.standard_exponential((size, terms)) / denom
    return draws.sum(axis=1) / (2 * np.pi**2)


def polya_gamma_series_mean(c, terms: int = 100000) -> float:
    k = np.arange(1, terms + 1) - 0.5
    return float(np.sum(1.0 / (k**2 + (c / (2 * np.pi)) ** 2)) / (2 * np.pi**2))


# --------------------------------------------------------------------------
# gamma / beta: thin wrappers over numpy


def sample_gamma(shape, rate, rng, size=None):
    """Gamma draws parameterised by shape and rate (mean shape/rate)."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValueError("gamma shape and rate must be positive")
    out = _gen(rng).gamma(shape, 1.0 / rate, size=size)
    return float(out) if np.ndim(out) == 0 else out


def sample_beta(a, b, rng, size=None):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("beta parameters must be positive")
    out = _gen(rng).beta(a, b, size=size)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Gaussian with precision parameterisation


@numba.njit(cache=True)
def _cholesky_inplace(A, k):
    for j in range(k):
        s = A[j, j]
        for m in range(j):
            s -= A[j, m] * A[j, m]
        if not s > 0.0:
            return False
        d = math.sqrt(s)
        A[j, j] = d
        for i in range(j + 1, k):
            s = A[i, j]
            for m in range(j):
                s -= A[i, m] * A[j, m]
            A[i, j] = s / d
    return True


@numba.njit(cache=True)
def _mvn_prec_kernel(P, b, e, out, jitter):
    """out[m] ~ N(P[m]^-1 b[m], P[m]^-1) given standard normal noise e[m].

    Returns -1 on success, else the index of the batch that failed twice.
    """
    nb, k, _ = P.shape
    L = np.empty((k, k))
    y = np.empty(k)
    for m in range(nb):
        for i in range(k):
            for j in range(k):
                L[i, j] = P[m, i, j]
        if not _cholesky_inplace(L, k):
            tr = 0.0
            for i in range(k):
                tr += P[m, i, i]
            add = jitter * abs(tr) / max(k, 1)
            if add == 0.0:
                add = jitter
            for i in range(k):
                for j in range(k):
                    L[i, j] = P[m, i, j]
                L[i, i] += add
            if not _cholesky_inplace(L, k):
                return m
        # forward: L y = b
        for i in range(k):
            s = b[m, i]
            for j in range(i):
                s -= L[i, j] * y[j]
            y[i] = s / L[i, i]
        # backward: L^T x = y + e gives mean plus noise with covariance P^-1
        for i in range(k):
            y[i] += e[m, i]
        for i in range(k - 1, -1, -1):
            s = y[i]
            for j in range(i + 1, k):
                s -= L[j, i] * out[m, j]
            out[m, i] = s / L[i, i]
    return -1


def sample_mvn_precision_batch(b, P, rng, noise=None):
    """Batched draws ``x[m] ~ N(P[m]^-1 b[m], P[m]^-1)``.

    One Cholesky factorisation per batch element and no explicit inverse:
    ``x = L^-T (L^-1 b + e)``. A failed factorisation is retried once with
    :data:`JITTER` times the mean diagonal added; a second failure raises
    :class:`NumericalError`.
    """
    P = np.ascontiguousarray(P, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    nb, k = b.shape
    if P.shape != (nb, k, k):
        raise ValueError(f"precision batch shape {P.shape} does not match {b.shape}")
    if noise is None:
        noise = _gen(rng).standard_normal((nb, k))
    out = np.empty((nb, k))
    if k == 0:
        return out
    bad = _mvn_prec_kernel(P, b, np.ascontiguousarray(noise, dtype=float), out, JITTER)
    if bad >= 0:
        raise NumericalError(f"precision matrix {bad} of size {k} is not positive definite", dim=k, index=int(bad))
    return out


def sample_mvn_precision(b, P, rng, size=None):
    """Draw from ``N(P^-1 b, P^-1)``; ``size`` gives several iid draws."""
    b = np.asarray(b, dtype=float)
    P = np.asarray(P, dtype=float)
    k = b.shape[0]
    if P.shape != (k, k):
        raise ValueError(f"precision shape {P.shape} does not match mean dimension {k}")
    if not np.allclose(P, P.T):
        raise ValueError("precision matrix must be symmetric")
    m = 1 if size is None else int(size)
    draws = sample_mvn_precision_batch(np.broadcast_to(b, (m, k)), np.broadcast_to(P, (m, k, k)), rng)
    return draws[0] if size is None else draws
