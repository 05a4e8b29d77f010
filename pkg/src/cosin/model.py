"""Data model, rounded-exponential link and input validation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

log = logging.getLogger(__name__)

#: Largest count returned by :func:`apply_link`; exp overflow saturates here.
MAX_COUNT = 2**53 - 1
_LOG_MAX_COUNT = math.log(MAX_COUNT)


class ValidationError(ValueError):
    """Raised when inputs are inconsistent; ``where`` names the offender."""

    def __init__(self, message: str, where=None):
        super().__init__(message)
        self.where = where


class LinkOverflowWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class CountMatrix:
    """n x p count matrix with an optional holdout mask (True = held out)."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or min(values.shape) < 1:
            raise ValidationError(f"count matrix must be 2-d and non-empty, got shape {values.shape}", "y")
        object.__setattr__(self, "values", values)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValidationError(
                    f"mask shape {mask.shape} does not match y shape {values.shape}", "mask"
                )
            object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def observed(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return ~self.mask

    def with_mask(self, mask) -> "CountMatrix":
        return CountMatrix(self.values, mask)


@dataclass(frozen=True)
class Covariates:
    """Cell covariates ``x`` (n x d) and gene meta-covariates ``wT`` (p x qT), ``wB`` (p x qB)."""

    x: np.ndarray
    wT: np.ndarray
    wB: np.ndarray

    def __post_init__(self):
        for name in ("x", "wT", "wB"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            object.__setattr__(self, name, arr)

    @classmethod
    def intercepts(cls, n: int, p: int, wB=None) -> "Covariates":
        """Intercept-only x and wT; ``wB`` defaults to an intercept column too."""
        if wB is None:
            wB = np.ones((p, 1))
        return cls(np.ones((n, 1)), np.ones((p, 1)), wB)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def qT(self) -> int:
        return self.wT.shape[1]

    @property
    def qB(self) -> int:
        return self.wB.shape[1]


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 5.0
    sigma_beta2: float = 1.0
    sigma_gamma2: float = 1.0
    a_theta: float = 1.0
    b_theta: float = 1.0
    a_sigma: float = 1.0
    b_sigma: float = 1.0
    c_p: float = 0.5
    k_init: int | None = None
    k_max: int | None = None
    iterations: int = 20000
    burn_in: int = 5000
    thin: int = 2
    adapt_start: int = 100
    adapt_c0: float = -1.0
    adapt_c1: float = -5e-4
    seed: int = 0

    @classmethod
    def fast(cls, **overrides) -> "HyperParams":
        """Short profile (4000/1000/2) used for CI-scale runs."""
        base = dict(iterations=4000, burn_in=1000, thin=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def resolved(self, n: int, p: int) -> "HyperParams":
        """Fill in the data-dependent defaults for ``k_max`` and ``k_init``."""
        k_max = self.k_max if self.k_max is not None else min(n, p, 64)
        k_init = self.k_init if self.k_init is not None else min(math.ceil(3 * self.alpha), k_max)
        return replace(self, k_max=k_max, k_init=k_init)

    def adapt_probability(self, t: int) -> float:
        return math.exp(self.adapt_c0 + self.adapt_c1 * t)

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def check(self) -> None:
        positive = ("alpha", "sigma_beta2", "sigma_gamma2", "a_theta", "b_theta", "a_sigma", "b_sigma")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive", name)
        if not 0 < self.c_p < 1:
            raise ValidationError("c_p must lie in (0, 1)", "c_p")
        if self.iterations < 1 or self.thin < 1 or self.adapt_start < 1:
            raise ValidationError("iterations, thin and adapt_start must be positive", "iterations")
        if not 0 <= self.burn_in < self.iterations:
            raise ValidationError("burn_in must satisfy 0 <= burn_in < iterations", "burn_in")
        if self.k_max is not None and self.k_max < 1:
            raise ValidationError("k_max must be positive", "k_max")
        if self.k_init is not None:
            if self.k_init < 1:
                raise ValidationError("k_init must be positive", "k_init")
            if self.k_max is not None and self.k_init > self.k_max:
                raise ValidationError("k_init must not exceed k_max", "k_init")
        # pr(t) <= 1 for every t >= adapt_start
        if self.adapt_c1 > 0 or self.adapt_c0 + self.adapt_c1 * self.adapt_start > 0:
            raise ValidationError("adaptation probability exp(c0 + c1 t) must stay in (0, 1]", "adapt_c1")


@dataclass
class ChainState:
    """Every latent quantity of one Gibbs iteration.

    Column ``h`` of the loading-related arrays describes factor ``h``; the
    effective loadings are ``lam = phi * rho * lambda_tilde``.
    """

    z: np.ndarray
    beta: np.ndarray
    GammaT: np.ndarray
    eta: np.ndarray
    lambda_tilde: np.ndarray
    phi: np.ndarray
    varphi: np.ndarray
    rho: np.ndarray
    vartheta: np.ndarray
    v: np.ndarray
    GammaB: np.ndarray
    sigma2: np.ndarray
    lam: np.ndarray = field(default=None)
    xi: np.ndarray = field(default=None)
    #: residual z - x beta, refreshed whenever beta or z change
    eps: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.lam is None:
            self.refresh_loadings()
        if self.xi is None:
            self.xi = np.zeros(self.k_star, dtype=np.int64)

    @property
    def k_star(self) -> int:
        return self.lambda_tilde.shape[1]

    @property
    def n_active(self) -> int:
        return int(self.rho.sum())

    @property
    def u(self) -> np.ndarray:
        return stick_breaking(self.v)

    @property
    def pi(self) -> np.ndarray:
        return np.cumsum(self.u)

    def refresh_loadings(self) -> None:
        self.lam = self.phi * self.rho[None, :] * self.lambda_tilde

    def copy(self) -> "ChainState":
        return ChainState(**{f.name: None if getattr(self, f.name) is None else np.array(getattr(self, f.name), copy=True) for f in fields(self)})

    def check(self) -> None:
        """Assert the structural invariants (used by tests and debug runs)."""
        k = self.k_star
        assert self.phi.shape[1] == k and self.GammaB.shape[1] == k and self.eta.shape[1] == k
        assert self.rho.shape == (k,) and self.v.shape == (k,) and self.vartheta.shape == (k,)
        assert np.array_equal(self.lam, self.phi * self.rho[None, :] * self.lambda_tilde)
        assert np.all(self.sigma2 > 0)
        u = self.u
        assert np.all(u >= 0)
        pi = np.cumsum(u)
        assert np.all(np.diff(pi) >= -1e-12) and (k == 0 or pi[-1] <= 1 + 1e-12)


def stick_breaking(v) -> np.ndarray:
    """Stick weights ``u_l = v_l * prod_{m<l} (1 - v_m)``."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return v.copy()
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - v)[:-1]))
    return v * remaining


def link_bounds(y):
    """Latent interval ``[log y, log(y + 1))`` mapped to count ``y`` (lower is -inf for 0)."""
    y = np.asarray(y)
    if np.any(y < 0):
        raise ValidationError("counts must be nonnegative", "y")
    yf = y.astype(float)
    with np.errstate(divide="ignore"):
        lower = np.log(yf)
    upper = np.log(yf + 1.0)
    if lower.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


def apply_link(z):
    """``floor(exp(z))``, made exactly consistent with :func:`link_bounds`.

    Values whose exponential exceeds :data:`MAX_COUNT` saturate there and
    trigger a :class:`LinkOverflowWarning`.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValidationError("latent values must be finite", "z")
    over = z >= _LOG_MAX_COUNT
    zc = np.minimum(z, _LOG_MAX_COUNT)
    y = np.floor(np.exp(zc))
    # exp/log rounding can put y one off the interval that link_bounds reports
    with np.errstate(divide="ignore"):
        y = np.where(np.log(y + 1.0) <= zc, y + 1.0, y)
        y = np.where((y > 0) & (np.log(np.maximum(y, 1.0)) > zc), y - 1.0, y)
    y = y.astype(np.int64)
    if np.any(over):
        import warnings

        warnings.warn(
            f"{int(np.sum(over))} latent value(s) overflow; counts saturated at {MAX_COUNT}",
            LinkOverflowWarning,
            stacklevel=2,
        )
        y = np.where(over, MAX_COUNT, y)
    if y.ndim == 0:
        return int(y)
    return y


@dataclass(frozen=True)
class ValidatedInputs:
    y: CountMatrix
    cov: Covariates
    hp: HyperParams
    mask_fraction: float
    warnings: tuple[str, ...] = ()


def validate_inputs(y: CountMatrix, cov: Covariates, hp: HyperParams) -> ValidatedInputs:
    """Check dimensions, domains and hyperparameters; resolve k defaults."""
    n, p = y.n, y.p
    for name, arr, rows in (("x", cov.x, n), ("wT", cov.wT, p), ("wB", cov.wB, p)):
        if arr.shape[0] != rows:
            raise ValidationError(f"{name} has {arr.shape[0]} rows, expected {rows}", name)
        if arr.shape[1] < 1:
            raise ValidationError(f"{name} needs at least one column", name)
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            i, j = (int(v) for v in bad[0])
            raise ValidationError(f"{name}[{i},{j}] is not finite", (name, i, j))
    vals = np.asarray(y.values, dtype=float)
    obs = y.observed
    bad = np.argwhere(obs & ~np.isfinite(vals))
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise ValidationError(f"y[{i},{j}] is not finite", ("y", i, j))
    with np.errstate(invalid="ignore"):
        bad = np.argwhere(obs & ((vals < 0) | (vals != np.floor(vals))))
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise ValidationError(
            f"y[{i},{j}] = {vals[i, j]} is not a nonnegative integer", ("y", i, j)
        )
    hp.check()
    hp = hp.resolved(n, p)
    if hp.k_init > hp.k_max:
        raise ValidationError(f"k_init={hp.k_init} exceeds k_max={hp.k_max}", "k_init")

    notes = []
    constant = [c for c in range(cov.qB) if np.ptp(cov.wB[:, c]) == 0]
    intercepts = [c for c in constant if np.all(cov.wB[:, c] == 1.0)]
    # a single all-ones column is an intercept; any other constant column is not identified
    suspect = [c for c in constant if c not in intercepts[:1]]
    for c in suspect:
        msg = f"wB column {c} is constant; its logit coefficient is not identified beyond an intercept"
        log.warning(msg)
        notes.append(msg)
    fraction = float(y.mask.mean()) if y.mask is not None else 0.0
    log.info("validated y %dx%d, d=%d qT=%d qB=%d, held out %.1f%%", n, p, cov.d, cov.qT, cov.qB, 100 * fraction)
    clean = np.where(obs, vals, 0).astype(np.int64)
    return ValidatedInputs(CountMatrix(clean, y.mask), cov, hp, fraction, tuple(notes))
