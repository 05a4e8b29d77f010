"""Adaptive Gibbs sampler for the rounded-exponential structured factor model."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import linalg
from scipy.special import expit

from .model import ChainState, CountMatrix, Covariates, HyperParams, stick_breaking, validate_inputs
from .rng import (
    JITTER,
    NumericalError,
    RngStream,
    sample_mvn_precision_batch,
    sample_polya_gamma,
    sample_truncated_normal,
)

log = logging.getLogger(__name__)


class ChainError(RuntimeError):
    """A sampler step failed; ``iteration`` says where."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class ChainData:
    """Read-only quantities shared by every step of one chain."""

    y: CountMatrix
    cov: Covariates
    hp: HyperParams
    lower: np.ndarray
    upper: np.ndarray
    xtx: np.ndarray
    wtw: np.ndarray

    @classmethod
    def build(cls, y: CountMatrix, cov: Covariates, hp: HyperParams) -> "ChainData":
        vals = np.asarray(y.values, dtype=float)
        obs = y.observed
        with np.errstate(divide="ignore"):
            lower = np.where(obs, np.log(np.where(obs, vals, 1.0)), -np.inf)
        upper = np.where(obs, np.log(np.where(obs, vals, 0.0) + 1.0), np.inf)
        return cls(y, cov, hp, lower, upper, cov.x.T @ cov.x, cov.wT.T @ cov.wT)

    @property
    def n(self) -> int:
        return self.y.n

    @property
    def p(self) -> int:
        return self.y.p


@dataclass
class Draw:
    """One retained iteration."""

    iteration: int
    beta: np.ndarray
    sigma2: np.ndarray
    eta: np.ndarray
    lam: np.ndarray
    GammaT: np.ndarray
    GammaB: np.ndarray
    rho: np.ndarray

    @property
    def k_star(self) -> int:
        return self.lam.shape[1]

    @property
    def n_active(self) -> int:
        return int(self.rho.sum())

    def active_columns(self) -> np.ndarray:
        """Indices of factors whose contribution is not identically zero."""
        nonzero = np.any(self.lam != 0, axis=0) & np.any(self.eta != 0, axis=0)
        return np.flatnonzero(nonzero)

    def contribution(self, h: int) -> np.ndarray:
        return np.outer(self.eta[:, h], self.lam[:, h])

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        return x @ self.beta + self.eta @ self.lam.T

    @classmethod
    def from_state(cls, state: ChainState, iteration: int) -> "Draw":
        return cls(
            iteration,
            state.beta.copy(),
            state.sigma2.copy(),
            state.eta.copy(),
            state.lam.copy(),
            state.GammaT.copy(),
            state.GammaB.copy(),
            state.rho.copy(),
        )


@dataclass
class DrawStore:
    draws: list[Draw] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    wall_time: float = 0.0  # kept out of meta so meta is a pure function of the inputs

    def __len__(self):
        return len(self.draws)

    def __iter__(self):
        return iter(self.draws)

    def __getitem__(self, i) -> Draw:
        return self.draws[i]

    @property
    def k_star(self) -> np.ndarray:
        return np.array([d.k_star for d in self.draws], dtype=int)

    @property
    def n_active(self) -> np.ndarray:
        return np.array([d.n_active for d in self.draws], dtype=int)


# --------------------------------------------------------------------------
# helpers


def _shared_cholesky(Q: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(Q, lower=True)
    except linalg.LinAlgError:
        add = JITTER * float(np.mean(np.diag(Q))) if Q.size else JITTER
        try:
            return linalg.cholesky(Q + add * np.eye(Q.shape[0]), lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"shared precision of size {Q.shape[0]} is not positive definite", dim=Q.shape[0]) from exc


def _shared_precision_draws(B: np.ndarray, Q: np.ndarray, rng: RngStream) -> np.ndarray:
    """Rows ``x_m ~ N(Q^-1 B_m, Q^-1)`` for a precision ``Q`` common to all rows."""
    m, k = B.shape
    noise = rng.generator.standard_normal((m, k))
    if k == 0:
        return np.empty((m, 0))
    L = _shared_cholesky(Q)
    y = linalg.solve_triangular(L, B.T, lower=True) + noise.T
    return linalg.solve_triangular(L.T, y, lower=False).T


def _bernoulli(prob: np.ndarray, rng: RngStream) -> np.ndarray:
    return (rng.generator.random(prob.shape) < prob).astype(float)


def _fresh_columns(data: ChainData, hp: HyperParams, k: int, rng: RngStream) -> dict:
    """Per-factor state drawn from the prior for ``k`` new columns."""
    g = rng.generator
    n, p, qB = data.n, data.p, data.cov.qB
    vartheta = 1.0 / g.gamma(hp.a_theta, 1.0 / hp.b_theta, size=k)
    lambda_tilde = g.standard_normal((p, k)) * np.sqrt(vartheta)
    GammaB = g.standard_normal((qB, k)) * np.sqrt(hp.sigma_gamma2)
    q = expit(data.cov.wB @ GammaB)
    varphi = _bernoulli(q, rng)
    phi = varphi * _bernoulli(np.full((p, k), hp.c_p), rng)
    eta = g.standard_normal((n, k))
    v = g.beta(1.0, hp.alpha, size=k)
    return dict(vartheta=vartheta, lambda_tilde=lambda_tilde, GammaB=GammaB, varphi=varphi, phi=phi, eta=eta, v=v)


def _refresh_eps(state: ChainState, data: ChainData) -> None:
    state.eps = state.z - data.cov.x @ state.beta


# --------------------------------------------------------------------------
# initialisation


def init_state(y: CountMatrix, cov: Covariates, hp: HyperParams, rng: RngStream, data: ChainData | None = None) -> ChainState:
    """Starting point: link-interval midpoints for z, prior draws elsewhere."""
    data = data or ChainData.build(y, cov, hp)
    g = rng.generator
    n, p = y.n, y.p
    k = hp.k_init
    vals = np.asarray(y.values, dtype=float)
    obs = y.observed
    z = np.where(vals > 0, np.log(np.where(vals > 0, vals, 1.0) + 0.5), -1.0)
    if not obs.all():
        # held-out entries start at their column's observed average, never at their own value
        counts = obs.sum(axis=0)
        col_mean = np.where(counts > 0, np.where(obs, z, 0.0).sum(axis=0) / np.maximum(counts, 1), 0.0)
        z = np.where(obs, z, col_mean[None, :])
    GammaT = g.standard_normal((cov.d, cov.qT))
    beta = GammaT @ cov.wT.T + np.sqrt(hp.sigma_beta2) * g.standard_normal((cov.d, p))
    cols = _fresh_columns(data, hp, k, rng)
    v = cols["v"]
    if k:
        v[-1] = 1.0
    state = ChainState(
        z=z,
        beta=beta,
        GammaT=GammaT,
        eta=cols["eta"],
        lambda_tilde=cols["lambda_tilde"],
        phi=cols["phi"],
        varphi=cols["varphi"],
        rho=np.ones(k),
        vartheta=cols["vartheta"],
        v=v,
        GammaB=cols["GammaB"],
        sigma2=np.ones(p),
    )
    _refresh_eps(state, data)
    return state


# --------------------------------------------------------------------------
# steps i - ix


def step_update_z(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    """Latent z: truncated to the link interval where observed, free where held out."""
    mean = data.cov.x @ state.beta + state.eta @ state.lam.T
    var = np.broadcast_to(state.sigma2[None, :], mean.shape)
    state.z = sample_truncated_normal(mean, var, data.lower, data.upper, rng)
    return state


def step_update_gammaT(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    hp = data.hp
    s = 1.0 / hp.sigma_beta2
    Q = np.eye(data.cov.qT) + s * data.wtw
    B = s * (state.beta @ data.cov.wT)  # row l: wT^T beta_l / sigma_beta^2
    state.GammaT = _shared_precision_draws(B, Q, rng)
    return state


def step_update_beta(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    hp = data.hp
    x = data.cov.x
    d = x.shape[1]
    prec = 1.0 / state.sigma2
    s = 1.0 / hp.sigma_beta2
    R = state.z - state.eta @ state.lam.T
    P = s * np.eye(d)[None] + prec[:, None, None] * data.xtx[None]
    b = (R.T @ x) * prec[:, None] + s * (data.cov.wT @ state.GammaT.T)
    state.beta = sample_mvn_precision_batch(b, P, rng).T
    _refresh_eps(state, data)
    return state


def step_update_eta(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    lam = state.lam
    k = lam.shape[1]
    scaled = lam / state.sigma2[:, None]
    Q = np.eye(k) + lam.T @ scaled
    state.eta = _shared_precision_draws(state.eps @ scaled, Q, rng)
    return state


def step_update_sigma(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    hp = data.hp
    resid = state.eps - state.eta @ state.lam.T
    ssq = np.einsum("ij,ij->j", resid, resid)
    prec = rng.generator.gamma(hp.a_sigma + 0.5 * data.n, 1.0 / (hp.b_sigma + 0.5 * ssq))
    state.sigma2 = 1.0 / prec
    return state


def step_update_local_scale_aug(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    """Augmented logistic indicators and their Polya-Gamma coefficient update."""
    hp = data.hp
    wB = data.cov.wB
    qB = wB.shape[1]
    k = state.k_star
    lin = wB @ state.GammaB
    q = expit(lin)
    w1 = q * (1.0 - hp.c_p)
    prob = w1 / (w1 + 1.0 - q)
    U = rng.generator.random(lin.shape)
    state.varphi = np.where(state.phi == 1.0, 1.0, (U < prob).astype(float))
    omega = sample_polya_gamma(lin, rng)
    kappa = state.varphi - 0.5
    P = np.einsum("jh,ja,jb->hab", omega, wB, wB) + np.eye(qB)[None] / hp.sigma_gamma2
    b = kappa.T @ wB
    if k:
        state.GammaB = sample_mvn_precision_batch(b, P, rng).T
    return state


def step_update_lambda(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    prec = 1.0 / state.sigma2
    F = state.phi * state.rho[None, :]
    G = state.eta.T @ state.eta
    k = G.shape[0]
    P = np.einsum("ja,jb,ab->jab", F, F, G) * prec[:, None, None]
    P[:, np.arange(k), np.arange(k)] += 1.0 / state.vartheta[None, :]
    b = F * (state.eps.T @ state.eta) * prec[:, None]
    state.lambda_tilde = sample_mvn_precision_batch(b, P, rng)
    state.refresh_loadings()
    return state


def xi_log_weights(log_u: np.ndarray, h: int, delta_loglik: float) -> np.ndarray:
    """Unnormalised log pr(xi_h = l): slots l <= h exclude factor h, later ones include it."""
    w = log_u.copy()
    w[h + 1:] += delta_loglik
    return w


@numba.njit(cache=True)
def _delta_loglik(R, e, load, included, e_sq, prec):
    """Log-likelihood with factor ``(e, load)`` present minus absent.

    ``R`` is the residual with ``included * e load^T`` already subtracted.
    """
    n, p = R.shape
    total = 0.0
    for j in range(p):
        lj = load[j]
        if lj == 0.0:
            continue
        cross = included * e_sq * lj
        for i in range(n):
            cross += e[i] * R[i, j]
        total += prec[j] * (lj * cross - 0.5 * lj * lj * e_sq)
    return total


@numba.njit(cache=True)
def _xi_kernel(R, eta, load_all, rho, lam, prec, log_u, U, xi):
    n, p = R.shape
    k = rho.shape[0]
    w = np.empty(k)
    for h in range(k):
        e = eta[:, h]
        load = load_all[:, h]
        e_sq = 0.0
        for i in range(n):
            e_sq += e[i] * e[i]
        dll = _delta_loglik(R, e, load, rho[h], e_sq, prec)
        top = -np.inf
        for l in range(k):
            w[l] = log_u[l] + (dll if l > h else 0.0)
            if w[l] > top:
                top = w[l]
        total = 0.0
        for l in range(k):
            w[l] = math.exp(w[l] - top)
            total += w[l]
        target = U[h] * total
        acc = 0.0
        pick = k - 1
        for l in range(k):
            acc += w[l]
            if target < acc:
                pick = l
                break
        xi[h] = pick
        new = 1.0 if pick > h else 0.0
        if new != rho[h]:
            diff = new - rho[h]
            for j in range(p):
                if load[j] != 0.0:
                    for i in range(n):
                        R[i, j] -= diff * e[i] * load[j]
            rho[h] = new
        for j in range(p):
            lam[j, h] = new * load[j]


@numba.njit(cache=True)
def _phi_kernel(R, eta, lambda_tilde, phi, lam, rho, prec, prior1, U):
    n, p = R.shape
    k = rho.shape[0]
    for h in range(k):
        if rho[h] == 0.0:
            for j in range(p):
                phi[j, h] = 1.0 if U[j, h] < prior1[j, h] else 0.0
                lam[j, h] = 0.0
            continue
        e = eta[:, h]
        e_sq = 0.0
        for i in range(n):
            e_sq += e[i] * e[i]
        for j in range(p):
            lt = lambda_tilde[j, h]
            cross = e_sq * lam[j, h]
            for i in range(n):
                cross += e[i] * R[i, j]
            pr = prior1[j, h]
            logit = math.log(pr) - math.log1p(-pr) + prec[j] * (lt * cross - 0.5 * lt * lt * e_sq)
            if logit >= 0.0:
                prob = 1.0 / (1.0 + math.exp(-logit))
            else:
                ex = math.exp(logit)
                prob = ex / (1.0 + ex)
            new = 1.0 if U[j, h] < prob else 0.0
            if new != phi[j, h]:
                diff = (new - phi[j, h]) * lt
                for i in range(n):
                    R[i, j] -= e[i] * diff
            phi[j, h] = new
            lam[j, h] = new * lt


def step_update_rho_theta_sticks(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    """Slab indicators via the xi augmentation, then column scales and sticks.

    Factors are visited in order and each new indicator is applied to the
    loadings before the next factor's likelihoods are evaluated.
    """
    hp = data.hp
    k = state.k_star
    if k == 0:
        return state
    g = rng.generator
    with np.errstate(divide="ignore"):
        log_u = np.log(stick_breaking(state.v))
    R = state.eps - state.eta @ state.lam.T
    U = g.random(k)
    xi = np.empty(k, dtype=np.int64)
    load = np.ascontiguousarray(state.phi * state.lambda_tilde)
    lam = np.ascontiguousarray(state.lam)
    _xi_kernel(R, np.ascontiguousarray(state.eta), load, state.rho, lam, 1.0 / state.sigma2, log_u, U, xi)
    state.xi = xi
    ssq = np.einsum("jh,jh->h", state.lambda_tilde, state.lambda_tilde)
    state.vartheta = 1.0 / g.gamma(hp.a_theta + 0.5 * data.p, 1.0 / (hp.b_theta + 0.5 * ssq))
    at = np.bincount(xi, minlength=k)
    beyond = k - np.cumsum(at)  # #{xi > l}
    v = np.ones(k)
    if k > 1:
        v[:-1] = g.beta(1.0 + at[:-1], hp.alpha + beyond[:-1])
    state.v = v
    state.refresh_loadings()
    return state


def step_update_phi(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    """Local scales: prior Bernoulli for shrunk factors, likelihood-weighted otherwise.

    Sequential over factors (loadings refreshed after each), vectorised over genes.
    """
    hp = data.hp
    k = state.k_star
    if k == 0:
        return state
    prior1 = np.ascontiguousarray(hp.c_p * expit(data.cov.wB @ state.GammaB))
    U = rng.generator.random(prior1.shape)
    R = state.eps - state.eta @ state.lam.T
    phi = np.ascontiguousarray(state.phi)
    lam = np.ascontiguousarray(state.lam)
    _phi_kernel(R, np.ascontiguousarray(state.eta), np.ascontiguousarray(state.lambda_tilde), phi, lam, state.rho, 1.0 / state.sigma2, prior1, U)
    state.phi = phi
    state.refresh_loadings()
    return state


# --------------------------------------------------------------------------
# truncation adaptation


def _take_columns(state: ChainState, idx: np.ndarray) -> None:
    for name in ("eta", "lambda_tilde", "phi", "varphi", "GammaB"):
        setattr(state, name, getattr(state, name)[:, idx])
    for name in ("rho", "vartheta", "v", "xi"):
        setattr(state, name, getattr(state, name)[idx])


def _append_fresh_column(state: ChainState, data: ChainData, rng: RngStream) -> None:
    cols = _fresh_columns(data, data.hp, 1, rng)
    for name in ("eta", "lambda_tilde", "phi", "varphi", "GammaB"):
        setattr(state, name, np.concatenate([getattr(state, name), cols[name]], axis=1))
    state.vartheta = np.concatenate([state.vartheta, cols["vartheta"]])
    state.rho = np.concatenate([state.rho, [0.0]])
    state.xi = np.concatenate([state.xi, [0]])
    # a column that used to close the stick needs a proper fraction now
    stale = np.flatnonzero(state.v >= 1.0)
    v = state.v.copy()
    if stale.size:
        v[stale] = rng.generator.beta(1.0, data.hp.alpha, size=stale.size)
    state.v = np.concatenate([v, [1.0]])


def adapt_truncation(state: ChainState, data: ChainData, t: int, rng: RngStream) -> dict | None:
    """Possibly resize the factor truncation at iteration ``t``.

    With probability ``exp(c0 + c1 t)``: when more than one column is shrunk
    (``rho = 0``) the shrunk columns are removed and a single prior-drawn
    shrunk column is appended; otherwise, below ``k_max``, one prior-drawn
    column is appended. Returns the logged event, or ``None``.
    """
    hp = data.hp
    if t < hp.adapt_start:
        return None
    if rng.generator.random() >= hp.adapt_probability(t):
        return None
    k = state.k_star
    active = np.flatnonzero(state.rho == 1.0)
    if active.size < k - 1:
        _take_columns(state, active)
        _append_fresh_column(state, data, rng)
        action = "drop"
    elif k < hp.k_max:
        _append_fresh_column(state, data, rng)
        action = "grow"
    else:
        return None
    state.refresh_loadings()
    return {"iteration": int(t), "action": action, "k_before": int(k), "k_after": int(state.k_star), "n_active": int(active.size)}


# --------------------------------------------------------------------------
# driver

STEPS = (
    step_update_z,
    step_update_gammaT,
    step_update_beta,
    step_update_eta,
    step_update_sigma,
    step_update_local_scale_aug,
    step_update_lambda,
    step_update_rho_theta_sticks,
    step_update_phi,
)


def gibbs_sweep(state: ChainState, data: ChainData, rng: RngStream) -> ChainState:
    for step in STEPS:
        step(state, data, rng)
    return state


def run_chain(
    y: CountMatrix,
    cov: Covariates,
    hp: HyperParams,
    *,
    keep_draws: bool = True,
    on_draw=None,
    progress_every: int = 0,
    adapt: bool = True,
) -> DrawStore:
    """Run the adaptive Gibbs sampler and return the thinned post-burn-in draws.

    ``on_draw(draw)`` is called for every retained draw; with
    ``keep_draws=False`` the draws are only streamed to it, which keeps
    memory flat for long benchmark chains.
    """
    checked = validate_inputs(y, cov, hp)
    y, cov, hp = checked.y, checked.cov, checked.hp
    data = ChainData.build(y, cov, hp)
    rng = RngStream(hp.seed)
    state = init_state(y, cov, hp, rng, data)
    store = DrawStore(
        meta={
            "iterations": hp.iterations,
            "burn_in": hp.burn_in,
            "thin": hp.thin,
            "seed": hp.seed,
            "n": y.n,
            "p": y.p,
            "hyperparams": {k: getattr(hp, k) for k in HyperParams.field_names()},
            "events": [],
            "active_trace": [],
            "k_trace": [],
            "warnings": list(checked.warnings),
        }
    )
    events, active_trace, k_trace = store.meta["events"], store.meta["active_trace"], store.meta["k_trace"]
    started = time.perf_counter()
    for t in range(1, hp.iterations + 1):
        try:
            gibbs_sweep(state, data, rng)
            event = adapt_truncation(state, data, t, rng) if adapt else None
        except (NumericalError, FloatingPointError, ValueError) as exc:
            raise ChainError(str(exc), t) from exc
        if event is not None:
            events.append(event)
        active_trace.append(state.n_active)
        k_trace.append(state.k_star)
        if t > hp.burn_in and (t - hp.burn_in) % hp.thin == 0:
            draw = Draw.from_state(state, t)
            if keep_draws:
                store.draws.append(draw)
            if on_draw is not None:
                on_draw(draw)
        if progress_every and t % progress_every == 0:
            log.info("iter %d/%d  k*=%d active=%d  %.1fs", t, hp.iterations, state.k_star, state.n_active, time.perf_counter() - started)
    store.meta["n_retained"] = hp.n_retained
    store.wall_time = time.perf_counter() - started
    return store
