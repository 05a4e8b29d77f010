"""Forward simulation from the prior and the successive-conditional Geweke test."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from cosin.gibbs import ChainData, gibbs_sweep
from cosin.model import ChainState, CountMatrix, Covariates, HyperParams, apply_link, stick_breaking
from cosin.rng import RngStream


def forward_state(cov: Covariates, hp: HyperParams, k: int, g: np.random.Generator) -> ChainState:
    """Draw every parameter from the truncated prior, independently of the sampler code."""
    n, p = cov.x.shape[0], cov.wT.shape[0]
    GammaT = g.normal(size=(cov.d, cov.qT))
    beta = GammaT @ cov.wT.T + np.sqrt(hp.sigma_beta2) * g.normal(size=(cov.d, p))
    v = g.beta(1.0, hp.alpha, size=k)
    v[-1] = 1.0
    u = stick_breaking(v)
    xi = g.choice(k, size=k, p=u / u.sum())
    rho = (xi > np.arange(k)).astype(float)
    vartheta = 1.0 / g.gamma(hp.a_theta, 1.0 / hp.b_theta, size=k)
    GammaB = g.normal(size=(cov.qB, k)) * np.sqrt(hp.sigma_gamma2)
    q = expit(cov.wB @ GammaB)
    varphi = (g.random((p, k)) < q).astype(float)
    phi = varphi * (g.random((p, k)) < hp.c_p)
    lambda_tilde = g.normal(size=(p, k)) * np.sqrt(vartheta)
    eta = g.normal(size=(n, k))
    sigma2 = 1.0 / g.gamma(hp.a_sigma, 1.0 / hp.b_sigma, size=p)
    state = ChainState(
        z=np.zeros((n, p)), beta=beta, GammaT=GammaT, eta=eta, lambda_tilde=lambda_tilde, phi=phi,
        varphi=varphi, rho=rho, vartheta=vartheta, v=v, GammaB=GammaB, sigma2=sigma2, xi=xi,
    )
    simulate_data(state, cov, g)
    return state


def simulate_data(state: ChainState, cov: Covariates, g: np.random.Generator) -> np.ndarray:
    """Refresh z and return y = floor(exp(z)) given the parameters."""
    mean = cov.x @ state.beta + state.eta @ state.lam.T
    state.z = mean + np.sqrt(state.sigma2)[None, :] * g.normal(size=mean.shape)
    state.eps = state.z - cov.x @ state.beta
    return apply_link(state.z)


def statistics(state: ChainState) -> np.ndarray:
    """sigma_j^2 (p), beta (d*p) and pi_1."""
    return np.concatenate([state.sigma2, state.beta.ravel(), [stick_breaking(state.v)[0]]])


def batch_se(x: np.ndarray, batches: int = 50) -> np.ndarray:
    m = len(x) // batches
    means = x[: m * batches].reshape(batches, m, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(batches)


def geweke(n=8, p=6, k=3, marginal=20000, successive=40000, seed=11, hp: HyperParams | None = None):
    """Return (z-scores, marginal means, chain means) for the test statistics."""
    hp = hp or HyperParams(
        alpha=2.0, a_sigma=3.0, b_sigma=3.0, a_theta=3.0, b_theta=3.0, k_init=k, k_max=k,
        iterations=successive, burn_in=0,
    )
    g = np.random.default_rng(seed)
    cov = Covariates(np.ones((n, 1)), np.ones((p, 1)), (np.arange(p) < p // 2).astype(float))
    mc = np.array([statistics(forward_state(cov, hp, k, g)) for _ in range(marginal)])
    state = forward_state(cov, hp, k, g)
    rng = RngStream(seed, 1)
    sc = np.empty((successive, mc.shape[1]))
    y = simulate_data(state, cov, g)
    for t in range(successive):
        data = ChainData.build(CountMatrix(y), cov, hp)
        gibbs_sweep(state, data, rng)
        y = simulate_data(state, cov, g)
        sc[t] = statistics(state)
    se = np.sqrt(mc.std(axis=0, ddof=1) ** 2 / marginal + batch_se(sc) ** 2)
    zscores = (sc.mean(axis=0) - mc.mean(axis=0)) / se
    return zscores, mc.mean(axis=0), sc.mean(axis=0)
