"""Identifiable summaries of a DrawStore.

Rank-one contributions ``eta_h lam_h^T`` are compared through
``|a b^T - c d^T|_F^2 = |a|^2 |b|^2 + |c|^2 |d|^2 - 2 (a.c)(b.d)``, so no
n x p matrix is formed per draw.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gibbs import Draw, DrawStore
from .model import Covariates, LinkOverflowWarning, apply_link

GRAPH_THRESHOLD = 0.025
JITTER = 1e-8


def _rank_one_sqdist(a, b, c, d) -> np.ndarray:
    """Squared Frobenius distances between columns of (a, b) and columns of (c, d)."""
    aa = np.sum(a * a, axis=0) * np.sum(b * b, axis=0)
    cc = np.sum(c * c, axis=0) * np.sum(d * d, axis=0)
    cross = (a.T @ c) * (b.T @ d)
    return np.maximum(aa[:, None] + cc[None, :] - 2.0 * cross, 0.0)


@dataclass
class AlignedContributions:
    """Per-draw matching of contributions to the final draw's ordering.

    ``permutations[t][h]`` is the column of draw ``t`` assigned to reference
    slot ``h`` or -1 when the draw had no column left for that slot.
    ``surplus[t]`` lists the active columns of draw ``t`` left unmatched.
    """

    reference_order: np.ndarray
    permutations: list[np.ndarray]
    surplus: list[np.ndarray]
    mean_eta_lam: list[tuple[np.ndarray, np.ndarray]] = field(repr=False)
    mean_contributions: list[np.ndarray] = field(repr=False)
    frobenius_norms: np.ndarray = None
    residual_contribution: np.ndarray = field(repr=False, default=None)

    @property
    def k(self) -> int:
        return len(self.reference_order)

    @property
    def n_surplus(self) -> np.ndarray:
        return np.array([s.size for s in self.surplus], dtype=int)


def match_to_reference(ref_eta, ref_lam, draw: Draw) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in reference order; returns (slot -> column, unmatched columns)."""
    cand = draw.active_columns()
    k = ref_eta.shape[1]
    perm = np.full(k, -1, dtype=int)
    if cand.size == 0 or k == 0:
        return perm, cand
    dist = _rank_one_sqdist(ref_eta, ref_lam, draw.eta[:, cand], draw.lam[:, cand])
    free = np.ones(cand.size, dtype=bool)
    for h in range(k):
        if not free.any():
            break
        row = np.where(free, dist[h], np.inf)
        l = int(np.argmin(row))
        perm[h] = cand[l]
        free[l] = False
    return perm, cand[free]


def align_contributions(draws: DrawStore) -> AlignedContributions:
    """Match every draw's contributions to the final draw's, sorted by decreasing norm.

    Slots a draw cannot fill count as zero contributions in the means;
    unmatched surplus columns are averaged into ``residual_contribution``.
    """
    if len(draws) == 0:
        raise ValueError("cannot align an empty DrawStore")
    last = draws[len(draws) - 1]
    active = last.active_columns()
    norms = np.linalg.norm(last.eta[:, active], axis=0) * np.linalg.norm(last.lam[:, active], axis=0)
    order = active[np.argsort(-norms, kind="stable")]
    ref_eta, ref_lam = last.eta[:, order], last.lam[:, order]
    n, p = last.eta.shape[0], last.lam.shape[0]
    T, k = len(draws), order.size
    E = np.zeros((k, n, T))
    L = np.zeros((k, p, T))
    residual = np.zeros((n, p))
    perms, surplus = [], []
    for t, d in enumerate(draws):
        perm, extra = match_to_reference(ref_eta, ref_lam, d)
        perms.append(perm)
        surplus.append(extra)
        for h, col in enumerate(perm):
            if col >= 0:
                E[h, :, t] = d.eta[:, col]
                L[h, :, t] = d.lam[:, col]
        if extra.size:
            residual += d.eta[:, extra] @ d.lam[:, extra].T
    means = [E[h] @ L[h].T / T for h in range(k)]
    return AlignedContributions(
        reference_order=order,
        permutations=perms,
        surplus=surplus,
        mean_eta_lam=[(E[h], L[h]) for h in range(k)],
        mean_contributions=means,
        frobenius_norms=np.array([np.linalg.norm(m) for m in means]) if k else np.zeros(0),
        residual_contribution=residual / T,
    )


def apply_alignment(draws: DrawStore, aligned: AlignedContributions) -> DrawStore:
    """Reorder every draw's factors into reference slots, then its surplus columns.

    Empty slots become zero columns with ``rho = 0``; inactive columns are
    dropped. Aligning the result again gives identity permutations.
    """
    out = []
    for d, perm, extra in zip(draws, aligned.permutations, aligned.surplus):
        cols = list(perm) + list(extra)
        k = len(cols)
        eta = np.zeros((d.eta.shape[0], k))
        lam = np.zeros((d.lam.shape[0], k))
        gB = np.zeros((d.GammaB.shape[0], k))
        rho = np.zeros(k)
        for h, c in enumerate(cols):
            if c >= 0:
                eta[:, h], lam[:, h], gB[:, h], rho[h] = d.eta[:, c], d.lam[:, c], d.GammaB[:, c], d.rho[c]
        out.append(Draw(d.iteration, d.beta, d.sigma2, eta, lam, d.GammaT, gB, rho))
    return DrawStore(out, dict(draws.meta))


def representative_draw(draws: DrawStore, aligned: AlignedContributions) -> tuple[int, np.ndarray, np.ndarray]:
    """Draw minimising the summed Frobenius distance of its aligned contributions to the means.

    Returns ``(index, eta, lam)`` with columns in reference order; ties go
    to the earliest draw.
    """
    if len(draws) == 0:
        raise ValueError("empty DrawStore")
    k = aligned.k
    if k == 0:
        d = draws[0]
        return 0, d.eta[:, :0], d.lam[:, :0]
    mean_sq = np.array([np.sum(m * m) for m in aligned.mean_contributions])
    total = np.zeros(len(draws))
    for h in range(k):
        E, L = aligned.mean_eta_lam[h]
        C = aligned.mean_contributions[h]
        own = np.sum(E * E, axis=0) * np.sum(L * L, axis=0)
        cross = np.sum(E * (C @ L), axis=0)
        total += np.sqrt(np.maximum(own - 2.0 * cross + mean_sq[h], 0.0))
    t = int(np.argmin(total))
    eta = np.column_stack([aligned.mean_eta_lam[h][0][:, t] for h in range(k)])
    lam = np.column_stack([aligned.mean_eta_lam[h][1][:, t] for h in range(k)])
    return t, eta, lam


# --------------------------------------------------------------------------
# beta summary

BETA_COLUMNS = ("covariate", "min", "q1", "median", "q3", "max", "n_excluding_zero")


def summarize_beta(draws: DrawStore, level: float = 0.9, names=None) -> list[dict]:
    """Per covariate: spread of the p posterior means and the count of genes
    whose equal-tailed ``level`` interval excludes zero."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if len(draws) == 0:
        raise ValueError("empty DrawStore")
    B = np.stack([d.beta for d in draws])  # T x d x p
    means = B.mean(axis=0)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(B, [tail, 1.0 - tail], axis=0)
    excl = (lo > 0) | (hi < 0)
    names = list(names) if names is not None else [f"x{c}" for c in range(B.shape[1])]
    rows = []
    for c in range(B.shape[1]):
        qs = np.quantile(means[c], [0.0, 0.25, 0.5, 0.75, 1.0])
        rows.append(dict(zip(BETA_COLUMNS, [names[c], *map(float, qs), int(excl[c].sum())])))
    return rows


def beta_table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BETA_COLUMNS)
    for r in rows:
        w.writerow([r["covariate"], *(repr(r[c]) for c in BETA_COLUMNS[1:-1]), r["n_excluding_zero"]])
    return buf.getvalue()


# --------------------------------------------------------------------------
# gene graph


@dataclass
class GeneGraph:
    nodes: list[str]
    edges: list[tuple[int, int, float]]
    threshold: float
    partial: np.ndarray = field(repr=False, default=None)
    flagged_draws: list[int] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gene_j", "gene_jp", "weight"])
        for j, jp, wt in self.edges:
            w.writerow([self.nodes[j], self.nodes[jp], repr(float(wt))])
        return buf.getvalue()


def partial_correlations(lam: np.ndarray, sigma2: np.ndarray, form: str = "correlation") -> tuple[np.ndarray, bool]:
    """Partial correlations of ``Omega = lam lam^T + diag(sigma2)``.

    The inverse uses the Woodbury identity, so the cost is O(p^2 k). With
    ``form="correlation"`` Omega is first rescaled to unit diagonal; the
    partial correlations agree with the covariance form up to rounding.
    Returns the matrix and whether jitter was needed.
    """
    if form not in ("correlation", "covariance"):
        raise ValueError(f"unknown form {form!r}")
    s2 = np.asarray(sigma2, dtype=float)
    lam = np.asarray(lam, dtype=float)
    jittered = False
    for attempt in range(2):
        if form == "correlation":
            scale = 1.0 / np.sqrt(np.sum(lam * lam, axis=1) + s2)
            L, S = lam * scale[:, None], s2 * scale**2
        else:
            L, S = lam, s2
        with np.errstate(divide="ignore", invalid="ignore"):
            U = L / S[:, None]
            M = np.eye(L.shape[1]) + L.T @ U
            try:
                P = -(U @ np.linalg.solve(M, U.T))
            except np.linalg.LinAlgError:
                P = np.full((L.shape[0],) * 2, np.nan)
            P[np.diag_indices_from(P)] += 1.0 / S
            dg = np.diag(P)
            R = -P / np.sqrt(np.outer(dg, dg))
        if np.all(np.isfinite(R)) and np.all(dg > 0):
            break
        jittered = True
        s2 = s2 + JITTER * np.mean(np.sum(lam * lam, axis=1) + s2)
    else:
        raise FloatingPointError("partial correlations are not finite after jitter")
    np.fill_diagonal(R, 1.0)
    R = 0.5 * (R + R.T)
    return np.clip(R, -1.0, 1.0), jittered


def covariance_graph(draws: DrawStore, threshold: float = GRAPH_THRESHOLD, names=None, form: str = "correlation") -> GeneGraph:
    """Posterior-mean partial-correlation graph with ``|weight| >= threshold`` edges."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if len(draws) == 0:
        raise ValueError("empty DrawStore")
    p = draws[0].lam.shape[0]
    acc = np.zeros((p, p))
    flagged = []
    for t, d in enumerate(draws):
        R, jit = partial_correlations(d.lam, d.sigma2, form)
        if jit:
            flagged.append(t)
        acc += R
    mean = acc / len(draws)
    names = list(names) if names is not None else [f"g{j}" for j in range(p)]
    jj, kk = np.triu_indices(p, 1)
    w = mean[jj, kk]
    keep = (np.abs(w) >= threshold) & (w != 0)
    edges = [(int(a), int(b), float(c)) for a, b, c in zip(jj[keep], kk[keep], w[keep])]
    return GeneGraph(names, edges, float(threshold), mean, flagged)


# --------------------------------------------------------------------------
# holdout prediction


@dataclass
class HoldoutPrediction:
    per_draw: np.ndarray  # T x m predicted counts, m = number of masked entries
    mean: np.ndarray
    mae_per_draw: np.ndarray | None = None

    @property
    def mae(self) -> float | None:
        return None if self.mae_per_draw is None else float(np.mean(self.mae_per_draw))


def predict_holdout(draws: DrawStore, cov: Covariates, mask, y=None, noise: bool = False, rng=None) -> HoldoutPrediction:
    """Per-draw ``floor(exp(m))`` at masked entries, optionally scored against ``y``.

    ``noise=True`` adds a residual draw ``N(0, sigma_j^2)`` to ``m`` before
    the link, which needs ``rng`` (a numpy Generator).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no entries")
    if noise and rng is None:
        raise ValueError("noise=True needs an rng")
    cols = np.nonzero(mask)[1]
    held = None if y is None else np.asarray(getattr(y, "values", y), dtype=float)[mask]
    preds, maes = [], []
    for d in draws:
        m = d.linear_predictor(cov.x)[mask]
        if noise:
            m = m + np.sqrt(d.sigma2[cols]) * rng.standard_normal(m.size)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinkOverflowWarning)
            yhat = apply_link(m)
        preds.append(yhat)
        if held is not None:
            maes.append(np.mean(np.abs(held - yhat)))
    per = np.array(preds)
    return HoldoutPrediction(per, per.mean(axis=0), np.array(maes) if held is not None else None)
