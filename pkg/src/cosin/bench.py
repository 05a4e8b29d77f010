"""Synthetic scenarios, holdout/recovery scoring and the replicate benchmark."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .gibbs import Draw, run_chain
from .model import CountMatrix, Covariates, HyperParams, LinkOverflowWarning, apply_link
from .rng import RngStream

log = logging.getLogger(__name__)

#: (n, p) grid and idiosyncratic standard deviations of the six scenarios.
REFERENCE_DIMS = ((50, 100), (200, 100), (200, 1000))
REFERENCE_SIGMAS = (0.1, 1.0)
BASELINE_KS = tuple(range(2, 9))
METHODS = ("cosin_nometa", "cosin", "baseline")
MU_FLOOR = 1e-8


@dataclass(frozen=True)
class SimScenario:
    n: int
    p: int
    sigma: float
    replicate_seed: int = 0
    holdout_fraction: float = 0.25

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("scenario dimensions must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")

    @property
    def key(self) -> tuple:
        return (self.n, self.p, self.sigma)


def reference_grid(dims=REFERENCE_DIMS, sigmas=REFERENCE_SIGMAS) -> list[SimScenario]:
    return [SimScenario(n, p, s) for (n, p) in dims for s in sigmas]


@dataclass
class SimTruth:
    z_true: np.ndarray
    eta: np.ndarray  # n x 3 true scores
    lam: np.ndarray  # p x 3 true loadings
    w_B: np.ndarray
    y: CountMatrix

    @property
    def contributions(self) -> list[np.ndarray]:
        return [np.outer(self.eta[:, h], self.lam[:, h]) for h in range(self.eta.shape[1])]

    @property
    def signal(self) -> np.ndarray:
        return self.eta @ self.lam.T


def generate(scenario: SimScenario) -> SimTruth:
    """Zero-mean three-contribution DGP with row-sparse C2 and column-sparse C3."""
    g = RngStream(scenario.replicate_seed, 0).generator
    n, p, s = scenario.n, scenario.p, scenario.sigma
    eta1 = g.standard_normal(n)
    eta3 = g.standard_normal(n)
    lam1 = g.standard_normal(p)
    lam2 = g.standard_normal(p)
    eta2 = np.ones(n)
    low = np.arange(1, n + 1) > n / 2
    eta2[low] = 0.05 * g.standard_normal(int(low.sum()))
    lam3 = np.ones(p)
    right = np.arange(1, p + 1) > p / 2
    lam3[right] = 0.05 * g.standard_normal(int(right.sum()))
    eta = np.column_stack([eta1, eta2, eta3])
    lam = np.column_stack([lam1, lam2, lam3])
    z = eta @ lam.T + s * g.standard_normal((n, p))
    w_B = (~right).astype(float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinkOverflowWarning)
        y = apply_link(z)
    return SimTruth(z, eta, lam, w_B, CountMatrix(y))


def mask_holdout(truth: SimTruth, fraction: float, rng) -> CountMatrix:
    """Hold out ``floor(fraction * n * p)`` entries uniformly without replacement."""
    g = rng.generator if isinstance(rng, RngStream) else rng
    n, p = truth.y.n, truth.y.p
    size = int(math.floor(fraction * n * p))
    mask = np.zeros(n * p, dtype=bool)
    if size:
        mask[g.choice(n * p, size=size, replace=False)] = True
    return CountMatrix(truth.y.values, mask.reshape(n, p))


# --------------------------------------------------------------------------
# scores


def mae(y_true, predictions, mask) -> float:
    """Mean absolute error over held-out entries.

    ``predictions`` is either a full n x p matrix or the vector of held-out
    predictions in row-major mask order.
    """
    y = np.asarray(y_true.values if isinstance(y_true, CountMatrix) else y_true, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    pred = np.asarray(predictions, dtype=float)
    if pred.shape == y.shape:
        pred = pred[mask]
    if pred.shape != (int(mask.sum()),):
        raise ValueError("predictions do not line up with the mask")
    if not mask.any():
        raise ValueError("mask selects no entries")
    return float(np.mean(np.abs(y[mask] - pred)))


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse_contributions(true: list[np.ndarray], estimated: list[np.ndarray]) -> tuple[float, ...]:
    """Per-contribution RMSE after the best matching of estimated to true.

    Every injection of the true contributions into the estimated index set
    is tried and the one with the smallest total RMSE kept; with fewer
    estimated than true contributions, zero matrices fill the gap.
    """
    if not estimated:
        raise ValueError("need at least one estimated contribution")
    shape = true[0].shape
    est = list(estimated) + [np.zeros(shape)] * max(0, len(true) - len(estimated))
    cost = np.array([[_rmse(t, e) for e in est] for t in true])
    best, best_total = None, np.inf
    for perm in itertools.permutations(range(len(est)), len(true)):
        total = cost[np.arange(len(true)), perm].sum()
        if total < best_total:
            best, best_total = perm, total
    return tuple(float(cost[i, j]) for i, j in enumerate(best))


def rank_one_rmse_matrix(true_a, true_b, est_a, est_b) -> np.ndarray:
    """RMSE between every true and estimated rank-one contribution ``a b^T``.

    Uses ``|A - B|_F^2 = |a|^2|b|^2 + |c|^2|d|^2 - 2 (a.c)(b.d)`` so nothing
    n x p is formed.
    """
    n, p = true_a.shape[0], true_b.shape[0]
    tt = np.sum(true_a**2, axis=0) * np.sum(true_b**2, axis=0)
    ee = np.sum(est_a**2, axis=0) * np.sum(est_b**2, axis=0)
    cross = (true_a.T @ est_a) * (true_b.T @ est_b)
    sq = tt[:, None] + ee[None, :] - 2.0 * cross
    return np.sqrt(np.maximum(sq, 0.0) / (n * p))


def match_rmse(cost: np.ndarray) -> np.ndarray:
    """Per-row RMSE under the assignment minimising the summed cost.

    ``cost`` is true x estimated; missing estimated columns count as zero
    matrices, so callers pad with the rows' norms when needed.
    """
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(cost.shape[0])
    out[rows] = cost[rows, cols]
    return out


def draw_rmse(truth: SimTruth, draw: Draw) -> np.ndarray:
    active = draw.active_columns()
    cost = rank_one_rmse_matrix(truth.eta, truth.lam, draw.eta[:, active], draw.lam[:, active])
    missing = truth.eta.shape[1] - cost.shape[1]
    if missing > 0:
        zero = np.sqrt(np.sum(truth.eta**2, axis=0) * np.sum(truth.lam**2, axis=0) / (truth.y.n * truth.y.p))
        cost = np.hstack([cost, np.repeat(zero[:, None], missing, axis=1)])
    return match_rmse(cost)


# --------------------------------------------------------------------------
# Pearson-residual PCA baseline


@dataclass
class BaselineFit:
    k: int
    mu: np.ndarray
    residuals: np.ndarray
    reconstruction: np.ndarray
    scores: np.ndarray  # n x k, left singular vectors times singular values
    loadings: np.ndarray  # p x k

    @property
    def counts(self) -> np.ndarray:
        return np.rint(np.maximum(self.reconstruction, 0.0)).astype(np.int64)

    def log_contributions(self) -> list[np.ndarray]:
        """Rank-one residual components moved to the log-mean scale, ``r_h / sqrt(mu)``."""
        root = np.sqrt(self.mu)
        return [np.outer(self.scores[:, h], self.loadings[:, h]) / root for h in range(self.k)]


def baseline_pearson_pca(y_masked: CountMatrix, k: int) -> BaselineFit:
    """Rank-k PCA of Pearson residuals under the null Poisson model.

    Null means come from observed row and column totals; held-out
    residuals are set to zero before the SVD.
    """
    n, p = y_masked.n, y_masked.p
    if not 1 <= k <= min(n, p):
        raise ValueError(f"k={k} must lie in [1, {min(n, p)}]")
    obs = y_masked.observed
    y = np.where(obs, np.asarray(y_masked.values, dtype=float), 0.0)
    rows = y.sum(axis=1)
    cols = y.sum(axis=0)
    total = y.sum()
    mu = np.outer(rows, cols) / total if total > 0 else np.zeros((n, p))
    mu = np.maximum(mu, MU_FLOOR)
    root = np.sqrt(mu)
    r = np.where(obs, (y - mu) / root, 0.0)
    U, s, Vt = np.linalg.svd(r, full_matrices=False)
    scores = U[:, :k] * s[:k]
    loadings = Vt[:k].T
    r_k = scores @ loadings.T
    return BaselineFit(k, mu, r, mu + root * r_k, scores, loadings)


# --------------------------------------------------------------------------
# COSIN fits


def cosin_covariates(truth: SimTruth, meta: bool | str = True) -> Covariates:
    """Intercept-only x and wT; wB is the pathway-style indicator or an intercept.

    ``meta`` may be True (indicator), False (intercept-only wB) or ``"none"``
    (all-zero wB, which pins E(phi) at c_p / 2).
    """
    n, p = truth.y.n, truth.y.p
    if meta is True:
        wB = truth.w_B[:, None]
    elif meta == "none":
        wB = np.zeros((p, 1))
    else:
        wB = np.ones((p, 1))
    return Covariates(np.ones((n, 1)), np.ones((p, 1)), wB)


@dataclass
class CosinScore:
    mae: float
    rmse: tuple[float, float, float]
    modal_active: int
    n_draws: int
    mae_trace: np.ndarray = field(repr=False, default=None)


def score_cosin(truth: SimTruth, y_masked: CountMatrix, cov: Covariates, hp: HyperParams) -> CosinScore:
    """Run one chain and average per-draw holdout MAE and contribution RMSE."""
    mask = y_masked.mask
    y_held = np.asarray(truth.y.values, dtype=float)[mask]
    maes, rmses = [], []

    def on_draw(draw: Draw):
        m = draw.linear_predictor(cov.x)[mask]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinkOverflowWarning)
            pred = apply_link(m)
        maes.append(float(np.mean(np.abs(y_held - pred))))
        rmses.append(draw_rmse(truth, draw))

    store = run_chain(y_masked, cov, hp, keep_draws=False, on_draw=on_draw)
    burn = hp.burn_in
    active = np.asarray(store.meta["active_trace"][burn:])
    modal = int(np.bincount(active).argmax()) if active.size else 0
    r = np.mean(rmses, axis=0)
    return CosinScore(float(np.mean(maes)), tuple(float(v) for v in r), modal, len(maes), np.array(maes))


def score_baseline(truth: SimTruth, y_masked: CountMatrix, ks=BASELINE_KS) -> dict:
    """Fit every k, keep the one with the lowest holdout MAE."""
    best = None
    for k in ks:
        if k > min(truth.y.n, truth.y.p):
            continue
        fit = baseline_pearson_pca(y_masked, k)
        err = mae(truth.y, fit.counts, y_masked.mask)
        if best is None or err < best[0]:
            best = (err, fit)
    err, fit = best
    rmse = rmse_contributions(truth.contributions, fit.log_contributions())
    return {"mae": err, "rmse": rmse, "k": fit.k}


# --------------------------------------------------------------------------
# benchmark driver


@dataclass(frozen=True)
class BenchConfig:
    scenarios: tuple[SimScenario, ...]
    replicates: int = 50
    methods: tuple[str, ...] = METHODS
    hp: HyperParams = HyperParams()
    base_seed: int = 2024
    baseline_ks: tuple[int, ...] = BASELINE_KS
    nometa_variant: str = "intercept"
    workers: int = 1


def replicate_seed(base_seed: int, scenario: SimScenario, replicate: int) -> int:
    key = (scenario.n, scenario.p, int(round(scenario.sigma * 1e6)), replicate)
    return int(np.random.SeedSequence([base_seed & (2**64 - 1), *key]).generate_state(1, np.uint64)[0])


def run_replicate(config: BenchConfig, scenario_index: int, replicate: int) -> list[dict]:
    scen = config.scenarios[scenario_index]
    seed = replicate_seed(config.base_seed, scen, replicate)
    scen = replace(scen, replicate_seed=seed)
    truth = generate(scen)
    y_masked = mask_holdout(truth, scen.holdout_fraction, RngStream(seed, 1))
    base = {"n": scen.n, "p": scen.p, "sigma": scen.sigma, "replicate": replicate}
    rows = []
    for mi, method in enumerate(config.methods):
        if method == "baseline":
            res = score_baseline(truth, y_masked, config.baseline_ks)
            rows.append({**base, "method": method, "mae": res["mae"], "rmse_C1": res["rmse"][0],
                         "rmse_C2": res["rmse"][1], "rmse_C3": res["rmse"][2], "k": res["k"]})
            continue
        if method == "cosin":
            cov = cosin_covariates(truth, True)
        elif method == "cosin_nometa":
            cov = cosin_covariates(truth, "none" if config.nometa_variant == "none" else False)
        else:
            raise ValueError(f"unknown method {method!r}")
        chain_seed = int(np.random.SeedSequence([seed, 7, mi]).generate_state(1, np.uint64)[0])
        res = score_cosin(truth, y_masked, cov, replace(config.hp, seed=chain_seed))
        rows.append({**base, "method": method, "mae": res.mae, "rmse_C1": res.rmse[0],
                     "rmse_C2": res.rmse[1], "rmse_C3": res.rmse[2], "k": res.modal_active})
    return rows


def _job(args):
    config, si, r = args
    try:
        return si, r, run_replicate(config, si, r), None
    except Exception as exc:  # recorded and excluded from aggregation
        return si, r, None, f"{type(exc).__name__}: {exc}"


METRICS = ("mae", "rmse_C1", "rmse_C2", "rmse_C3", "k")


@dataclass
class BenchReport:
    rows: list[dict]
    failures: list[dict]
    config: BenchConfig

    def values(self, scenario_key, method: str, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows if (r["n"], r["p"], r["sigma"]) == tuple(scenario_key) and r["method"] == method])

    def median(self, scenario_key, method, metric) -> float:
        return float(np.median(self.values(scenario_key, method, metric)))

    def summary(self) -> list[dict]:
        out = []
        for scen in self.config.scenarios:
            n_failed = sum(1 for f in self.failures if (f["n"], f["p"], f["sigma"]) == scen.key)
            for method in self.config.methods:
                for metric in METRICS:
                    vals = self.values(scen.key, method, metric)
                    if vals.size == 0:
                        med = iqr = float("nan")
                    else:
                        q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
                        iqr = q3 - q1
                    out.append({"n": scen.n, "p": scen.p, "sigma": scen.sigma, "method": method, "metric": metric,
                                "median": float(med), "iqr": float(iqr), "n_ok": int(vals.size), "n_failed": n_failed})
        return out

    def summary_csv(self) -> str:
        return _to_csv(self.summary(), ["n", "p", "sigma", "method", "metric", "median", "iqr", "n_ok", "n_failed"])

    def replicates_csv(self) -> str:
        return _to_csv(self.rows, ["n", "p", "sigma", "replicate", "method", "mae", "rmse_C1", "rmse_C2", "rmse_C3", "k"])

    def text_tables(self) -> str:
        lines = [f"Median holdout MAE over replicates (IQR in parentheses)", ""]
        head = f"{'(n,p,sigma)':>18}" + "".join(f"{m:>22}" for m in self.config.methods)
        lines.append(head)
        for scen in self.config.scenarios:
            cells = []
            for m in self.config.methods:
                vals = self.values(scen.key, m, "mae")
                cells.append(_cell(vals, 4))
            lines.append(f"{_label(scen):>18}" + "".join(f"{c:>22}" for c in cells))
        lines += ["", "Median contribution RMSE over replicates (IQR in parentheses)", ""]
        methods = [m for m in self.config.methods if m != "cosin_nometa"] or list(self.config.methods)
        lines.append(f"{'(n,p,sigma)':>18}" + "".join(f"{m + ' ' + c:>18}" for m in methods for c in ("C1", "C2", "C3")))
        for scen in self.config.scenarios:
            cells = [_cell(self.values(scen.key, m, f"rmse_{c}"), 2) for m in methods for c in ("C1", "C2", "C3")]
            lines.append(f"{_label(scen):>18}" + "".join(f"{c:>18}" for c in cells))
        n_failed = len(self.failures)
        lines += ["", f"replicates per scenario: {self.config.replicates}; excluded after failure: {n_failed}"]
        for f in self.failures:
            lines.append(f"  {_label_key(f)} replicate {f['replicate']}: {f['error']}")
        return "\n".join(lines) + "\n"


def _label(scen: SimScenario) -> str:
    return f"({scen.n},{scen.p},{scen.sigma:.2f})"


def _label_key(row) -> str:
    return f"({row['n']},{row['p']},{row['sigma']:.2f})"


def _cell(vals: np.ndarray, digits: int) -> str:
    if vals.size == 0:
        return "n/a"
    q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
    return f"{med:.{digits}f} ({q3 - q1:.{digits}f})"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def run_benchmark(config: BenchConfig) -> BenchReport:
    """Every scenario x replicate: simulate, hold out, fit each method, score.

    Results are ordered by (scenario, replicate) whatever the completion
    order; a failing replicate is logged, excluded and counted.
    """
    jobs = [(config, si, r) for si in range(len(config.scenarios)) for r in range(config.replicates)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    rows, failures = [], []
    for si, r, out, err in sorted(results, key=lambda t: (t[0], t[1])):
        if err is not None:
            scen = config.scenarios[si]
            log.warning("scenario %s replicate %d failed: %s", scen.key, r, err)
            failures.append({"n": scen.n, "p": scen.p, "sigma": scen.sigma, "replicate": r, "error": err})
        else:
            rows.extend(out)
    return BenchReport(rows, failures, config)
