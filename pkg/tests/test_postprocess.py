import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosin.gibbs import Draw, DrawStore
from cosin.model import Covariates, apply_link
from cosin.postprocess import (
    align_contributions,
    apply_alignment,
    covariance_graph,
    partial_correlations,
    predict_holdout,
    representative_draw,
    summarize_beta,
)


def make_draw(eta, lam, beta=None, sigma2=None, it=0):
    n, k = eta.shape
    p = lam.shape[0]
    return Draw(
        it,
        np.zeros((1, p)) if beta is None else beta,
        np.ones(p) if sigma2 is None else sigma2,
        eta,
        lam,
        np.zeros((1, 1)),
        np.zeros((1, k)),
        np.ones(k),
    )


def base_factors(n=6, p=5, k=3, seed=0):
    g = np.random.default_rng(seed)
    eta = g.standard_normal((n, k))
    lam = g.standard_normal((p, k)) * np.array([3.0, 2.0, 1.0])[:k]
    return eta, lam


def dense(d: Draw, cols):
    return [np.outer(d.eta[:, c], d.lam[:, c]) if c >= 0 else np.zeros((d.eta.shape[0], d.lam.shape[0])) for c in cols]


# ------------------------------------------------------------------ alignment


def test_single_draw_gives_sorted_contributions():
    eta, lam = base_factors()
    d = make_draw(eta[:, [2, 0, 1]], lam[:, [2, 0, 1]])
    al = align_contributions(DrawStore([d]))
    norms = [np.linalg.norm(c) for c in al.mean_contributions]
    assert norms == sorted(norms, reverse=True)
    for c, ref in zip(al.mean_contributions, dense(d, al.reference_order)):
        assert np.allclose(c, ref)
    assert np.allclose(al.frobenius_norms, norms)


def test_permuted_draws_reproduce_reference_exactly():
    eta, lam = base_factors()
    g = np.random.default_rng(1)
    draws = []
    for t in range(10):
        perm = g.permutation(3)
        sign = g.choice([-1.0, 1.0], 3)
        draws.append(make_draw(eta[:, perm] * sign, lam[:, perm] * sign, it=t))
    al = align_contributions(DrawStore(draws))
    ref = dense(draws[-1], al.reference_order)
    for c, r in zip(al.mean_contributions, ref):
        assert np.allclose(c, r, atol=1e-12)
    assert np.all(al.n_surplus == 0)


def test_greedy_matches_exhaustive_in_most_draws():
    eta, lam = base_factors(n=20, p=15, seed=2)
    g = np.random.default_rng(3)
    T = 50
    draws = []
    for t in range(T):
        perm = g.permutation(3)
        draws.append(make_draw(eta[:, perm] + 0.3 * g.standard_normal(eta.shape), lam[:, perm] + 0.3 * g.standard_normal(lam.shape), it=t))
    al = align_contributions(DrawStore(draws))
    ref = dense(draws[-1], al.reference_order)
    agree = 0
    for d, perm in zip(draws, al.permutations):
        C = dense(d, range(3))
        best = min(itertools.permutations(range(3)), key=lambda q: sum(np.linalg.norm(ref[h] - C[q[h]]) for h in range(3)))
        agree += tuple(perm) == best
    assert agree / T >= 0.95


def test_alignment_idempotent():
    eta, lam = base_factors(seed=4)
    g = np.random.default_rng(4)
    draws = []
    for t in range(15):
        k = 2 + t % 3  # varying k, some draws short of the reference
        perm = g.permutation(3)[: min(k, 3)]
        e = eta[:, perm] + 0.1 * g.standard_normal((eta.shape[0], perm.size))
        l = lam[:, perm] + 0.1 * g.standard_normal((lam.shape[0], perm.size))
        if k == 4:  # one surplus column
            e = np.column_stack([e, g.standard_normal(eta.shape[0])])
            l = np.column_stack([l, 0.05 * g.standard_normal(lam.shape[0])])
        draws.append(make_draw(e, l, it=t))
    draws.append(make_draw(eta, lam, it=99))
    store = DrawStore(draws)
    al = align_contributions(store)
    assert any(s.size for s in al.surplus) and any((p < 0).any() for p in al.permutations)
    aligned = apply_alignment(store, al)
    again = align_contributions(aligned)
    for perm, p0 in zip(again.permutations, al.permutations):
        filled = p0 >= 0
        assert np.array_equal(perm[filled], np.flatnonzero(filled))
    for a, b in zip(again.mean_contributions, al.mean_contributions):
        assert np.allclose(a, b)
    assert np.allclose(again.residual_contribution, al.residual_contribution)


def test_surplus_columns_go_to_residual_diagnostic():
    eta, lam = base_factors(k=2)
    extra_e, extra_l = np.ones((6, 1)), np.full((5, 1), 0.5)
    big = make_draw(np.column_stack([eta, extra_e]), np.column_stack([lam, extra_l]), it=0)
    last = make_draw(eta, lam, it=1)
    al = align_contributions(DrawStore([big, last]))
    assert al.n_surplus.tolist() == [1, 0]
    assert np.allclose(al.residual_contribution, extra_e @ extra_l.T / 2)


def test_sign_flip_leaves_outputs_unchanged():
    eta, lam = base_factors(seed=5)
    g = np.random.default_rng(5)
    draws = [make_draw(eta + 0.2 * g.standard_normal(eta.shape), lam, it=t) for t in range(8)]
    flipped = [make_draw(d.eta * np.array([-1, 1, -1]), d.lam * np.array([-1, 1, -1]), it=d.iteration) for d in draws]
    a = align_contributions(DrawStore(draws))
    b = align_contributions(DrawStore(flipped))
    assert [p.tolist() for p in a.permutations] == [p.tolist() for p in b.permutations]
    for x, y in zip(a.mean_contributions, b.mean_contributions):
        assert np.allclose(x, y, atol=1e-12)
    assert representative_draw(DrawStore(draws), a)[0] == representative_draw(DrawStore(flipped), b)[0]


def test_empty_store_errors():
    with pytest.raises(ValueError):
        align_contributions(DrawStore([]))


# ------------------------------------------------------------------ representative draw


def test_representative_identical_draws_is_first():
    eta, lam = base_factors()
    store = DrawStore([make_draw(eta, lam, it=t) for t in range(5)])
    assert representative_draw(store, align_contributions(store))[0] == 0


def test_representative_picks_draw_equal_to_mean():
    eta, lam = base_factors()
    draws = [make_draw(eta, lam * 0.5, it=0), make_draw(eta, lam * 1.0, it=1), make_draw(eta, lam * 1.5, it=2)]
    store = DrawStore(draws)
    t, e, l = representative_draw(store, align_contributions(store))
    assert t == 1


def test_representative_matches_dense_scan_oracle():
    eta, lam = base_factors(n=8, p=7, seed=6)
    g = np.random.default_rng(6)
    draws = []
    for t in range(20):
        perm = g.permutation(3)
        draws.append(make_draw(eta[:, perm] + 0.4 * g.standard_normal(eta.shape), lam[:, perm] + 0.4 * g.standard_normal(lam.shape), it=t))
    store = DrawStore(draws)
    al = align_contributions(store)
    scores = []
    for d, perm in zip(draws, al.permutations):
        C = dense(d, perm)
        scores.append(sum(np.linalg.norm(C[h] - al.mean_contributions[h]) for h in range(3)))
    t, e, l = representative_draw(store, al)
    assert t == int(np.argmin(scores))
    assert np.allclose(np.outer(e[:, 0], l[:, 0]), dense(draws[t], al.permutations[t])[0])


# ------------------------------------------------------------------ beta summary


def beta_store(betas):
    p = betas.shape[2]
    return DrawStore([make_draw(np.zeros((2, 1)), np.zeros((p, 1)), beta=b, it=t) for t, b in enumerate(betas)])


def test_beta_all_zero():
    rows = summarize_beta(beta_store(np.zeros((10, 2, 4))))
    assert len(rows) == 2
    for r in rows:
        assert r["n_excluding_zero"] == 0
        assert all(r[c] == 0 for c in ("min", "q1", "median", "q3", "max"))


def test_beta_constant_gene_counts():
    b = np.zeros((10, 1, 3))
    b[:, 0, 1] = 1.0
    assert summarize_beta(beta_store(b))[0]["n_excluding_zero"] == 1


def test_beta_counts_match_quantile_oracle():
    g = np.random.default_rng(7)
    T, d, p = 400, 2, 30
    centers = g.normal(0, 0.3, size=(d, p))
    b = centers[None] + 0.2 * g.standard_normal((T, d, p))
    rows = summarize_beta(beta_store(b), level=0.9, names=["a", "b"])
    for c, r in enumerate(rows):
        lo = np.array([np.quantile(b[:, c, j], 0.05) for j in range(p)])
        hi = np.array([np.quantile(b[:, c, j], 0.95) for j in range(p)])
        assert r["n_excluding_zero"] == int(np.sum((lo > 0) | (hi < 0)))
        assert r["median"] == pytest.approx(np.median(b[:, c].mean(axis=0)))
        assert r["covariate"] == "ab"[c]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 0.99))
def test_beta_quantile_columns_nondecreasing(seed, level):
    b = np.random.default_rng(seed).standard_normal((20, 2, 9))
    for r in summarize_beta(beta_store(b), level):
        assert r["min"] <= r["q1"] <= r["median"] <= r["q3"] <= r["max"]


# ------------------------------------------------------------------ graph


def graph_store(lams, sigmas):
    return DrawStore([make_draw(np.zeros((2, l.shape[1])), l, sigma2=s, it=t) for t, (l, s) in enumerate(zip(lams, sigmas))])


def test_graph_empty_for_diagonal_covariance():
    store = graph_store([np.zeros((4, 2))] * 3, [np.ones(4)] * 3)
    assert covariance_graph(store).edges == []


def test_graph_three_gene_oracle():
    lam = np.array([[1.0], [1.0], [0.0]])
    store = graph_store([lam], [np.ones(3)])
    graph = covariance_graph(store, threshold=0.0)
    omega = lam @ lam.T + np.eye(3)
    d = np.sqrt(np.diag(omega))
    P = np.linalg.inv(omega / np.outer(d, d))
    expected = -P[0, 1] / np.sqrt(P[0, 0] * P[1, 1])
    assert [(j, k) for j, k, _ in graph.edges] == [(0, 1)]
    assert graph.edges[0][2] == pytest.approx(expected)


def test_graph_threshold_and_ordering():
    g = np.random.default_rng(8)
    lams = [0.4 * g.standard_normal((12, 3)) for _ in range(5)]
    store = graph_store(lams, [np.full(12, 0.5)] * 5)
    graph = covariance_graph(store)
    assert all(abs(w) >= 0.025 for _, _, w in graph.edges)
    assert graph.edges == sorted(graph.edges, key=lambda e: (e[0], e[1]))
    assert all(j < k for j, k, _ in graph.edges)
    assert covariance_graph(store, threshold=1.0).edges == []


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9), st.integers(1, 4))
def test_partial_correlation_properties(seed, p, k):
    g = np.random.default_rng(seed)
    lam = g.standard_normal((p, k)) * g.choice([0.0, 1.0], size=(p, k))
    s2 = g.uniform(0.05, 2.0, p)
    R, _ = partial_correlations(lam, s2)
    assert np.array_equal(R, R.T)
    assert np.all(np.abs(R) <= 1.0)
    Rc, _ = partial_correlations(lam, s2, form="covariance")
    assert np.allclose(R, Rc, atol=1e-9)
    omega = lam @ lam.T + np.diag(s2)
    P = np.linalg.inv(omega)
    dense = -P / np.sqrt(np.outer(np.diag(P), np.diag(P)))
    np.fill_diagonal(dense, 1.0)
    assert np.allclose(R, dense, atol=1e-8)


# ------------------------------------------------------------------ holdout prediction


def test_predict_zero_predictor_gives_ones():
    d = make_draw(np.zeros((3, 1)), np.zeros((4, 1)))
    mask = np.zeros((3, 4), dtype=bool)
    mask[1, 2] = mask[0, 0] = True
    cov = Covariates(np.ones((3, 1)), np.ones((4, 1)), np.ones((4, 1)))
    out = predict_holdout(DrawStore([d]), cov, mask)
    assert out.per_draw.tolist() == [[1, 1]]


def test_predict_truth_draw_gives_rounding_floor():
    g = np.random.default_rng(9)
    n, p = 10, 8
    eta, lam = g.standard_normal((n, 2)), g.standard_normal((p, 2))
    beta = g.normal(1.0, 0.2, size=(1, p))
    m = beta + eta @ lam.T
    y = apply_link(m)  # sigma = 0
    mask = g.random((n, p)) < 0.3
    cov = Covariates(np.ones((n, 1)), np.ones((p, 1)), np.ones((p, 1)))
    out = predict_holdout(DrawStore([make_draw(eta, lam, beta=beta)]), cov, mask, y=y)
    oracle = np.mean(np.abs(np.floor(np.exp(m[mask])) - y[mask]))
    assert out.mae == pytest.approx(oracle) and oracle == 0.0


def test_predict_ignores_masked_values_and_noise_flag():
    g = np.random.default_rng(10)
    eta, lam = g.standard_normal((6, 2)), g.standard_normal((5, 2))
    store = DrawStore([make_draw(eta, lam, it=t) for t in range(3)])
    cov = Covariates(np.ones((6, 1)), np.ones((5, 1)), np.ones((5, 1)))
    mask = g.random((6, 5)) < 0.4
    y = g.poisson(2, size=(6, 5))
    y2 = y.copy()
    y2[mask] = g.permutation(y[mask])
    a = predict_holdout(store, cov, mask, y=y)
    b = predict_holdout(store, cov, mask, y=y2)
    assert np.array_equal(a.per_draw, b.per_draw)
    noisy = predict_holdout(store, cov, mask, noise=True, rng=np.random.default_rng(0))
    assert noisy.per_draw.shape == a.per_draw.shape
    with pytest.raises(ValueError):
        predict_holdout(store, cov, np.zeros((6, 5), dtype=bool))
