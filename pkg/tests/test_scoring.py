from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdkv.exceptions import ContractViolation
from mdkv.pca import RatioSet, fit_basis
from mdkv.scoring import LossTable, build_loss_table, loss_scores, prune_hull, repair_monotone, snapkv_scores


def instance(rng, n=40, alpha=6, d=16, m=8):
    K = rng.standard_normal((n, d)).astype(np.float32)
    V = rng.standard_normal((n, d)).astype(np.float32) * rng.uniform(0.5, 2, (n, 1)).astype(np.float32)
    W = rng.standard_normal((alpha, d)).astype(np.float32)
    Q = (rng.standard_normal((m, d)) * 2).astype(np.float32)
    return K, V, W, Q


def reference_scores(K, V, W, Q, basis_k, basis_v, r):
    """Step-by-step extended-precision evaluation of the loss at rank ``r``."""
    ld = np.longdouble
    K, V, W, Q = (a.astype(ld) for a in (K, V, W, Q))
    pk = basis_k.basis[:, :r].astype(ld)
    pv = basis_v.basis[:, :r].astype(ld)
    n, d = K.shape

    def probs(keys):
        logits = Q @ np.concatenate([keys, W]).T / np.sqrt(ld(d))
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return (e / e.sum(axis=1, keepdims=True))[:, :n]

    p = probs(K)
    p_rec = probs(K @ pk @ pk.T)
    v_rec = V @ pv @ pv.T
    vn = np.sqrt((V ** 2).sum(axis=1))
    dn = np.sqrt(((V - v_rec) ** 2).sum(axis=1))
    E = np.abs(p_rec - p) * vn + p * dn
    return E.sum(axis=0).astype(np.float64)


def test_full_rank_is_zero(rng):
    K, V, W, Q = instance(rng)
    np.testing.assert_array_equal(loss_scores(K, V, Q, 1.0, window_k=W), 0.0)


def test_zero_rank_formula(rng):
    K, V, W, Q = instance(rng)
    keys = np.concatenate([K, W]).astype(np.float64)
    logits = Q.astype(np.float64) @ keys.T / 4.0
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = (p / p.sum(axis=1, keepdims=True))[:, :len(K)]
    expected = 2 * (p * np.linalg.norm(V.astype(np.float64), axis=1)).sum(axis=0)
    np.testing.assert_allclose(loss_scores(K, V, Q, 0.0, window_k=W), expected, rtol=1e-7, atol=1e-12)


@pytest.mark.parametrize("r", [1, 4, 8])
def test_general_branch_matches_reference(rng, r):
    K, V, W, Q = instance(rng)
    bk, bv = fit_basis(K, 8), fit_basis(V, 8)
    ours = loss_scores(K, V, Q, r / 16, bk, bv, W)
    np.testing.assert_allclose(ours, reference_scores(K, V, W, Q, bk, bv, r), rtol=1e-5, atol=1e-12)


def test_column_sum_over_queries(rng):
    K, V, W, Q = instance(rng)
    bk, bv = fit_basis(K, 4), fit_basis(V, 4)
    total = loss_scores(K, V, Q, 0.25, bk, bv, W)
    # queries enter only through a sum, so splitting them must add up
    parts = sum(loss_scores(K, V, Q[i:i + 1], 0.25, bk, bv, W) for i in range(len(Q)))
    np.testing.assert_allclose(total, parts, rtol=1e-12)


def test_intermediate_needs_bases(rng):
    K, V, W, Q = instance(rng)
    with pytest.raises(ContractViolation):
        loss_scores(K, V, Q, 0.5)
    with pytest.raises(ContractViolation):
        loss_scores(K, V, Q, 1.5)


def test_batched_equals_individual(rng):
    K, V, W, Q = instance(rng)
    rs = RatioSet((0.0, 0.125, 0.25, 1.0), 16)
    bk, bv = fit_basis(K, rs.max_stored_rank), fit_basis(V, rs.max_stored_rank)
    table = build_loss_table(K, V, Q, rs, bk, bv, W)
    for j, ratio in enumerate((0.0, 0.125, 0.25, 1.0)):
        col = loss_scores(K, V, Q, ratio, bk, bv, W)
        assert table.losses[:, j].tobytes() == col.tobytes()


def test_two_point_table(rng):
    K, V, W, Q = instance(rng)
    table = build_loss_table(K, V, Q, RatioSet((0.0, 1.0), 16), window_k=W)
    assert table.losses.shape == (len(K), 2)
    _, weighted = snapkv_scores(K, V, Q, W)
    for i in range(len(K)):
        pts = table.hull_points(i)
        assert [p[0] for p in pts] == [0, 16]
        assert pts[0][1] == pytest.approx(2 * weighted[i], rel=1e-12)
        assert pts[1][1] == 0.0


def test_token_inside_subspace(rng):
    n, d, r = 60, 16, 4
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
    K = (rng.standard_normal((n, r)) * [4, 3, 2, 1]) @ basis[:, :r].T
    V = (rng.standard_normal((n, r)) * [4, 3, 2, 1]) @ basis[:, r:2 * r].T
    K, V = K.astype(np.float32), V.astype(np.float32)
    Q = rng.standard_normal((8, d)).astype(np.float32)
    bk, bv = fit_basis(K, r), fit_basis(V, r)
    at_r = loss_scores(K, V, Q, r / d, bk, bv)
    at_0 = loss_scores(K, V, Q, 0.0)
    assert np.all(at_r <= 1e-4 * at_0)


@pytest.mark.parametrize("seed", range(100))
def test_hull_invariants(seed):
    rng = np.random.default_rng(seed)
    K, V, W, Q = instance(rng, n=12)
    rs = RatioSet((0.0, 0.125, 0.25, 0.5, 1.0), 16)
    bk, bv = fit_basis(K, 8), fit_basis(V, 8)
    table = build_loss_table(K, V, Q, rs, bk, bv, W)
    assert np.all(np.diff(table.repaired, axis=1) <= 0)
    for i in range(table.num_tokens):
        pts = table.hull_points(i)
        assert pts[0][0] == 0 and pts[-1][0] == 16
        drops = [(a[1] - b[1]) / (b[0] - a[0]) for a, b in zip(pts, pts[1:])]
        assert all(x > y for x, y in zip(drops, drops[1:]))
        # every candidate lies on or above the hull
        hd, hl = zip(*pts)
        interp = np.interp(table.dims, hd, hl)
        assert np.all(table.repaired[i] >= interp - 1e-12)


def test_prune_hull_convex():
    assert prune_hull([0, 16, 32, 128], [10.0, 4.0, 2.0, 0.0]) == [0, 1, 2, 3]


def test_prune_hull_repair_and_chord():
    dims = [0, 16, 32, 128]
    np.testing.assert_array_equal(repair_monotone([5, 6, 3, 0]), [5, 5, 3, 0])
    # (16, 5) sits above the chord from (0, 5) to (32, 3)
    assert prune_hull(dims, [5, 6, 3, 0]) == [0, 2, 3]


def test_prune_hull_flat_then_drop():
    assert prune_hull([0, 16, 32, 128], [2, 2, 2, 0]) == [0, 3]


def brute_force_hull(dims, losses):
    """Points strictly below every chord between two other points, in exact arithmetic."""
    rep = [Fraction(int(x)) for x in repair_monotone(losses)]
    keep = []
    for j in range(len(dims)):
        on = True
        for a in range(j):
            for b in range(j + 1, len(dims)):
                t = Fraction(dims[j] - dims[a], dims[b] - dims[a])
                if rep[j] >= (1 - t) * rep[a] + t * rep[b]:
                    on = False
        if on:
            keep.append(j)
    return keep


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=4, max_size=4))
def test_prune_hull_matches_brute_force(losses):
    dims = [0, 16, 32, 128]
    assert prune_hull(dims, losses) == brute_force_hull(dims, losses)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_batched_hull_matches_scalar(seed):
    rng = np.random.default_rng(seed)
    dims = (0, 3, 5, 9, 16)
    losses = rng.integers(0, 5, size=(30, 5)).astype(float)
    table = LossTable.from_losses(dims, losses)
    for i in range(30):
        assert list(table.hull_idx[i, :table.hull_len[i]]) == prune_hull(dims, losses[i])


def test_prune_hull_rejects_bad_dims():
    with pytest.raises(ContractViolation):
        prune_hull([0, 16, 16], [1, 1, 0])


def test_snapkv_uniform():
    K = np.zeros((5, 4), np.float32)
    V = np.ones((5, 4), np.float32)
    att, weighted = snapkv_scores(K, V, np.ones((3, 4), np.float32))
    np.testing.assert_allclose(att, att[0])
    np.testing.assert_allclose(weighted, weighted[0])


def test_snapkv_dominant_token(rng):
    K = rng.standard_normal((10, 8)).astype(np.float32) * 0.01
    K[3] = 10.0
    V = rng.standard_normal((10, 8)).astype(np.float32)
    att, weighted = snapkv_scores(K, V, np.ones((4, 8), np.float32))
    assert np.argmax(att) == 3 and np.sum(att == att.max()) == 1
    assert np.argmax(weighted) == 3


def test_snapkv_matches_zero_rank_loss(rng):
    K, V, W, Q = instance(rng)
    _, weighted = snapkv_scores(K, V, Q, W)
    l0 = loss_scores(K, V, Q, 0.0, window_k=W)
    np.testing.assert_allclose(l0, 2 * weighted, rtol=1e-7)
    np.testing.assert_array_equal(np.argsort(-l0, kind="stable"), np.argsort(-weighted, kind="stable"))


def test_scaled_table_keeps_hull(rng):
    table = LossTable.from_losses((0, 4, 16), rng.uniform(0, 5, (20, 3)))
    s = table.scaled(3.0)
    np.testing.assert_array_equal(s.hull_idx, table.hull_idx)
    np.testing.assert_allclose(s.hull_slopes[np.isfinite(s.hull_slopes)],
                               3 * table.hull_slopes[np.isfinite(table.hull_slopes)])


def test_table_rejects_nonfinite():
    with pytest.raises(ContractViolation):
        LossTable.from_losses((0, 4), [[np.nan, 0.0]])
