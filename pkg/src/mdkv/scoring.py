"""Per-token accuracy-loss scores for every candidate dim, plus eviction scores.

For a query window ``Q`` and compressible tokens ``K``, ``V`` the score of
token ``j`` at rank ``r`` is the column sum over queries of

    |P'_ij - P_ij| * ||V_j|| + P_ij * ||V_j - V'_j||

where ``K'``, ``V'`` are the rank-``r`` reconstructions and ``P'`` the
attention recomputed on ``K'``. Rank 0 (eviction) scores ``2 * P_ij * ||V_j||``
and full rank scores zero.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation
from .linalg import as_matrix, row_norms, softmax_rows
from .pca import RatioSet, reconstruct, project


def ratio_to_dim(ratio, head_dim):
    return int(np.floor(ratio * head_dim + 0.5))


@dataclass(frozen=True)
class ScoringConfig:
    window_size: int
    ratio_set: RatioSet

    def check(self, sequence_length):
        if not 1 <= self.window_size < sequence_length:
            raise ContractViolation(
                f"window size {self.window_size} must lie in [1, {sequence_length})"
            )


# -- hull ------------------------------------------------------------------


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def repair_monotone(losses):
    """Running minimum along the dim axis."""
    return np.minimum.accumulate(np.asarray(losses, dtype=np.float64), axis=-1)


def prune_hull(dims, losses):
    """Lower convex hull of the monotone-repaired ``(dim, loss)`` curve.

    Returns the candidate indices on the hull. Collinear points are dropped,
    so consecutive slopes strictly increase; the first and last candidate are
    always kept.
    """
    dims = np.asarray(dims, dtype=np.float64)
    repaired = repair_monotone(losses)
    if dims.ndim != 1 or dims.shape != repaired.shape:
        raise ContractViolation("dims and losses must be 1-D of equal length")
    if np.any(np.diff(dims) <= 0):
        raise ContractViolation("dims must be strictly ascending")
    hull = []
    for j in range(len(dims)):
        pt = (dims[j], repaired[j])
        while len(hull) >= 2 and _cross((dims[hull[-2]], repaired[hull[-2]]),
                                        (dims[hull[-1]], repaired[hull[-1]]), pt) <= 0:
            hull.pop()
        hull.append(j)
    return hull


def _batched_hull(dims, repaired):
    """Monotone-chain lower hull for many tokens at once (same rule as prune_hull)."""
    n, k = repaired.shape
    stack = np.full((n, k), -1, dtype=np.int64)
    size = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    for j in range(k):
        while True:
            can = size >= 2
            if not can.any():
                break
            a = stack[rows, np.maximum(size - 2, 0)]
            b = stack[rows, np.maximum(size - 1, 0)]
            cross = ((dims[b] - dims[a]) * (repaired[:, j] - repaired[rows, a])
                     - (repaired[rows, b] - repaired[rows, a]) * (dims[j] - dims[a]))
            pop = can & (cross <= 0)
            if not pop.any():
                break
            size[pop] -= 1
            stack[pop, size[pop]] = -1
        stack[rows, size] = j
        size += 1
    return stack, size


@dataclass(frozen=True)
class LossTable:
    """Loss of every (token, candidate dim) pair and each token's pruned hull.

    ``hull_idx[i, :hull_len[i]]`` lists candidate columns on token ``i``'s
    hull; ``hull_slopes[i, s]`` is the loss decrease per extra dim along hull
    segment ``s`` (strictly decreasing along the row, ``-inf`` padding).
    """

    dims: np.ndarray
    losses: np.ndarray
    repaired: np.ndarray
    hull_idx: np.ndarray
    hull_len: np.ndarray
    hull_slopes: np.ndarray

    @classmethod
    def from_losses(cls, dims, losses):
        dims = np.asarray(dims, dtype=np.int64)
        losses = np.atleast_2d(np.asarray(losses, dtype=np.float64))
        if losses.shape[1] != dims.size:
            raise ContractViolation(f"{losses.shape[1]} loss columns for {dims.size} dims")
        if not np.all(np.isfinite(losses)):
            raise ContractViolation("losses must be finite")
        n, k = losses.shape
        repaired = repair_monotone(losses)
        hull_idx, hull_len = _batched_hull(dims.astype(np.float64), repaired)
        rows = np.arange(n)[:, None]
        seg = np.arange(k - 1)[None, :] < (hull_len[:, None] - 1)
        left = np.where(seg, hull_idx[:, :-1], 0)
        right = np.where(seg, hull_idx[:, 1:], 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            drop = (repaired[rows, left] - repaired[rows, right]) / (dims[right] - dims[left])
        slopes = np.where(seg, drop, -np.inf)
        return cls(dims, losses, repaired, hull_idx, hull_len, slopes)

    @classmethod
    def concat(cls, tables):
        """Stack tables sharing one dim set (token order: table by table)."""
        dims = tables[0].dims
        if any(not np.array_equal(t.dims, dims) for t in tables):
            raise ContractViolation("tables must share candidate dims")
        return cls(dims, *(np.concatenate([getattr(t, f) for t in tables])
                           for f in ("losses", "repaired", "hull_idx", "hull_len", "hull_slopes")))

    @property
    def num_tokens(self):
        return self.losses.shape[0]

    @property
    def full_dim(self):
        return int(self.dims[-1])

    def hull_points(self, i):
        idx = self.hull_idx[i, :self.hull_len[i]]
        return [(int(self.dims[j]), float(self.repaired[i, j])) for j in idx]

    def scaled(self, c):
        return LossTable.from_losses(self.dims, self.losses * c)

    def rows(self):
        """``(token_index, dim, loss)`` triples in table order."""
        for i in range(self.num_tokens):
            for j, d in enumerate(self.dims):
                yield i, int(d), float(self.losses[i, j])


# -- scores ----------------------------------------------------------------


def _inputs(K, V, Qwin, window_k):
    K, V, Qwin = as_matrix(K, "K"), as_matrix(V, "V"), as_matrix(Qwin, "Qwin")
    if K.shape != V.shape or Qwin.shape[1] != K.shape[1]:
        raise ContractViolation(f"shape mismatch K{K.shape} V{V.shape} Q{Qwin.shape}")
    if window_k is None:
        window_k = np.zeros((0, K.shape[1]), dtype=np.float32)
    window_k = as_matrix(window_k, "window_k")
    if window_k.shape[1] != K.shape[1]:
        raise ContractViolation("window keys have the wrong width")
    return K, V, Qwin, window_k


def _probs(Qwin, K, window_k):
    """Attention of the window queries over [K; window_k], split at the boundary."""
    keys = np.concatenate([K, window_k]).astype(np.float64)
    p = softmax_rows(Qwin.astype(np.float64) @ keys.T / np.sqrt(K.shape[1]))
    return p


def _scores_at_rank(K, V, Qwin, window_k, r, basis_k, basis_v, p):
    n, d = K.shape
    vn = row_norms(V)
    if r == d:
        return np.zeros(n)
    pc = p[:, :n]
    if r == 0:
        return 2.0 * (pc * vn).sum(axis=0)
    k_rec = reconstruct(project(K, basis_k, r), basis_k, r)
    v_rec = reconstruct(project(V, basis_v, r), basis_v, r)
    p_rec = _probs(Qwin, k_rec, window_k)[:, :n]
    err = np.abs(p_rec - pc) * vn + pc * row_norms(V.astype(np.float64) - v_rec)
    return err.sum(axis=0)


def loss_scores(K, V, Qwin, ratio, basis_k=None, basis_v=None, window_k=None):
    """Loss of compressing every token of ``K``/``V`` to ``round(ratio * D)`` dims.

    ``window_k`` (uncompressed) joins the softmax denominator; only the
    compressible tokens receive scores.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractViolation(f"ratio must be in [0, 1], got {ratio}")
    K, V, Qwin, window_k = _inputs(K, V, Qwin, window_k)
    r = ratio_to_dim(ratio, K.shape[1])
    if 0 < r < K.shape[1] and (basis_k is None or basis_v is None):
        raise ContractViolation("intermediate ratios need fitted bases")
    return _scores_at_rank(K, V, Qwin, window_k, r, basis_k, basis_v, _probs(Qwin, K, window_k))


def build_loss_table(K, V, Qwin, ratio_set, basis_k=None, basis_v=None, window_k=None):
    K, V, Qwin, window_k = _inputs(K, V, Qwin, window_k)
    if ratio_set.head_dim != K.shape[1]:
        raise ContractViolation("ratio set head_dim does not match K")
    p = _probs(Qwin, K, window_k)
    cols = [_scores_at_rank(K, V, Qwin, window_k, r, basis_k, basis_v, p) for r in ratio_set.dims]
    return LossTable.from_losses(ratio_set.dims, np.stack(cols, axis=1))


def snapkv_scores(K, V, Qwin, window_k=None):
    """Return ``(attention_sum, value_weighted)`` eviction scores per token.

    ``attention_sum`` is the SnapKV statistic; ``value_weighted`` additionally
    multiplies by each token's value norm and is half the rank-0 loss.
    """
    K, V, Qwin, window_k = _inputs(K, V, Qwin, window_k)
    pc = _probs(Qwin, K, window_k)[:, :K.shape[0]]
    return pc.sum(axis=0), (pc * row_norms(V)).sum(axis=0)


# -- joint-head ------------------------------------------------------------


def build_joint_loss_table(K, V, Qwins, ratio_set, basis_k=None, basis_v=None, window_k=None):
    """Loss table over the concatenated ``H_kv * D`` feature space.

    ``K``/``V`` are (H_kv, N, D); ``Qwins[j]`` holds the queries reading KV
    head ``j``. A joint rank-``r`` reconstruction is split back per head and
    the per-head errors are summed.
    """
    K, V = np.asarray(K, dtype=np.float32), np.asarray(V, dtype=np.float32)
    h_kv, n, d = K.shape
    width = h_kv * d
    if ratio_set.head_dim != width:
        raise ContractViolation("joint ratio set must be built over H_kv * D")
    if window_k is None:
        window_k = np.zeros((h_kv, 0, d), dtype=np.float32)
    k_joint = np.concatenate(list(K), axis=1)
    v_joint = np.concatenate(list(V), axis=1)
    probs = [_probs(as_matrix(Qwins[j], "Qwin"), K[j], window_k[j]) for j in range(h_kv)]
    vns = [row_norms(V[j]) for j in range(h_kv)]

    cols = []
    for r in ratio_set.dims:
        if r == width:
            cols.append(np.zeros(n))
            continue
        if r == 0:
            cols.append(sum(2.0 * (probs[j][:, :n] * vns[j]).sum(axis=0) for j in range(h_kv)))
            continue
        k_rec = reconstruct(project(k_joint, basis_k, r), basis_k, r)
        v_rec = reconstruct(project(v_joint, basis_v, r), basis_v, r)
        total = np.zeros(n)
        for j in range(h_kv):
            sl = slice(j * d, (j + 1) * d)
            pc = probs[j][:, :n]
            p_rec = _probs(np.asarray(Qwins[j], dtype=np.float32), k_rec[:, sl], window_k[j])[:, :n]
            total += (np.abs(p_rec - pc) * vns[j]
                      + pc * row_norms(V[j].astype(np.float64) - v_rec[:, sl])).sum(axis=0)
        cols.append(total)
    return LossTable.from_losses(ratio_set.dims, np.stack(cols, axis=1))
