"""Exact attention, GQA head mapping and mixed-rank attention over a packed cache."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ContractViolation, DataIntegrityError
from .linalg import as_matrix, softmax_rows


@dataclass(frozen=True)
class GqaConfig:
    num_query_heads: int
    num_kv_heads: int
    head_dim: int

    def __post_init__(self):
        if min(self.num_query_heads, self.num_kv_heads, self.head_dim) < 1:
            raise ContractViolation("head counts and head_dim must be positive")
        if self.num_query_heads % self.num_kv_heads:
            raise ContractViolation(
                f"{self.num_query_heads} query heads not divisible by {self.num_kv_heads} KV heads"
            )

    @property
    def group_size(self):
        return self.num_query_heads // self.num_kv_heads

    def kv_head_of(self, query_head):
        return query_head // self.group_size

    def query_heads_of(self, kv_head):
        g = self.group_size
        return range(kv_head * g, (kv_head + 1) * g)


@dataclass(frozen=True)
class AttentionOutput:
    output: np.ndarray  # (M, D)
    probabilities: Optional[np.ndarray] = None  # (M, N)


def full_attention(Q, K, V, return_probabilities=False):
    """``softmax(Q K^T / sqrt(D)) V`` evaluated in float64."""
    Q, K, V = (as_matrix(a, n, dtype=None) for a, n in ((Q, "Q"), (K, "K"), (V, "V")))
    if K.shape[0] == 0:
        raise ContractViolation("attention over an empty cache is undefined")
    if not Q.shape[1] == K.shape[1] == V.shape[1] or K.shape[0] != V.shape[0]:
        raise ContractViolation(f"shape mismatch Q{Q.shape} K{K.shape} V{V.shape}")
    d = K.shape[1]
    p = softmax_rows(Q.astype(np.float64) @ K.astype(np.float64).T / np.sqrt(d))
    out = p @ V.astype(np.float64)
    return AttentionOutput(out, p if return_probabilities else None)


def mixed_rank_attention(q, head, columns=None):
    """Attention of ``q`` against one packed head cache.

    Each rank-``r`` group is scored in its own subspace as
    ``(q P_K[:, :r]) K_c^T``; full-width groups and the window use raw keys.
    All logits share one softmax, and each group's weighted values are lifted
    back through ``P_V[:, :r]^T`` before summing.

    ``columns`` selects a slice of the stored feature axis; joint-head caches
    use it to read out a single KV head.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    full = head.full_dim
    sl = slice(None) if columns is None else columns
    width = np.arange(full)[sl].size
    if q.shape[1] != width:
        raise ContractViolation(f"query width {q.shape[1]} does not match head width {width}")
    scale = 1.0 / np.sqrt(width)
    bk = head.basis_k.astype(np.float64)[sl]
    bv = head.basis_v.astype(np.float64)[sl]

    logits, values = [], []
    if head.window_k.shape[0]:
        logits.append(q @ head.window_k[:, sl].astype(np.float64).T * scale)
        values.append((head.window_v[:, sl].astype(np.float64), None))
    for r in sorted(head.groups):
        g = head.groups[r]
        if g.k.shape[1] != r or g.v.shape[1] != r:
            raise DataIntegrityError(f"group {r} stores rows of width {g.k.shape[1]}")
        if r == full:
            logits.append(q @ g.k[:, sl].astype(np.float64).T * scale)
            values.append((g.v[:, sl].astype(np.float64), None))
        else:
            if r > bk.shape[1]:
                raise DataIntegrityError(f"group rank {r} exceeds stored basis rank {bk.shape[1]}")
            logits.append((q @ bk[:, :r]) @ g.k.astype(np.float64).T * scale)
            values.append((g.v.astype(np.float64), bv[:, :r]))
    if not logits:
        raise ContractViolation("attention over an empty cache is undefined")

    p = softmax_rows(np.concatenate(logits, axis=1))
    out = np.zeros((q.shape[0], width))
    start = 0
    for v, lift in values:
        part = p[:, start:start + v.shape[0]] @ v
        out += part if lift is None else part @ lift.T
        start += v.shape[0]
    return out[0] if single else out
