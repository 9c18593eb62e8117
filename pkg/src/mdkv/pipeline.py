"""End-to-end compression of one attention layer's prompt cache.

Inputs are a prompt cache ``K``, ``V`` of shape (H_kv, L, D) whose last
``alpha`` tokens form the local window, and the window queries ``Qwin`` of
shape (H, alpha, D). Budgets follow the equivalent-KV-size convention: a KV
size ``T`` grants ``H * T * D`` key entries per layer, values mirrored, with
window tokens and projection matrices charged against it.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .allocation import bisect_allocate, gap_report
from .attention import GqaConfig, full_attention
from .cache import (
    JointCompressedCache,
    build_cache,
    build_head_cache,
    memory_footprint,
)
from .exceptions import ConfigurationError, ContractViolation
from .pca import DEFAULT_RATIOS, RatioSet, fit_basis
from .scoring import LossTable, build_joint_loss_table, build_loss_table, snapkv_scores

MODES = ("mixeddim", "mixeddim-h", "snapkv", "jointhead")


@dataclass(frozen=True)
class BudgetSpec:
    """Equivalent KV size ``T`` turned into a per-layer key-entry budget.

    ``convention="kv_pairs"`` halves the budget, reading ``H * T * D`` as the
    combined key and value entry count.
    """

    kv_size: int
    num_query_heads: int
    head_dim: int
    convention: str = "k_entries"

    def __post_init__(self):
        if self.kv_size < 0:
            raise ConfigurationError("kv_size must be non-negative")
        if self.convention not in ("k_entries", "kv_pairs"):
            raise ConfigurationError(f"unknown budget convention {self.convention!r}")

    @property
    def layer_budget(self):
        """Key entries available to the layer (values mirror keys)."""
        total = self.num_query_heads * self.kv_size * self.head_dim
        return total // 2 if self.convention == "kv_pairs" else total

    @property
    def footprint_limit(self):
        """The same budget expressed in stored entries, keys and values both counted."""
        return 2 * self.layer_budget


@dataclass(frozen=True)
class HeadBudgets:
    """Per-(layer, head) importance weights from an external profiler."""

    weights: Dict[tuple, float]

    def __post_init__(self):
        if any(w < 0 or not np.isfinite(w) for w in self.weights.values()):
            raise ConfigurationError("head budget weights must be finite and non-negative")

    @classmethod
    def uniform(cls, num_kv_heads, layer=0):
        return cls({(layer, h): 1.0 for h in range(num_kv_heads)})

    @classmethod
    def parse(cls, text):
        """Parse ``layer_index head_index weight`` lines (commas or whitespace)."""
        weights = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise ConfigurationError(f"head budget line {lineno}: expected 3 fields, got {parts}")
            try:
                weights[(int(parts[0]), int(parts[1]))] = float(parts[2])
            except ValueError as err:
                raise ConfigurationError(f"head budget line {lineno}: {err}") from None
        return cls(weights)

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read())

    def for_layer(self, layer, num_kv_heads):
        w = np.array([self.weights.get((layer, h), np.nan) for h in range(num_kv_heads)])
        if np.isnan(w).any():
            missing = [h for h in range(num_kv_heads) if np.isnan(w[h])]
            raise ConfigurationError(f"no head budget for layer {layer} heads {missing}")
        if w.sum() <= 0:
            raise ConfigurationError(f"head budgets of layer {layer} sum to zero")
        return w / w.sum()


@dataclass
class CompressionReport:
    mode: str
    ratios: tuple
    histograms: list  # per store: {ratio: fraction of compressible tokens}
    dims_per_head: list
    realized_loss: float
    gap: Optional[dict]
    footprint: dict
    budget: dict
    lambda_star: Optional[float] = None
    attention_error: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "mode": self.mode,
            "ratios": list(self.ratios),
            "histograms": [{str(k): v for k, v in h.items()} for h in self.histograms],
            "dims_per_head": self.dims_per_head,
            "realized_loss": self.realized_loss,
            "gap": self.gap,
            "footprint": self.footprint,
            "budget": self.budget,
            "lambda_star": self.lambda_star,
            "attention_error": self.attention_error,
            **self.extra,
        }

    def csv_rows(self):
        """``(head, ratio, fraction)`` rows of the allocation histograms."""
        for h, hist in enumerate(self.histograms):
            for ratio, frac in hist.items():
                yield h, ratio, frac


def _split(K, V, Qwin, alpha):
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    Qwin = np.asarray(Qwin, dtype=np.float32)
    if K.ndim != 3 or K.shape != V.shape:
        raise ContractViolation(f"K and V must share shape (H_kv, L, D); got {K.shape}, {V.shape}")
    h_kv, length, d = K.shape
    if not 1 <= alpha < length:
        raise ContractViolation(f"window size {alpha} must lie in [1, {length})")
    if Qwin.ndim != 3 or Qwin.shape[2] != d:
        raise ContractViolation(f"Qwin must be (H, M, {d}); got {Qwin.shape}")
    gqa = GqaConfig(Qwin.shape[0], h_kv, d)
    n = length - alpha
    return K[:, :n], V[:, :n], K[:, n:], V[:, n:], gqa


def _group_queries(Qwin, gqa, kv_head):
    return np.concatenate([Qwin[h] for h in gqa.query_heads_of(kv_head)], axis=0)


def _histogram(dims, ratio_set):
    n = max(len(dims), 1)
    return {float(r): float(np.count_nonzero(dims == d)) / n
            for r, d in zip(_ratio_labels(ratio_set), ratio_set.dims)}


def _ratio_labels(ratio_set):
    return [d / ratio_set.head_dim for d in ratio_set.dims]


def _footprint_dict(cache, limit):
    fp = memory_footprint(cache)
    return {
        "token_entries": fp.token_entries,
        "projection_entries": fp.projection_entries,
        "total": fp.total,
        "limit": limit,
        "per_head": [list(p) for p in fp.per_head],
    }


def _fit_head_bases(Kc, Vc, r_max):
    if r_max == 0:
        return [None] * Kc.shape[0], [None] * Kc.shape[0]
    return ([fit_basis(Kc[j], r_max) for j in range(Kc.shape[0])],
            [fit_basis(Vc[j], r_max) for j in range(Vc.shape[0])])


def _head_tables(Kc, Vc, Kw, Qwin, gqa, ratio_set, bases_k, bases_v):
    return [
        build_loss_table(Kc[j], Vc[j], _group_queries(Qwin, gqa, j), ratio_set,
                         bases_k[j], bases_v[j], window_k=Kw[j])
        for j in range(Kc.shape[0])
    ]


def _as_budget(budget, gqa):
    if isinstance(budget, BudgetSpec):
        return budget
    return BudgetSpec(int(budget), gqa.num_query_heads, gqa.head_dim)


def compress_mixeddim(K, V, Qwin, budget, ratios=DEFAULT_RATIOS, alpha=32, mode="headwise"):
    """Joint intra-layer allocation over every head's tokens.

    ``mode="jointhead"`` instead fits one basis over the concatenated heads
    and allocates token-level dims in that joint space.
    """
    if mode == "jointhead":
        return compress_jointhead(K, V, Qwin, budget, ratios, alpha)
    if mode != "headwise":
        raise ConfigurationError(f"unknown mode {mode!r}")
    Kc, Vc, Kw, Vw, gqa = _split(K, V, Qwin, alpha)
    h_kv, n, d = Kc.shape
    budget = _as_budget(budget, gqa)
    ratio_set = RatioSet(tuple(ratios), d)
    layer = budget.layer_budget
    window_cost = h_kv * alpha * d
    full_cost = h_kv * (n + alpha) * d

    if layer >= full_cost:
        dims = np.full((h_kv, n), d, dtype=np.int64)
        cache = build_cache(Kc, Vc, dims, [None] * h_kv, [None] * h_kv, Kw, Vw, ratio_set.dims)
        zero = LossTable.from_losses(ratio_set.dims, np.zeros((h_kv * n, len(ratio_set.dims))))
        return cache, _report("mixeddim", ratio_set, dims, 0.0, None, cache, budget,
                              {"token_budget": layer - window_cost, "overhead": 0}, Kc, Vc, Kw, Vw, Qwin,
                              zero)

    r_max = max(ratio_set.intermediate_dims, default=0)
    overhead = h_kv * d * r_max
    token_budget = layer - window_cost - overhead
    if token_budget < 0:
        raise ConfigurationError(
            f"layer budget {layer} cannot cover window ({window_cost}) plus projections ({overhead})"
        )
    bases_k, bases_v = _fit_head_bases(Kc, Vc, r_max)
    table = LossTable.concat(_head_tables(Kc, Vc, Kw, Qwin, gqa, ratio_set, bases_k, bases_v))
    alloc = bisect_allocate(table, token_budget)
    dims = alloc.dims.reshape(h_kv, n)
    cache = build_cache(Kc, Vc, dims, bases_k, bases_v, Kw, Vw, ratio_set.dims)
    gap = gap_report(table, token_budget, alloc)
    return cache, _report("mixeddim", ratio_set, dims, alloc.realized_loss, gap, cache, budget,
                          {"token_budget": token_budget, "overhead": overhead}, Kc, Vc, Kw, Vw, Qwin,
                          table, alloc.lambda_star)


def compress_mixeddim_h(K, V, Qwin, budget, ratios=DEFAULT_RATIOS, alpha=32, head_budgets=None, layer=0):
    """Per-head allocation under externally supplied head quotas."""
    Kc, Vc, Kw, Vw, gqa = _split(K, V, Qwin, alpha)
    h_kv, n, d = Kc.shape
    budget = _as_budget(budget, gqa)
    ratio_set = RatioSet(tuple(ratios), d)
    if head_budgets is None:
        head_budgets = HeadBudgets.uniform(h_kv, layer)
    shares = head_budgets.for_layer(layer, h_kv) * budget.layer_budget
    shares = np.floor(shares + 1e-9).astype(np.int64)
    head_full = (n + alpha) * d

    if np.all(shares >= head_full):
        dims = np.full((h_kv, n), d, dtype=np.int64)
        cache = build_cache(Kc, Vc, dims, [None] * h_kv, [None] * h_kv, Kw, Vw, ratio_set.dims)
        zero = LossTable.from_losses(ratio_set.dims, np.zeros((h_kv * n, len(ratio_set.dims))))
        return cache, _report("mixeddim-h", ratio_set, dims, 0.0, None, cache, budget,
                              {"head_token_budgets": [int(s - alpha * d) for s in shares], "overhead": 0},
                              Kc, Vc, Kw, Vw, Qwin, zero)

    r_max = max(ratio_set.intermediate_dims, default=0)
    per_head_fixed = alpha * d + d * r_max
    token_budgets = shares - per_head_fixed
    for j, tb in enumerate(token_budgets):
        if tb < 0:
            raise ConfigurationError(
                f"head {j} quota {shares[j]} cannot cover its window and projections ({per_head_fixed})"
            )
    bases_k, bases_v = _fit_head_bases(Kc, Vc, r_max)
    tables = _head_tables(Kc, Vc, Kw, Qwin, gqa, ratio_set, bases_k, bases_v)
    allocs = [bisect_allocate(t, int(tb)) for t, tb in zip(tables, token_budgets)]
    dims = np.stack([a.dims for a in allocs])
    cache = build_cache(Kc, Vc, dims, bases_k, bases_v, Kw, Vw, ratio_set.dims)
    gaps = [gap_report(t, int(tb), a) for t, tb, a in zip(tables, token_budgets, allocs)]
    primal = sum(g.primal_value for g in gaps)
    dual = sum(g.dual_value for g in gaps)
    gap = {"primal": primal, "dual": dual, "gap": primal - dual,
           "relative_gap": (primal - dual) / max(primal, 1e-12),
           "per_head": [g.as_dict() for g in gaps]}
    return cache, _report("mixeddim-h", ratio_set, dims, primal, gap, cache, budget,
                          {"head_token_budgets": [int(t) for t in token_budgets],
                           "overhead": h_kv * d * r_max},
                          Kc, Vc, Kw, Vw, Qwin, LossTable.concat(tables))


def compress_jointhead(K, V, Qwin, budget, ratios=DEFAULT_RATIOS, alpha=32):
    """Joint-head ablation: one basis over ``H_kv * D`` features per side."""
    Kc, Vc, Kw, Vw, gqa = _split(K, V, Qwin, alpha)
    h_kv, n, d = Kc.shape
    width = h_kv * d
    budget = _as_budget(budget, gqa)
    ratio_set = RatioSet(tuple(ratios), width)
    layer = budget.layer_budget
    window_cost = alpha * width
    r_max = max(ratio_set.intermediate_dims, default=0)
    overhead = width * r_max

    def joint(x):
        return np.concatenate(list(x), axis=1)

    if layer >= (n + alpha) * width:
        dims = np.full(n, width, dtype=np.int64)
        bk = bv = None
        loss, gap, lam, token_budget, overhead = 0.0, None, None, layer - window_cost, 0
    else:
        token_budget = layer - window_cost - overhead
        if token_budget < 0:
            raise ConfigurationError(
                f"layer budget {layer} cannot cover window ({window_cost}) plus joint projections ({overhead})"
            )
        bk = fit_basis(joint(Kc), r_max) if r_max else None
        bv = fit_basis(joint(Vc), r_max) if r_max else None
        qs = [_group_queries(Qwin, gqa, j) for j in range(h_kv)]
        table = build_joint_loss_table(Kc, Vc, qs, ratio_set, bk, bv, window_k=Kw)
        alloc = bisect_allocate(table, token_budget)
        dims, loss, lam = alloc.dims, alloc.realized_loss, alloc.lambda_star
        gap = gap_report(table, token_budget, alloc).as_dict()

    store = build_head_cache(joint(Kc), joint(Vc), dims, bk, bv, joint(Kw), joint(Vw), ratio_set.dims)
    cache = JointCompressedCache(store, h_kv, n, ratio_set.dims)
    report = CompressionReport(
        mode="jointhead",
        ratios=tuple(_ratio_labels(ratio_set)),
        histograms=[_histogram(dims, ratio_set)],
        dims_per_head=[int(dims.sum())],
        realized_loss=float(loss),
        gap=gap,
        footprint=_footprint_dict(cache, budget.footprint_limit),
        budget=_budget_dict(budget, {"token_budget": int(token_budget), "overhead": int(overhead)}),
        lambda_star=lam,
        attention_error=evaluate_error(cache, K, V, Qwin),
    )
    return cache, report


def compress_snapkv(K, V, Qwin, budget, alpha=32):
    """Per-head top-k eviction by summed window attention, uniform head budgets."""
    Kc, Vc, Kw, Vw, gqa = _split(K, V, Qwin, alpha)
    h_kv, n, d = Kc.shape
    budget = _as_budget(budget, gqa)
    per_head_tokens = budget.layer_budget // (h_kv * d)
    keep = per_head_tokens - alpha
    if keep < 0:
        raise ConfigurationError(f"budget of {per_head_tokens} tokens per head cannot hold the window ({alpha})")
    dims = np.zeros((h_kv, n), dtype=np.int64)
    for j in range(h_kv):
        scores, _ = snapkv_scores(Kc[j], Vc[j], _group_queries(Qwin, gqa, j), window_k=Kw[j])
        dims[j, top_k(scores, keep)] = d
    ratio_set = RatioSet((0.0, 1.0), d)
    cache = build_cache(Kc, Vc, dims, [None] * h_kv, [None] * h_kv, Kw, Vw, ratio_set.dims)
    report = CompressionReport(
        mode="snapkv",
        ratios=(0.0, 1.0),
        histograms=[_histogram(dims[j], ratio_set) for j in range(h_kv)],
        dims_per_head=[int(x) for x in dims.sum(axis=1)],
        realized_loss=float("nan"),
        gap=None,
        footprint=_footprint_dict(cache, budget.footprint_limit),
        budget=_budget_dict(budget, {"tokens_per_head": int(keep)}),
        attention_error=evaluate_error(cache, K, V, Qwin),
    )
    return cache, report


def top_k(scores, k):
    """Indices of the ``k`` largest scores, ties toward the lower index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return np.sort(order[:max(k, 0)])


def evaluate_error(cache, K, V, probes):
    """Mean over query heads and probes of ``||attn_full - attn_cache||_2``."""
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    probes = np.asarray(probes, dtype=np.float32)
    gqa = GqaConfig(probes.shape[0], K.shape[0], K.shape[2])
    approx = cache.attend(probes)
    errs = []
    for h in range(probes.shape[0]):
        j = gqa.kv_head_of(h)
        ref = full_attention(probes[h], K[j], V[j]).output
        errs.append(np.linalg.norm(ref - approx[h], axis=1))
    return float(np.mean(errs))


def _budget_dict(budget, extra):
    return {
        "kv_size": budget.kv_size,
        "convention": budget.convention,
        "layer_budget": budget.layer_budget,
        "footprint_limit": budget.footprint_limit,
        **extra,
    }


def _report(mode, ratio_set, dims, loss, gap, cache, budget, extra, Kc, Vc, Kw, Vw, Qwin, table,
            lam=None):
    K = np.concatenate([Kc, Kw], axis=1)
    V = np.concatenate([Vc, Vw], axis=1)
    gap_dict = gap.as_dict() if hasattr(gap, "as_dict") else gap
    return CompressionReport(
        mode=mode,
        ratios=tuple(_ratio_labels(ratio_set)),
        histograms=[_histogram(dims[j], ratio_set) for j in range(dims.shape[0])],
        dims_per_head=[int(x) for x in dims.sum(axis=1)],
        realized_loss=float(loss),
        gap=gap_dict,
        footprint=_footprint_dict(cache, budget.footprint_limit),
        budget=_budget_dict(budget, extra),
        lambda_star=lam,
        attention_error=evaluate_error(cache, K, V, Qwin),
        extra={"num_tokens": int(table.num_tokens)},
    )


def compress(K, V, Qwin, kv_size, mode="mixeddim", ratios=DEFAULT_RATIOS, alpha=32,
             head_budgets=None, convention="k_entries"):
    """Dispatch on ``mode`` (one of :data:`MODES`)."""
    K = np.asarray(K)
    budget = BudgetSpec(kv_size, np.asarray(Qwin).shape[0], K.shape[2], convention)
    if mode == "mixeddim":
        return compress_mixeddim(K, V, Qwin, budget, ratios, alpha)
    if mode == "mixeddim-h":
        return compress_mixeddim_h(K, V, Qwin, budget, ratios, alpha, head_budgets)
    if mode == "snapkv":
        return compress_snapkv(K, V, Qwin, budget, alpha)
    if mode == "jointhead":
        return compress_jointhead(K, V, Qwin, budget, ratios, alpha)
    raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")


def score_heads(K, V, Qwin, ratios=DEFAULT_RATIOS, alpha=32):
    """Fit per-head bases and return one loss table per KV head."""
    Kc, Vc, Kw, _, gqa = _split(K, V, Qwin, alpha)
    ratio_set = RatioSet(tuple(ratios), Kc.shape[2])
    bases_k, bases_v = _fit_head_bases(Kc, Vc, max(ratio_set.intermediate_dims, default=0))
    return _head_tables(Kc, Vc, Kw, Qwin, gqa, ratio_set, bases_k, bases_v)


def allocation_from_cache(cache):
    """Recover the (H_kv, N) dim allocation from a head-wise cache."""
    dims = np.zeros((cache.num_kv_heads, cache.num_tokens), dtype=np.int64)
    for j, head in enumerate(cache.heads):
        for r, g in head.groups.items():
            dims[j, g.indices] = r
    return dims
