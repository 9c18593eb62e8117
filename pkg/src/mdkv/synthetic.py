"""Seeded synthetic prompt caches with planted heavy hitters.

Each KV head has a query direction ``u``. Window queries point along ``u``;
needle keys get ``needle_gain * u`` added, which raises their logit by
``needle_gain`` for a unit-aligned query, and a fraction of mid-importance
tokens get a partial boost. Keys and values have a power-law spectrum so that
low-rank projection is informative, and value norms vary per token.
"""
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import cache as cache_io
from .cache import CompressedCache, HeadCache, TokenGroup
from .exceptions import ContractViolation, DataIntegrityError, FormatError

PROMPT_FILE = "prompt.mdkv"
QUERY_FILE = "queries.npy"


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    n: int = 1024  # prompt length, window included
    alpha: int = 32
    head_dim: int = 64
    num_heads: int = 8
    num_kv_heads: int = 2
    needle_count: int = 8
    needle_gain: float = 6.0
    noise_scale: float = 1.0
    mid_importance_fraction: float = 0.1
    head_skew: float = 0.75  # last KV head's boosts are scaled by (1 - head_skew)
    spectrum_decay: float = 1.0
    value_spread: float = 0.5

    def __post_init__(self):
        counts = (self.n, self.alpha, self.head_dim, self.num_heads, self.num_kv_heads)
        if min(counts) < 1 or self.needle_count < 0:
            raise ContractViolation("all counts must be positive")
        if self.needle_count + self.alpha > self.n:
            raise ContractViolation("needle_count + alpha must not exceed n")
        if self.num_heads % self.num_kv_heads:
            raise ContractViolation("num_heads must be divisible by num_kv_heads")
        if self.needle_gain < 0 or self.noise_scale <= 0:
            raise ContractViolation("needle_gain must be >= 0 and noise_scale > 0")
        if not 0.0 <= self.mid_importance_fraction <= 1.0 or not 0.0 <= self.head_skew <= 1.0:
            raise ContractViolation("fractions must lie in [0, 1]")

    def replace(self, **changes):
        return SyntheticSpec(**{**asdict(self), **changes})


class Workload(NamedTuple):
    K: np.ndarray  # (H_kv, n, D)
    V: np.ndarray
    Q: np.ndarray  # (H, alpha, D) window queries
    alpha: int
    needles: np.ndarray  # (H_kv, needle_count) token positions
    mids: np.ndarray  # (H_kv, n_mid)


def _orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def make_workload(spec):
    rng = np.random.default_rng(spec.seed)
    d, n, a = spec.head_dim, spec.n, spec.alpha
    g = spec.num_heads // spec.num_kv_heads
    compressible = n - a
    spectrum = 1.0 / (1.0 + np.arange(d)) ** spec.spectrum_decay
    spectrum *= np.sqrt(d / np.sum(spectrum ** 2))
    n_mid = min(int(round(spec.mid_importance_fraction * compressible)), compressible - spec.needle_count)

    K = np.empty((spec.num_kv_heads, n, d))
    V = np.empty((spec.num_kv_heads, n, d))
    Q = np.empty((spec.num_heads, a, d))
    needles = np.empty((spec.num_kv_heads, spec.needle_count), dtype=np.int64)
    mids = np.empty((spec.num_kv_heads, n_mid), dtype=np.int64)
    for j in range(spec.num_kv_heads):
        skew = 1.0 - spec.head_skew * (j / (spec.num_kv_heads - 1) if spec.num_kv_heads > 1 else 0.0)
        gain = spec.needle_gain * skew
        keys = (rng.standard_normal((n, d)) * spectrum) @ _orthogonal(rng, d).T
        values = (rng.standard_normal((n, d)) * spectrum) @ _orthogonal(rng, d).T
        values *= rng.lognormal(0.0, spec.value_spread, size=(n, 1))
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)

        picks = rng.permutation(compressible)
        needles[j] = np.sort(picks[:spec.needle_count])
        mids[j] = np.sort(picks[spec.needle_count:spec.needle_count + n_mid])
        keys[needles[j]] += gain * u
        keys[mids[j]] += gain * rng.uniform(0.2, 0.6, size=(n_mid, 1)) * u
        K[j], V[j] = keys, values
        for h in range(j * g, (j + 1) * g):
            Q[h] = np.sqrt(d) * u + spec.noise_scale * rng.standard_normal((a, d))
    f32 = np.float32
    return Workload(K.astype(f32), V.astype(f32), Q.astype(f32), a, needles, mids)


def prompt_cache(K, V, alpha):
    """Wrap an uncompressed prompt as a cache: window plus one full-width group."""
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    h_kv, length, d = K.shape
    n = length - alpha
    heads = []
    for j in range(h_kv):
        groups = {d: TokenGroup(np.arange(n, dtype=np.int64), K[j, :n].copy(), V[j, :n].copy())} if n else {}
        empty = np.zeros((d, 0), dtype=np.float32)
        heads.append(HeadCache(K[j, n:].copy(), V[j, n:].copy(), empty, empty.copy(), groups))
    return CompressedCache(tuple(heads), (0, d), n)


def unpack_prompt(cache):
    """Inverse of :func:`prompt_cache`."""
    K, V = [], []
    for h in cache.heads:
        if set(h.groups) - {h.full_dim}:
            raise DataIntegrityError("prompt file holds compressed groups")
        g = h.groups.get(h.full_dim)
        body_k = g.k if g is not None else np.zeros((0, h.full_dim), np.float32)
        body_v = g.v if g is not None else np.zeros((0, h.full_dim), np.float32)
        K.append(np.concatenate([body_k, h.window_k]))
        V.append(np.concatenate([body_v, h.window_v]))
    return np.stack(K), np.stack(V), cache.alpha


def gen_synthetic(spec, out_dir):
    """Write ``prompt.mdkv`` and ``queries.npy`` under ``out_dir``; return their paths."""
    w = make_workload(spec)
    os.makedirs(out_dir, exist_ok=True)
    prompt_path = os.path.join(out_dir, PROMPT_FILE)
    query_path = os.path.join(out_dir, QUERY_FILE)
    cache_io.save(prompt_cache(w.K, w.V, w.alpha), prompt_path)
    tmp = query_path + ".tmp"
    with open(tmp, "wb") as fh:
        np.save(fh, w.Q)
    os.replace(tmp, query_path)
    return prompt_path, query_path


def load_workload(in_dir):
    """Return ``(K, V, Q, alpha)`` from a directory written by :func:`gen_synthetic`."""
    prompt_path = os.path.join(in_dir, PROMPT_FILE)
    K, V, alpha = unpack_prompt(cache_io.load(prompt_path))
    try:
        Q = np.load(os.path.join(in_dir, QUERY_FILE), allow_pickle=False)
    except ValueError as err:
        raise FormatError(f"{QUERY_FILE}: {err}") from None
    if Q.ndim != 3 or Q.shape[2] != K.shape[2] or Q.shape[0] % K.shape[0]:
        raise DataIntegrityError(f"queries of shape {Q.shape} do not fit a cache of shape {K.shape}")
    return K, V, Q, alpha
