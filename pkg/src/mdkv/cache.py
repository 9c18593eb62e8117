"""Group-packed compressed KV cache, footprint accounting and the .mdkv format.

Layout of a ``.mdkv`` file (little-endian)::

    "MDKV"  version:u16
    H_kv:u16  D:u16  alpha:u32  N:u32  r_max:u16  num_ratios:u8  dims:u16 * num_ratios
    per KV head:
        basis_K  f32[D, r_max]   basis_V f32[D, r_max]
        window_K f32[alpha, D]   window_V f32[alpha, D]
        per nonzero candidate dim, ascending:
            dim:u16  count:u32  indices:u32 * count  K_c f32[count, dim]  V_c f32[count, dim]
    crc32:u32 over every preceding byte

Every nonzero candidate dim gets a group record, possibly with ``count == 0``.
"""
import io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .attention import GqaConfig, mixed_rank_attention
from .exceptions import ContractViolation, DataIntegrityError, FormatError
from .linalg import STORAGE_DTYPE, as_matrix
from .pca import ProjectionBasis

MAGIC = b"MDKV"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


@dataclass(frozen=True)
class TokenGroup:
    indices: np.ndarray  # ascending token positions, int64
    k: np.ndarray  # (n, r) float32
    v: np.ndarray  # (n, r) float32

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class HeadCache:
    """One KV head: uncompressed window, bases at max stored rank, packed groups."""

    window_k: np.ndarray
    window_v: np.ndarray
    basis_k: np.ndarray  # (full_dim, r_max) float32
    basis_v: np.ndarray
    groups: Dict[int, TokenGroup] = field(default_factory=dict)

    @property
    def full_dim(self):
        return self.window_k.shape[1]

    @property
    def max_rank(self):
        return self.basis_k.shape[1]

    @property
    def alpha(self):
        return self.window_k.shape[0]

    def token_dims(self):
        """Mapping token index -> stored dim (evicted tokens absent)."""
        return {int(i): r for r, g in self.groups.items() for i in g.indices}

    def append(self, k, v):
        """Return a copy with decode-time tokens appended uncompressed to the window."""
        k = as_matrix(np.atleast_2d(k), "k")
        v = as_matrix(np.atleast_2d(v), "v")
        return HeadCache(
            np.concatenate([self.window_k, k]),
            np.concatenate([self.window_v, v]),
            self.basis_k,
            self.basis_v,
            self.groups,
        )


@dataclass(frozen=True)
class CompressedCache:
    """Per-layer compressed cache for ``H_kv`` heads sharing one candidate dim set."""

    heads: Tuple[HeadCache, ...]
    ratio_dims: Tuple[int, ...]
    num_tokens: int  # compressible (non-window) prompt tokens

    @property
    def num_kv_heads(self):
        return len(self.heads)

    @property
    def head_dim(self):
        return self.heads[0].full_dim

    @property
    def alpha(self):
        return self.heads[0].alpha

    @property
    def max_rank(self):
        return self.heads[0].max_rank

    def attend(self, Q):
        """Attention outputs for queries ``Q`` of shape (H, M, D) under GQA."""
        Q = np.asarray(Q)
        gqa = GqaConfig(Q.shape[0], self.num_kv_heads, self.head_dim)
        return np.stack(
            [mixed_rank_attention(Q[h], self.heads[gqa.kv_head_of(h)]) for h in range(Q.shape[0])]
        )


@dataclass(frozen=True)
class JointCompressedCache:
    """Joint-head variant: one packed store over the concatenated ``H_kv * D`` features."""

    store: HeadCache
    num_kv_heads: int
    num_tokens: int
    ratio_dims: Tuple[int, ...]

    @property
    def head_dim(self):
        return self.store.full_dim // self.num_kv_heads

    def attend(self, Q):
        Q = np.asarray(Q)
        d = self.head_dim
        gqa = GqaConfig(Q.shape[0], self.num_kv_heads, d)
        out = []
        for h in range(Q.shape[0]):
            j = gqa.kv_head_of(h)
            out.append(mixed_rank_attention(Q[h], self.store, columns=slice(j * d, (j + 1) * d)))
        return np.stack(out)


@dataclass(frozen=True)
class MemoryFootprint:
    """Entry counts (scalars, K and V both counted)."""

    token_entries: int
    projection_entries: int
    per_head: Tuple[Tuple[int, int], ...]  # (token_entries, projection_entries) per store

    @property
    def total(self):
        return self.token_entries + self.projection_entries


def _basis_array(basis, full_dim):
    if isinstance(basis, ProjectionBasis):
        basis = basis.basis
    if basis is None:
        return np.zeros((full_dim, 0), dtype=STORAGE_DTYPE)
    basis = np.asarray(basis, dtype=STORAGE_DTYPE)
    if basis.ndim != 2 or basis.shape[0] != full_dim:
        raise ContractViolation(f"basis shape {basis.shape} does not fit width {full_dim}")
    return basis


def build_head_cache(K, V, dims, basis_k, basis_v, window_k, window_v, ratio_dims=None):
    """Partition tokens by their allocated dim and pack each group contiguously.

    Dim-0 tokens are dropped, full-width tokens are stored raw, and everything
    else is projected through the first ``r`` stored basis columns.
    """
    K, V = as_matrix(K, "K"), as_matrix(V, "V")
    window_k, window_v = as_matrix(window_k, "window_k"), as_matrix(window_v, "window_v")
    dims = np.asarray(dims, dtype=np.int64)
    if dims.shape != (K.shape[0],) or V.shape != K.shape:
        raise ContractViolation(
            f"allocation length {dims.shape} does not match K{K.shape} / V{V.shape}"
        )
    full = K.shape[1]
    bk, bv = _basis_array(basis_k, full), _basis_array(basis_v, full)
    if bk.shape != bv.shape:
        raise ContractViolation("key and value bases must share max rank")
    if ratio_dims is not None and not set(np.unique(dims)) <= set(ratio_dims):
        raise ContractViolation(f"allocation uses dims outside {tuple(ratio_dims)}")

    groups = {}
    for r in np.unique(dims):
        r = int(r)
        if r == 0:
            continue
        idx = np.flatnonzero(dims == r)
        if r == full:
            kc, vc = K[idx], V[idx]
        else:
            if r > bk.shape[1]:
                raise ContractViolation(f"dim {r} exceeds stored basis rank {bk.shape[1]}")
            kc = (K[idx].astype(np.float64) @ bk[:, :r].astype(np.float64)).astype(STORAGE_DTYPE)
            vc = (V[idx].astype(np.float64) @ bv[:, :r].astype(np.float64)).astype(STORAGE_DTYPE)
        groups[r] = TokenGroup(idx.astype(np.int64), np.ascontiguousarray(kc), np.ascontiguousarray(vc))
    return HeadCache(window_k, window_v, bk, bv, groups)


def build_cache(K, V, allocation, bases_k, bases_v, window_k, window_v, ratio_dims):
    """Build a multi-head cache.

    ``K``/``V`` are (H_kv, N, D) compressible tokens, ``allocation`` is
    (H_kv, N) dims, ``bases_*`` hold one basis (or None) per head and
    ``window_*`` are (H_kv, alpha, D).
    """
    K, V = np.asarray(K), np.asarray(V)
    allocation = np.asarray(allocation)
    if allocation.shape != K.shape[:2]:
        raise ContractViolation(f"allocation shape {allocation.shape} != {K.shape[:2]}")
    heads = tuple(
        build_head_cache(K[j], V[j], allocation[j], bases_k[j], bases_v[j], window_k[j], window_v[j], ratio_dims)
        for j in range(K.shape[0])
    )
    return CompressedCache(heads, tuple(int(d) for d in ratio_dims), int(K.shape[1]))


def _head_footprint(head):
    tokens = sum(2 * len(g) * r for r, g in head.groups.items()) + 2 * head.alpha * head.full_dim
    return tokens, 2 * head.full_dim * head.max_rank


def memory_footprint(cache):
    stores = cache.heads if isinstance(cache, CompressedCache) else (cache.store,)
    per_head = tuple(_head_footprint(h) for h in stores)
    return MemoryFootprint(
        token_entries=sum(t for t, _ in per_head),
        projection_entries=sum(p for _, p in per_head),
        per_head=per_head,
    )


def projection_overhead(num_kv_heads, head_dim, ratio, joint=False):
    """Projection entries (K and V) needed to store bases at ``ratio``."""
    if joint:
        width = num_kv_heads * head_dim
        return 2 * width * int(np.floor(ratio * width + 0.5))
    return num_kv_heads * 2 * head_dim * int(np.floor(ratio * head_dim + 0.5))


# -- serialization ---------------------------------------------------------


def _f32_bytes(a):
    return np.ascontiguousarray(a, dtype=_F32).tobytes()


def serialize(cache):
    if not isinstance(cache, CompressedCache):
        raise ContractViolation("only head-wise caches have an on-disk format")
    h0 = cache.heads[0]
    d, alpha, r_max = h0.full_dim, h0.alpha, h0.max_rank
    for h in cache.heads:
        if (h.full_dim, h.alpha, h.max_rank) != (d, alpha, r_max):
            raise DataIntegrityError("heads disagree on D, alpha or r_max")
        if not set(h.groups) <= set(cache.ratio_dims):
            raise DataIntegrityError("group dims outside the candidate set")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<HHIIHB", cache.num_kv_heads, d, alpha, cache.num_tokens, r_max, len(cache.ratio_dims)))
    buf.write(struct.pack(f"<{len(cache.ratio_dims)}H", *cache.ratio_dims))
    for h in cache.heads:
        for a in (h.basis_k, h.basis_v, h.window_k, h.window_v):
            buf.write(_f32_bytes(a))
        for r in cache.ratio_dims:
            if r == 0:
                continue
            g = h.groups.get(r)
            count = 0 if g is None else len(g)
            buf.write(struct.pack("<HI", r, count))
            if count:
                buf.write(np.ascontiguousarray(g.indices, dtype=_U32).tobytes())
                buf.write(_f32_bytes(g.k))
                buf.write(_f32_bytes(g.v))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data, end):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n, what):
        if self.pos + n > self.end:
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, rows, cols, what):
        raw = self.take(4 * rows * cols, what)
        return np.frombuffer(raw, dtype=_F32).astype(STORAGE_DTYPE).reshape(rows, cols)


def _parse(data, end):
    rd = _Reader(data, end)
    rd.take(6, "magic/version")
    h_kv, d, alpha, n, r_max, n_ratios = rd.unpack("<HHIIHB", "header")
    dims = rd.unpack(f"<{n_ratios}H", "ratio dims")
    heads = []
    for j in range(h_kv):
        bk = rd.floats(d, r_max, f"head {j} basis_K")
        bv = rd.floats(d, r_max, f"head {j} basis_V")
        wk = rd.floats(alpha, d, f"head {j} window_K")
        wv = rd.floats(alpha, d, f"head {j} window_V")
        groups = {}
        for expected in dims:
            if expected == 0:
                continue
            at = rd.pos
            r, count = rd.unpack("<HI", f"head {j} group header")
            if r != expected:
                raise FormatError(f"group dim {r} where {expected} was expected", offset=at)
            if count > n:
                raise FormatError(f"group count {count} exceeds token count {n}", offset=at)
            if count:
                idx_at = rd.pos
                idx = np.frombuffer(rd.take(4 * count, "indices"), dtype=_U32).astype(np.int64)
                if idx.max() >= n or np.any(np.diff(idx) <= 0):
                    raise FormatError("token indices out of range or not ascending", offset=idx_at)
                kc = rd.floats(count, r, "K_c")
                vc = rd.floats(count, r, "V_c")
                groups[r] = TokenGroup(idx, kc, vc)
        heads.append(HeadCache(wk, wv, bk, bv, groups))
    return CompressedCache(tuple(heads), tuple(dims), n), rd.pos


def deserialize(data):
    data = bytes(data)
    if data[:4] != MAGIC:
        raise FormatError("bad magic", offset=0)
    if len(data) < 6:
        raise FormatError("truncated before version", offset=len(data))
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if len(data) < 10:
        raise FormatError("truncated before checksum", offset=len(data))

    body_end = len(data) - 4
    (stored,) = struct.unpack_from("<I", data, body_end)
    computed = zlib.crc32(data[:body_end]) & 0xFFFFFFFF
    if stored != computed:
        # a short file usually shows up as a parse overrun; report where it ran out
        try:
            _, consumed = _parse(data, len(data))
        except FormatError as err:
            raise FormatError(f"checksum mismatch; file looks truncated ({err})", offset=err.offset) from None
        raise FormatError(
            f"checksum mismatch (stored {stored:#010x}, computed {computed:#010x}, "
            f"{consumed} payload bytes parsed)",
            offset=body_end,
        )
    cache, consumed = _parse(data, body_end)
    if consumed != body_end:
        raise FormatError(f"{body_end - consumed} unexpected bytes before checksum", offset=consumed)
    return cache


def save(cache, path):
    """Write a cache atomically (temp file + rename)."""
    path = os.fspath(path)
    payload = serialize(cache)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def caches_equal(a, b):
    """Bitwise structural equality of two caches."""
    if a.ratio_dims != b.ratio_dims or a.num_tokens != b.num_tokens or a.num_kv_heads != b.num_kv_heads:
        return False
    for ha, hb in zip(a.heads, b.heads):
        for x, y in ((ha.window_k, hb.window_k), (ha.window_v, hb.window_v),
                     (ha.basis_k, hb.basis_k), (ha.basis_v, hb.basis_v)):
            if x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
        if set(ha.groups) != set(hb.groups):
            return False
        for r in ha.groups:
            ga, gb = ha.groups[r], hb.groups[r]
            if not np.array_equal(ga.indices, gb.indices):
                return False
            if ga.k.tobytes() != gb.k.tobytes() or ga.v.tobytes() != gb.v.tobytes():
                return False
    return True
