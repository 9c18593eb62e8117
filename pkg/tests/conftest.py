import numpy as np
import pytest

from mdkv.cache import build_cache
from mdkv.pca import fit_basis
from mdkv.scoring import LossTable

DIMS = (0, 16, 32, 128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_table(rng, n, dims=DIMS, scale=1.0):
    """Loss table with decreasing-ish random curves, zero loss at full width."""
    k = len(dims)
    steps = rng.exponential(scale, size=(n, k - 1))
    # occasional bumps so monotone repair and hull pruning have work to do
    steps *= np.where(rng.random((n, k - 1)) < 0.2, -0.3, 1.0)
    losses = np.concatenate([np.cumsum(steps[:, ::-1], axis=1)[:, ::-1], np.zeros((n, 1))], axis=1)
    return LossTable.from_losses(dims, np.abs(losses))


def random_cache(rng, h_kv=2, n=24, alpha=4, d=16, ratio_dims=(0, 2, 4, 16), dims=None):
    """Random multi-head cache together with its raw K, V and allocation."""
    K = rng.standard_normal((h_kv, n + alpha, d)).astype(np.float32)
    V = rng.standard_normal((h_kv, n + alpha, d)).astype(np.float32)
    r_max = max((r for r in ratio_dims if 0 < r < d), default=0) if n else 0
    if dims is None:
        dims = rng.choice(ratio_dims, size=(h_kv, n))
    bases_k = [fit_basis(K[j, :n], r_max) if r_max else None for j in range(h_kv)]
    bases_v = [fit_basis(V[j, :n], r_max) if r_max else None for j in range(h_kv)]
    cache = build_cache(K[:, :n], V[:, :n], dims, bases_k, bases_v, K[:, n:], V[:, n:], ratio_dims)
    return cache, K, V, dims


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, elapsed, limit, detail=""):
    """Remember and print one acceptance line; runtime overruns count as failures."""
    ok = ok and elapsed < limit
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({elapsed:.2f}s / {limit:.0f}s){detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
