"""Budgeted dimension allocation through the Lagrangian dual.

Minimize ``sum_i L_i(d_i)`` subject to ``sum_i d_i <= B`` with each ``d_i``
drawn from the candidate dims. For a price ``lam`` the problem splits per
token; the total cost ``C(lam)`` is a non-increasing step function, so
``lam`` is found by bisection and the leftover budget is spent greedily.
"""
import heapq
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation, InstanceTooLarge

ORACLE_LIMIT = 10 ** 7


@dataclass(frozen=True)
class Allocation:
    dims: np.ndarray  # chosen dim per token
    columns: np.ndarray  # chosen candidate column per token
    total_dim_cost: int
    realized_loss: float
    lambda_star: float
    feasible: bool
    budget: float
    lambda_bracket: tuple = (0.0, 0.0)
    probes: list = field(default_factory=list, repr=False)  # (lam, C(lam)) pairs


@dataclass(frozen=True)
class DualGapReport:
    primal_value: float
    dual_value: float
    gap_bound: float
    relative_gap: float
    lambda_star: float

    def as_dict(self):
        return {
            "primal": self.primal_value,
            "dual": self.dual_value,
            "gap": self.gap_bound,
            "relative_gap": self.relative_gap,
            "lambda_star": self.lambda_star,
        }


def _hull_positions(table, lam):
    return np.sum(table.hull_slopes > lam, axis=1)


def _columns_at(table, positions):
    return table.hull_idx[np.arange(table.num_tokens), positions]


def inner_argmin(table, lam):
    """Per-token minimizer of ``L_i(d) + lam * d`` over hull points.

    Ties go to the smaller dim. Returns ``(dims, total_cost)``.
    """
    if lam < 0:
        raise ContractViolation("lambda must be non-negative")
    dims = table.dims[_columns_at(table, _hull_positions(table, lam))]
    return dims, int(dims.sum())


def dual_value(table, lam, budget):
    """``D(lam) = sum_i min_d (L_i(d) + lam d) - lam B``."""
    per_token = np.min(table.repaired + lam * table.dims[None, :], axis=1)
    return float(per_token.sum() - lam * budget)


def max_lambda(table):
    finite = table.hull_slopes[np.isfinite(table.hull_slopes)]
    return float(finite.max()) if finite.size else 0.0


def _topup_positions(table, positions, leftover):
    positions = positions.copy()
    rows = np.arange(table.num_tokens)
    heap = [
        (-table.hull_slopes[i, positions[i]], i)
        for i in rows
        if positions[i] + 1 < table.hull_len[i]
    ]
    heapq.heapify(heap)
    while heap:
        _, i = heapq.heappop(heap)
        here, nxt = table.hull_idx[i, positions[i]], table.hull_idx[i, positions[i] + 1]
        cost = int(table.dims[nxt] - table.dims[here])
        if cost > leftover:
            continue
        leftover -= cost
        positions[i] += 1
        if positions[i] + 1 < table.hull_len[i]:
            heapq.heappush(heap, (-table.hull_slopes[i, positions[i]], i))
    return positions


def greedy_topup(table, dims, leftover):
    """Spend ``leftover`` dims on next-hull-point upgrades, best ratio first.

    ``dims`` must sit on each token's hull. Ties break toward the lowest
    token index.
    """
    dims = np.asarray(dims)
    positions = np.empty(table.num_tokens, dtype=np.int64)
    for i in range(table.num_tokens):
        hull_dims = table.dims[table.hull_idx[i, :table.hull_len[i]]]
        (where,) = np.nonzero(hull_dims == dims[i])
        if where.size == 0:
            raise ContractViolation(f"token {i} dim {dims[i]} is not on its hull")
        positions[i] = where[0]
    positions = _topup_positions(table, positions, leftover)
    return table.dims[_columns_at(table, positions)]


def _finish(table, positions, budget, lam, bracket, probes):
    cols = _columns_at(table, positions)
    dims = table.dims[cols]
    cost = int(dims.sum())
    loss = float(table.repaired[np.arange(table.num_tokens), cols].sum())
    return Allocation(dims, cols, cost, loss, lam, cost <= budget, budget, bracket, probes)


def bisect_allocate(table, budget, rel_tol=1e-9, max_iter=200):
    if budget < 0:
        raise ContractViolation(f"budget must be non-negative, got {budget}")
    lam_max = max_lambda(table)
    probes = []

    def cost_at(lam):
        c = int(table.dims[_columns_at(table, _hull_positions(table, lam))].sum())
        probes.append((lam, c))
        return c

    lo, hi = 0.0, lam_max
    if cost_at(0.0) <= budget:
        hi = 0.0
    else:
        it = 0
        while hi - lo >= rel_tol * lam_max and it < max_iter:
            mid = 0.5 * (lo + hi)
            if cost_at(mid) <= budget:
                hi = mid
            else:
                lo = mid
            it += 1
    positions = _hull_positions(table, hi)
    spent = int(table.dims[_columns_at(table, positions)].sum())
    positions = _topup_positions(table, positions, budget - spent)
    return _finish(table, positions, budget, hi, (lo, hi), probes)


def exhaustive_oracle(table, budget):
    """Optimal assignment by enumerating every combination of repaired losses.

    Enumeration runs in lexicographic order of candidate columns, and the
    first optimum found wins.
    """
    n, k = table.repaired.shape
    if k ** n > ORACLE_LIMIT:
        raise InstanceTooLarge(f"{k}^{n} assignments exceed the oracle limit {ORACLE_LIMIT}")
    loss = np.zeros(())
    cost = np.zeros((), dtype=np.int64)
    for i in range(n):
        loss = loss[..., None] + table.repaired[i]
        cost = cost[..., None] + table.dims
    loss, cost = loss.ravel(), cost.ravel()
    best = int(np.argmin(np.where(cost <= budget, loss, np.inf)))
    cols = np.array(np.unravel_index(best, (k,) * n), dtype=np.int64).reshape(n)
    dims = table.dims[cols]
    return Allocation(dims, cols, int(dims.sum()), float(loss[best]), float("nan"), True, budget)


def gap_report(table, budget, allocation):
    primal = allocation.realized_loss
    dual = dual_value(table, allocation.lambda_star, budget)
    gap = primal - dual
    return DualGapReport(primal, dual, gap, gap / max(primal, 1e-12), allocation.lambda_star)


def max_hull_step(table):
    """Largest loss drop of a single hull upgrade over all tokens.

    Bounds the realized gap of a bisection solution: the leftover budget at
    the converged price is smaller than the one upgrade that did not fit.
    """
    pos = np.arange(table.hull_idx.shape[1] - 1)
    valid = pos[None, :] < (table.hull_len[:, None] - 1)
    if not valid.any():
        return 0.0
    rows = np.arange(table.num_tokens)[:, None]
    here = table.repaired[rows, np.where(valid, table.hull_idx[:, :-1], 0)]
    nxt = table.repaired[rows, np.where(valid, table.hull_idx[:, 1:], 0)]
    return float(np.max(np.where(valid, here - nxt, 0.0)))
