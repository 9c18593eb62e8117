import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdkv.allocation import (
    bisect_allocate,
    dual_value,
    exhaustive_oracle,
    gap_report,
    greedy_topup,
    inner_argmin,
    max_hull_step,
    max_lambda,
)
from mdkv.exceptions import ContractViolation, InstanceTooLarge
from mdkv.scoring import LossTable

from conftest import DIMS, random_table


def test_inner_argmin_extremes(rng):
    table = random_table(rng, 20)
    dims, cost = inner_argmin(table, max_lambda(table) * 1.01)
    assert cost == 0 and np.all(dims == 0)
    dims, _ = inner_argmin(table, 0.0)
    # at zero price every token climbs until its curve goes flat
    hull_end = table.dims[table.hull_idx[np.arange(20), table.hull_len - 1]]
    np.testing.assert_array_equal(dims, hull_end)


def test_inner_argmin_tie_goes_to_smaller_dim():
    table = LossTable.from_losses((0, 10), [[10.0, 0.0]])
    assert inner_argmin(table, 1.0)[0][0] == 0
    assert inner_argmin(table, 0.999)[0][0] == 10


def test_inner_argmin_minimizes_lagrangian(rng):
    table = random_table(rng, 50)
    for lam in (0.0, 0.01, 0.05, 0.2):
        dims, _ = inner_argmin(table, lam)
        col = np.searchsorted(table.dims, dims)
        chosen = table.repaired[np.arange(50), col] + lam * dims
        best = np.min(table.repaired + lam * table.dims[None, :], axis=1)
        np.testing.assert_allclose(chosen, best, atol=1e-12)


def test_negative_lambda_rejected(rng):
    with pytest.raises(ContractViolation):
        inner_argmin(random_table(rng, 2), -1.0)


def test_cost_monotone_in_lambda(rng):
    for _ in range(20):
        table = random_table(rng, 30)
        grid = np.linspace(0, max_lambda(table) * 1.1, 300)
        costs = [inner_argmin(table, lam)[1] for lam in grid]
        assert all(a >= b for a, b in zip(costs, costs[1:]))


@pytest.mark.parametrize("seed", range(30))
def test_bisect_feasible_and_bounded(seed):
    rng = np.random.default_rng(seed)
    table = random_table(rng, int(rng.integers(1, 9)))
    budget = int(rng.integers(0, table.num_tokens * 128 + 1))
    alloc = bisect_allocate(table, budget)
    opt = exhaustive_oracle(table, budget)
    gap = gap_report(table, budget, alloc)
    assert alloc.feasible and alloc.total_dim_cost <= budget
    assert opt.realized_loss <= alloc.realized_loss + 1e-9
    assert alloc.realized_loss <= opt.realized_loss + gap.gap_bound + 1e-9


def test_weak_duality_on_probes(rng):
    for _ in range(20):
        table = random_table(rng, 25)
        budget = int(rng.integers(0, 25 * 128))
        alloc = bisect_allocate(table, budget)
        for lam, _ in alloc.probes:
            assert dual_value(table, lam, budget) <= alloc.realized_loss + 1e-6


def test_gap_bounded_by_largest_step(rng):
    for _ in range(50):
        table = random_table(rng, 40)
        budget = int(rng.integers(0, 40 * 128))
        alloc = bisect_allocate(table, budget)
        assert gap_report(table, budget, alloc).gap_bound <= max_hull_step(table) + 1e-9


def test_scale_equivariance(rng):
    table = random_table(rng, 30)
    budget = 1500
    base = bisect_allocate(table, budget)
    for c in (0.5, 3.0, 1000.0):
        scaled = bisect_allocate(table.scaled(c), budget)
        np.testing.assert_array_equal(scaled.dims, base.dims)
        np.testing.assert_allclose(scaled.lambda_bracket, np.multiply(base.lambda_bracket, c), rtol=1e-9)


def test_slack_budget():
    table = LossTable.from_losses(DIMS, [[3.0, 2.0, 1.0, 0.0], [5.0, 1.0, 0.5, 0.0]])
    alloc = bisect_allocate(table, 10_000)
    assert alloc.lambda_star == 0.0
    assert list(alloc.dims) == [128, 128]
    g = gap_report(table, 10_000, alloc)
    assert g.primal_value == 0.0 and g.dual_value == 0.0 and g.gap_bound == 0.0


def test_two_point_exact_threshold():
    losses = [[9.0, 0.0], [7.0, 0.0], [5.0, 0.0], [3.0, 0.0], [1.0, 0.0]]
    table = LossTable.from_losses((0, 8), losses)
    alloc = bisect_allocate(table, 16)
    assert list(alloc.dims) == [8, 8, 0, 0, 0]
    assert gap_report(table, 16, alloc).gap_bound <= 1e-6


def test_zero_budget(rng):
    alloc = bisect_allocate(random_table(rng, 10), 0)
    assert alloc.total_dim_cost == 0 and alloc.feasible


def test_negative_budget_rejected(rng):
    with pytest.raises(ContractViolation):
        bisect_allocate(random_table(rng, 3), -1)


def test_topup_no_leftover(rng):
    table = random_table(rng, 10)
    dims, _ = inner_argmin(table, 0.05)
    np.testing.assert_array_equal(greedy_topup(table, dims, 0), dims)


def test_topup_single_upgrade():
    table = LossTable.from_losses((0, 8), [[4.0, 0.0]])
    assert list(greedy_topup(table, np.array([0]), 8)) == [8]
    assert list(greedy_topup(table, np.array([0]), 7)) == [0]


def test_topup_tie_prefers_lower_index():
    table = LossTable.from_losses((0, 8), [[4.0, 0.0], [4.0, 0.0]])
    assert list(greedy_topup(table, np.array([0, 0]), 8)) == [8, 0]


def test_topup_rejects_off_hull():
    table = LossTable.from_losses(DIMS, [[5.0, 6.0, 3.0, 0.0]])
    with pytest.raises(ContractViolation):
        greedy_topup(table, np.array([16]), 10)


@pytest.mark.parametrize("seed", range(100))
def test_topup_improves_and_fits(seed):
    rng = np.random.default_rng(seed)
    table = random_table(rng, 15)
    dims, cost = inner_argmin(table, float(rng.uniform(0, max_lambda(table))))
    budget = cost + int(rng.integers(0, 300))
    after = greedy_topup(table, dims, budget - cost)
    col = lambda d: np.searchsorted(table.dims, d)
    rows = np.arange(15)
    assert table.repaired[rows, col(after)].sum() <= table.repaired[rows, col(dims)].sum()
    assert after.sum() <= budget


def test_oracle_single_token():
    table = LossTable.from_losses(DIMS, [[8.0, 4.0, 2.0, 0.0]])
    assert exhaustive_oracle(table, 100).dims.tolist() == [32]


def test_oracle_full_budget(rng):
    table = random_table(rng, 5)
    assert exhaustive_oracle(table, 5 * 128).dims.tolist() == [128] * 5


def test_oracle_uses_repaired_losses():
    table = LossTable.from_losses(DIMS, [[5.0, 6.0, 3.0, 0.0]])
    alloc = exhaustive_oracle(table, 20)
    assert alloc.realized_loss == 5.0 and alloc.dims.tolist() == [0]


def test_oracle_refuses_large():
    table = LossTable.from_losses(DIMS, np.ones((12, 4)))
    with pytest.raises(InstanceTooLarge):
        exhaustive_oracle(table, 10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.floats(0, 1))
def test_bisect_between_oracle_and_bound(seed, n, frac):
    table = random_table(np.random.default_rng(seed), n)
    budget = int(frac * n * 128)
    alloc = bisect_allocate(table, budget)
    opt = exhaustive_oracle(table, budget)
    bound = gap_report(table, budget, alloc).gap_bound
    assert alloc.feasible
    assert opt.realized_loss - 1e-9 <= alloc.realized_loss <= opt.realized_loss + bound + 1e-9


def test_gap_report_dict(rng):
    table = random_table(rng, 10)
    alloc = bisect_allocate(table, 300)
    d = gap_report(table, 300, alloc).as_dict()
    assert set(d) == {"primal", "dual", "gap", "relative_gap", "lambda_star"}
    assert d["gap"] == pytest.approx(d["primal"] - d["dual"])
