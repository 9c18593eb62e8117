"""Seeded sweeps behind the ``gap``, ``bench`` and ``ablate`` subcommands."""
import numpy as np

from .exceptions import ConfigurationError
from .pipeline import BudgetSpec, compress_jointhead, compress_mixeddim, compress_mixeddim_h, compress_snapkv
from .synthetic import SyntheticSpec, make_workload

GAP_COLUMNS = ("N", "primal", "dual", "gap", "relative_gap")
BENCH_COLUMNS = ("seed", "mixeddim_error", "snapkv_error", "mixeddim_loss", "mixeddim_h_loss")
ABLATE_COLUMNS = ("kv_size", "headwise_error", "jointhead_error",
                  "headwise_projection_entries", "jointhead_projection_entries")


def kv_size_for_fraction(spec, fraction):
    """Equivalent KV size that grants ``fraction`` of the full prompt cache."""
    return max(int(round(fraction * spec.n * spec.num_kv_heads / spec.num_heads)), 1)


def gap_sweep(lengths, seeds, budget_fraction=0.25, base=None, ratios=None):
    """Average primal, dual and gap per prompt length, one row per length."""
    base = base or SyntheticSpec()
    rows = []
    for n in lengths:
        acc = []
        for seed in seeds:
            spec = base.replace(seed=seed, n=n)
            w = make_workload(spec)
            budget = BudgetSpec(kv_size_for_fraction(spec, budget_fraction), spec.num_heads, spec.head_dim)
            kwargs = {} if ratios is None else {"ratios": ratios}
            _, report = compress_mixeddim(w.K, w.V, w.Q, budget, alpha=spec.alpha, **kwargs)
            g = report.gap
            acc.append((g["primal"], g["dual"], g["gap"], g["relative_gap"]))
        mean = np.mean(acc, axis=0)
        rows.append({"N": n, **dict(zip(GAP_COLUMNS[1:], (float(x) for x in mean)))})
    return rows


def bench(seeds, kv_size=None, budget_fraction=0.25, base=None):
    """Paired mixed-dimension vs SnapKV attention error at equal budgets."""
    base = base or SyntheticSpec()
    rows = []
    for seed in seeds:
        spec = base.replace(seed=seed)
        w = make_workload(spec)
        t = kv_size if kv_size is not None else kv_size_for_fraction(spec, budget_fraction)
        budget = BudgetSpec(t, spec.num_heads, spec.head_dim)
        _, mixed = compress_mixeddim(w.K, w.V, w.Q, budget, alpha=spec.alpha)
        _, snap = compress_snapkv(w.K, w.V, w.Q, budget, alpha=spec.alpha)
        _, per_head = compress_mixeddim_h(w.K, w.V, w.Q, budget, alpha=spec.alpha)
        rows.append({
            "seed": seed,
            "mixeddim_error": mixed.attention_error,
            "snapkv_error": snap.attention_error,
            "mixeddim_loss": mixed.realized_loss,
            "mixeddim_h_loss": per_head.realized_loss,
        })
    return rows


def ablate(kv_sizes, seed=0, base=None):
    """Head-wise against joint-head compression at several budgets."""
    spec = (base or SyntheticSpec()).replace(seed=seed)
    w = make_workload(spec)
    rows = []
    for t in kv_sizes:
        budget = BudgetSpec(t, spec.num_heads, spec.head_dim)
        row = {"kv_size": t}
        for name, fn in (("headwise", compress_mixeddim), ("jointhead", compress_jointhead)):
            try:
                _, rep = fn(w.K, w.V, w.Q, budget, alpha=spec.alpha)
                err, proj = rep.attention_error, rep.footprint["projection_entries"]
            except ConfigurationError:
                # window plus projections alone can exceed a small budget
                err, proj = float("nan"), float("nan")
            row[f"{name}_error"] = err
            row[f"{name}_projection_entries"] = proj
        rows.append(row)
    return rows
