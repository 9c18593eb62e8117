"""Command line entry point: ``mdkv <subcommand> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data or format error.
"""
import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from . import cache as cache_io
from . import experiments
from .exceptions import ConfigurationError, ContractViolation, DataIntegrityError, FormatError, MDKVError
from .pca import DEFAULT_RATIOS
from .pipeline import MODES as CLI_MODES, HeadBudgets, allocation_from_cache, compress, score_heads
from .synthetic import SyntheticSpec, gen_synthetic, load_workload

REPORT_SCHEMA_VERSION = 1


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_atomic(path, data):
    mode = "wb" if isinstance(data, bytes) else "w"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _csv_text(columns, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _jsonable(obj):
    """Replace NaN by None so the JSON stays standard."""
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _emit(args, stem, payload, columns, rows):
    """Write ``stem.json`` and ``stem.csv`` and echo the requested format."""
    json_text = json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"
    csv_text = _csv_text(columns, rows)
    _write_atomic(os.path.join(args.out, stem + ".json"), json_text)
    _write_atomic(os.path.join(args.out, stem + ".csv"), csv_text)
    sys.stdout.write(json_text if args.format == "json" else csv_text)


def _manifest(args):
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}
    return {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "package_version": __version__,
        "formats": {"mdkv": cache_io.FORMAT_VERSION, "report_schema": REPORT_SCHEMA_VERSION},
        "numpy_version": np.__version__,
    }


# -- subcommands -----------------------------------------------------------


def cmd_gen(args):
    spec = SyntheticSpec(
        seed=args.seed, n=args.n, alpha=args.alpha, head_dim=args.dim, num_heads=args.heads,
        num_kv_heads=args.kv_heads, needle_count=args.needles, needle_gain=args.needle_gain,
        noise_scale=args.noise_scale, mid_importance_fraction=args.mid_fraction, head_skew=args.head_skew,
    )
    prompt, queries = gen_synthetic(spec, args.out)
    sys.stdout.write(f"{prompt}\n{queries}\n")


def cmd_score(args):
    K, V, Q, alpha = load_workload(args.input)
    tables = score_heads(K, V, Q, args.ratios, alpha)
    rows = [
        {"head": h, "token_index": i, "dim": d, "loss": loss}
        for h, t in enumerate(tables)
        for i, d, loss in t.rows()
    ]
    payload = {"ratios": list(args.ratios), "dims": [int(d) for d in tables[0].dims],
               "num_tokens": tables[0].num_tokens, "num_kv_heads": len(tables)}
    _emit(args, "scores", payload, ("head", "token_index", "dim", "loss"), rows)


def _compress(args, mode):
    K, V, Q, alpha = load_workload(args.input)
    budgets = HeadBudgets.read(args.head_budgets) if args.head_budgets else None
    if mode == "mixeddim-h" and budgets is None:
        budgets = HeadBudgets.uniform(K.shape[0])
    return compress(K, V, Q, args.kv_size, mode=mode, ratios=args.ratios, alpha=alpha,
                    head_budgets=budgets, convention=args.budget_convention)


def cmd_allocate(args):
    if args.mode == "jointhead":
        raise ConfigurationError("allocate reports per-head dims; use compress for jointhead")
    cache, report = _compress(args, args.mode)
    dims = allocation_from_cache(cache)
    rows = [{"head": j, "token_index": i, "dim": int(dims[j, i])}
            for j in range(dims.shape[0]) for i in range(dims.shape[1])]
    payload = {"mode": report.mode, "gap": report.gap, "lambda_star": report.lambda_star,
               "realized_loss": report.realized_loss, "dims_per_head": report.dims_per_head,
               "budget": report.budget}
    _emit(args, "allocation", payload, ("head", "token_index", "dim"), rows)


def cmd_compress(args):
    cache, report = _compress(args, args.mode)
    if args.mode != "jointhead":
        cache_io.save(cache, os.path.join(args.out, "compressed.mdkv"))
    rows = [{"head": h, "ratio": r, "fraction": f} for h, r, f in report.csv_rows()]
    _emit(args, "report", report.as_dict(), ("head", "ratio", "fraction"), rows)


def cmd_gap(args):
    seeds = range(args.seed, args.seed + args.seeds)
    base = SyntheticSpec(alpha=args.alpha)
    rows = experiments.gap_sweep(args.n, seeds, args.budget_fraction, base, ratios=args.ratios)
    _emit(args, "gap", {"rows": rows, "seeds": list(seeds), "budget_fraction": args.budget_fraction},
          experiments.GAP_COLUMNS, rows)


def cmd_bench(args):
    seeds = range(args.seed, args.seed + args.seeds)
    base = SyntheticSpec(alpha=args.alpha)
    rows = experiments.bench(seeds, args.kv_size, args.budget_fraction, base)
    wins = sum(r["mixeddim_error"] <= r["snapkv_error"] for r in rows)
    payload = {"rows": rows, "mixeddim_win_rate": wins / max(len(rows), 1)}
    _emit(args, "bench", payload, experiments.BENCH_COLUMNS, rows)


def cmd_ablate(args):
    base = SyntheticSpec(alpha=args.alpha)
    rows = experiments.ablate(args.kv_sizes, args.seed, base)
    _emit(args, "ablate", {"rows": rows}, experiments.ABLATE_COLUMNS, rows)


# -- parser ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mdkv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--format", choices=("json", "csv"), default="json", help="format echoed to stdout")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "write a synthetic prompt cache and window queries")
    d = SyntheticSpec()
    p.add_argument("--n", type=int, default=d.n)
    p.add_argument("--alpha", type=int, default=d.alpha)
    p.add_argument("--dim", type=int, default=d.head_dim)
    p.add_argument("--heads", type=int, default=d.num_heads)
    p.add_argument("--kv-heads", type=int, default=d.num_kv_heads)
    p.add_argument("--needles", type=int, default=d.needle_count)
    p.add_argument("--needle-gain", type=float, default=d.needle_gain)
    p.add_argument("--noise-scale", type=float, default=d.noise_scale)
    p.add_argument("--mid-fraction", type=float, default=d.mid_importance_fraction)
    p.add_argument("--head-skew", type=float, default=d.head_skew)

    p = add("score", cmd_score, "loss table of every token at every candidate ratio")
    p.add_argument("--input", required=True, help="directory written by gen")
    p.add_argument("--ratios", type=_floats, default=DEFAULT_RATIOS)

    for name, func, help_text in (("allocate", cmd_allocate, "per-token dims under a budget"),
                                  ("compress", cmd_compress, "build a compressed cache and report")):
        p = add(name, func, help_text)
        p.add_argument("--input", required=True, help="directory written by gen")
        p.add_argument("--kv-size", type=int, required=True)
        p.add_argument("--ratios", type=_floats, default=DEFAULT_RATIOS)
        p.add_argument("--mode", choices=CLI_MODES, default="mixeddim")
        p.add_argument("--head-budgets", help="table of 'layer head weight' lines")
        p.add_argument("--budget-convention", choices=("k_entries", "kv_pairs"), default="k_entries")

    p = add("gap", cmd_gap, "duality gap against prompt length")
    p.add_argument("--n", type=_ints, default=(512, 2048, 8192))
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds averaged")
    p.add_argument("--budget-fraction", type=float, default=0.25)
    p.add_argument("--alpha", type=int, default=SyntheticSpec().alpha)
    p.add_argument("--ratios", type=_floats, default=DEFAULT_RATIOS)

    p = add("bench", cmd_bench, "paired mixed-dimension vs SnapKV error")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--kv-size", type=int, default=None, help="defaults to --budget-fraction of the prompt")
    p.add_argument("--budget-fraction", type=float, default=0.25)
    p.add_argument("--alpha", type=int, default=SyntheticSpec().alpha)

    p = add("ablate", cmd_ablate, "head-wise vs joint-head compression")
    p.add_argument("--kv-sizes", type=_ints, default=(32, 64, 128, 256))
    p.add_argument("--alpha", type=int, default=SyntheticSpec().alpha)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        args.func(args)
        _write_atomic(os.path.join(args.out, "manifest.json"),
                      json.dumps(_manifest(args), indent=2, sort_keys=True) + "\n")
    except (ConfigurationError, ContractViolation) as err:
        print(f"mdkv {args.command}: configuration error: {err}", file=sys.stderr)
        return 1
    except (FormatError, DataIntegrityError, OSError) as err:
        print(f"mdkv {args.command}: data error: {err}", file=sys.stderr)
        return 2
    except MDKVError as err:
        print(f"mdkv {args.command}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
