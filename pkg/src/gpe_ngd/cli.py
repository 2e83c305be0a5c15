"""Experiment runner: train / reference / compare / export / bench.

Every run persists its fully-resolved config, a per-epoch CSV log, a JSON
summary, and parameter checkpoints; all output files carry the config
hash in a header line. Runs are reproducible from the persisted config.
"""

from __future__ import annotations

import argparse
import json
import os
import resource
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    build_architecture,
    build_optimizer_config,
    build_problem,
    config_hash,
    load_preset_or_path,
    resolve_config,
)
from .errors import ConfigError, DimensionMismatch, GpeError
from .estimators import random_quad_form
from .network import load_params
from .normalization import ZEstimate
from .optimizer import OptimizerConfig, train
from .reference import Grid, error_metrics, export_grid, solve_reference_cached
from .sampler import DomainBox

CSV_COLUMNS = [
    "epoch",
    "energy",
    "mu_bar",
    "residual",
    "kinetic",
    "potential",
    "interaction",
    "virial_ratio",
    "z_value",
    "z_stderr",
    "grad_norm",
    "tau",
    "lambda",
    "wall_ms",
    "pcg_iters",
    "pcg_rel_res",
    "precond_age",
    "acceptance",
    "step_scale",
]


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _thread_setup(resolved) -> int:
    n = resolved.get("threads")
    env = os.environ.get("GPE_THREADS")
    if env:
        n = int(env)
    if n:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=n)
        except ImportError:
            pass  # recorded in outputs either way
    return n or 0


def write_history_csv(path, history, chash):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# config_hash={chash}\n")
        f.write(",".join(CSV_COLUMNS) + "\n")
        for row in history:
            f.write(",".join(_fmt(row.get(col, "")) for col in CSV_COLUMNS) + "\n")


def run_experiment(resolved: dict, output_dir=None, epoch_callback=None, dump_walkers=False):
    """Train per the resolved config; returns (state, history, summary)."""
    chash = config_hash(resolved)
    threads = _thread_setup(resolved)
    out = Path(output_dir if output_dir is not None else resolved["output_dir"])
    out.mkdir(parents=True, exist_ok=True)

    spec, box = build_problem(resolved)
    arch = build_architecture(resolved)
    cfg = build_optimizer_config(resolved)

    persisted = dict(resolved)
    if spec.kind == "quad_form":
        persisted = json.loads(json.dumps(resolved))
        persisted["problem"]["matrix"] = spec.matrix.tolist()
        persisted["problem"]["condition_number"] = spec.cond
    (out / "resolved_config.json").write_text(json.dumps(persisted, indent=2) + "\n")

    t0 = time.perf_counter()
    state, history = train(arch, spec, box, cfg, output_dir=out, epoch_callback=epoch_callback)
    wall_s = time.perf_counter() - t0

    write_history_csv(out / "history.csv", history, chash)
    last = history[-1] if history else {}
    summary = {
        "config_hash": chash,
        "version": __version__,
        "threads": threads,
        "problem": resolved["problem"],
        "epochs_run": len(history),
        "final_energy": last.get("energy"),
        "final_mu_bar": last.get("mu_bar"),
        "final_residual": last.get("residual"),
        "final_virial_ratio": last.get("virial_ratio"),
        "z_value": state.z.value if state.z else None,
        "z_stderr": state.z.std_error if state.z else None,
        "z_ess": state.z.ess if state.z else None,
        "n_params": state.params.n_params,
        "wall_seconds": wall_s,
        "max_rss_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if dump_walkers:
        pos = state.ensemble.positions
        with open(out / "walkers.csv", "w", encoding="utf-8") as f:
            f.write(f"# config_hash={chash}\n")
            f.write("walker_id," + ",".join(f"r_{i + 1}" for i in range(pos.shape[1])) + "\n")
            for i, row_vals in enumerate(pos):
                f.write(f"{i}," + ",".join(_fmt(float(v)) for v in row_vals) + "\n")
    return state, history, summary


def _load_run(run_dir):
    run = Path(run_dir)
    resolved = resolve_config(json.loads((run / "resolved_config.json").read_text()))
    summary = json.loads((run / "summary.json").read_text())
    ckpt = run / "checkpoints" / "final.bin"
    if not ckpt.exists():
        raise FileNotFoundError(f"no final checkpoint under {run}")
    params = load_params(ckpt)
    z = ZEstimate(
        value=float(summary["z_value"]),
        std_error=float(summary.get("z_stderr") or 0.0),
        n_samples=max(int(summary.get("epochs_run", 2)), 2),
        ess=float(summary.get("z_ess") or 2.0),
    )
    return resolved, summary, params, z


def _reference_for(resolved, ref_cache, allow_3d=False):
    spec, box = build_problem(resolved)
    ref_cfg = resolved["reference"]
    grid = Grid(box.lower, box.upper, (int(ref_cfg["n"]),) * spec.dim)
    return spec, solve_reference_cached(
        spec,
        grid,
        tol=float(ref_cfg["tol"]),
        maxit=int(ref_cfg["maxit"]),
        cache_dir=ref_cache,
        allow_3d=allow_3d,
    )


def cmd_train(args) -> int:
    try:
        resolved = load_preset_or_path(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        _, history, summary = run_experiment(
            resolved, output_dir=args.output, dump_walkers=args.dump_walkers
        )
    except GpeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(summary, indent=2))
    return 0


def cmd_reference(args) -> int:
    try:
        resolved = load_preset_or_path(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.output or resolved["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        spec, ref = _reference_for(resolved, out / "ref_cache", allow_3d=args.allow_3d)
    except DimensionMismatch as exc:
        print(f"reference unavailable: {exc}", file=sys.stderr)
        return 4
    except GpeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    doc = {
        "config_hash": config_hash(resolved),
        "e_ref": ref.e_ref,
        "mu_ref": ref.mu_ref,
        "final_residual": ref.final_residual,
        "iterations": ref.iterations,
        "grid_n": list(ref.grid.n),
    }
    (out / "reference_summary.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps(doc, indent=2))
    return 0


def cmd_compare(args) -> int:
    try:
        resolved, summary, params, z = _load_run(args.run)
    except (OSError, KeyError, ConfigError) as exc:
        print(f"cannot load run: {exc}", file=sys.stderr)
        return 2
    if resolved["problem"]["dim"] > 2 and not args.allow_3d:
        print(
            f"no reference available for d={resolved['problem']['dim']} "
            "(the grid solver handles d <= 2; pass --allow-3d for small 3D grids)",
            file=sys.stderr,
        )
        return 4
    ref_cache = Path(args.ref_cache) if args.ref_cache else Path(args.run) / "ref_cache"
    try:
        spec, ref = _reference_for(resolved, ref_cache, allow_3d=args.allow_3d)
    except DimensionMismatch as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return 4
    eps_e, eps_mu, eps_rho = error_metrics(params, z, ref, spec)
    doc = {
        "config_hash": config_hash(resolved),
        "eps_E": eps_e,
        "eps_mu": eps_mu,
        "eps_rho": eps_rho,
        "e_ref": ref.e_ref,
        "mu_ref": ref.mu_ref,
        "grid_n": list(ref.grid.n),
    }
    (Path(args.run) / "compare.json").write_text(json.dumps(doc, indent=2) + "\n")
    csv_path = Path(args.run) / "compare.csv"
    fresh = not csv_path.exists()
    with open(csv_path, "a", encoding="utf-8") as f:
        if fresh:
            f.write(f"# config_hash={doc['config_hash']}\n")
            f.write("eps_E,eps_mu,eps_rho,e_ref,mu_ref,grid_n\n")
        f.write(
            f"{_fmt(eps_e)},{_fmt(eps_mu)},{_fmt(eps_rho)},{_fmt(ref.e_ref)},"
            f"{_fmt(ref.mu_ref)},{ref.grid.n[0]}\n"
        )
    print(json.dumps(doc, indent=2))
    return 0


def cmd_export(args) -> int:
    try:
        resolved, summary, params, z = _load_run(args.run)
    except (OSError, KeyError, ConfigError) as exc:
        print(f"cannot load run: {exc}", file=sys.stderr)
        return 2
    spec, box = build_problem(resolved)
    if params.arch.input_dim != box.dim:
        print("checkpoint dimension disagrees with config", file=sys.stderr)
        return 4
    grid = Grid(box.lower, box.upper, (args.grid,) * box.dim)
    out = Path(args.out) if args.out else Path(args.run) / f"field_{args.grid}.bin"
    export_grid(params, z, grid, out, beta=float(resolved["problem"]["beta"]))
    print(str(out))
    return 0


def _bench_scaling(out_dir: Path) -> int:
    """Fixed-budget runs over d = 2..6; time and peak memory per epoch."""
    rows = []
    for d in range(2, 7):
        resolved = resolve_config(
            {
                "seed": 100 + d,
                "problem": {"kind": "quad_form", "beta": 100.0, "dim": d, "box_half_width": 6.0, "matrix_seed": d},
                "architecture": {"n_fourier": 0, "hidden_layers": 5, "hidden_width": 50},
                "sampler": {"kind": "hmc", "n_walkers": 512, "burn_in_steps": 60, "steps_per_epoch": 2, "n_leapfrog": 5},
                "normalization": {"n_samples": 1024},
                "optimizer": {"mode": "ngd", "epochs": 4, "nystrom_rank": 32, "refresh_period": 10, "pcg_maxit": 40, "gram_dtype": "f32"},
            }
        )
        tracemalloc.start()
        _, history, _ = run_experiment(resolved, output_dir=out_dir / f"scaling_d{d}")
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        per_epoch = float(np.mean([r["wall_ms"] for r in history[1:]])) / 1e3
        rows.append((d, per_epoch, peak / 1e6))
        print(f"d={d}: {per_epoch:.2f} s/epoch, peak {peak / 1e6:.0f} MB")
    ds = np.array([r[0] for r in rows], dtype=float)
    ts = np.array([r[1] for r in rows])
    coef = np.polyfit(ds, ts, 1)
    fit = np.polyval(coef, ds)
    ss_res = float(np.sum((ts - fit) ** 2))
    ss_tot = float(np.sum((ts - ts.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    with open(out_dir / "scaling.csv", "w", encoding="utf-8") as f:
        f.write("# suite=scaling\n")
        f.write("d,time_per_epoch_s,peak_mem_mb\n")
        for d, t, m in rows:
            f.write(f"{d},{_fmt(t)},{_fmt(m)}\n")
        f.write(f"# linear_fit_r2={r2:.5f}\n")
    print(f"linear fit R^2 = {r2:.4f}")
    return 0


def _bench_ablation(out_dir: Path) -> int:
    """Explicit-G vs Block-Jacobi vs Nystrom solver cost on the 2D lattice.

    The full 5x50+Fourier network (P ~ 1.4e4) would need N P^2 ~ 7e11
    flops per dense assembly, so the ablation runs a reduced network where
    the explicit path is feasible and compares per-epoch solver wall time.
    """
    import1 = {
        "problem": {"kind": "lattice2d_a", "beta": 250.0, "box_half_width": 8.0},
        "architecture": {"n_fourier": 8, "fourier_scale": 1.0, "hidden_layers": 3, "hidden_width": 32},
        "sampler": {"n_walkers": 2000, "burn_in_steps": 100},
        "normalization": {"n_samples": 4000},
    }
    results = {}
    for style in ("explicit", "block_jacobi", "nystrom"):
        resolved = resolve_config(
            {
                **json.loads(json.dumps(import1)),
                "seed": 11,
                "optimizer": {
                    "mode": "ngd",
                    "epochs": 6,
                    "nystrom_rank": 64,
                    "refresh_period": 5,
                    "pcg_maxit": 80,
                    "gram_dtype": "f32",
                    "preconditioner": "nystrom" if style == "nystrom" else ("block_jacobi" if style == "block_jacobi" else "nystrom"),
                },
            }
        )
        if style == "explicit":
            t, energy = _explicit_solver_run(resolved, out_dir)
        else:
            _, history, _ = run_experiment(resolved, output_dir=out_dir / f"ablation_{style}")
            t = float(np.mean([r["wall_ms"] for r in history[1:]])) / 1e3
            energy = history[-1]["energy"]
        results[style] = t
        print(f"{style}: {t:.2f} s/epoch (E={energy:.3f})")
    with open(out_dir / "ablation.csv", "w", encoding="utf-8") as f:
        f.write("# suite=ablation\n")
        f.write("solver,time_per_epoch_s\n")
        for k, v in results.items():
            f.write(f"{k},{_fmt(v)}\n")
    return 0


def _explicit_solver_run(resolved, out_dir):
    """NGD epochs solving (G + lam I) with a dense factorization."""
    from .estimators import compute_local_stats, grad_loss, residual as residual_of
    from .metric import assemble_dense_gram, build_gram_context
    from .network import eval_bundle
    from .optimizer import init_state, step_size, damping

    spec, box = build_problem(resolved)
    arch = build_architecture(resolved)
    cfg = build_optimizer_config(resolved)
    state = init_state(arch, spec, box, cfg)
    from .optimizer import _epoch_common
    import scipy.linalg

    times = []
    energy = np.nan
    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        bundle, stats, res, g, row, _ = _epoch_common(state, cfg, need_mixed=True)
        ctx = build_gram_context(bundle, state.spec, state.z, dtype=cfg.store_dtype)
        gmat = assemble_dense_gram(ctx, guard=16384)
        gmat[np.diag_indices_from(gmat)] += state.lam
        delta = scipy.linalg.solve(gmat, -g, assume_a="pos")
        state.params = state.params.with_theta(state.params.theta + state.tau * delta)
        state.tau = step_size(res)
        state.lam = damping(res)
        state.epoch += 1
        energy = stats.energy
        times.append(time.perf_counter() - t0)
    return float(np.mean(times[1:])), energy


def cmd_bench(args) -> int:
    out = Path(args.output or f"bench_{args.suite}")
    out.mkdir(parents=True, exist_ok=True)
    if args.suite == "scaling":
        return _bench_scaling(out)
    if args.suite == "ablation":
        return _bench_ablation(out)
    print(f"unknown suite {args.suite!r}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gpe-ngd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gpe-ngd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    p_train.add_argument("-c", "--config", required=True, help="config path or preset name")
    p_train.add_argument("-o", "--output", default=None, help="override output directory")
    p_train.add_argument("--dump-walkers", action="store_true", help="write final walker positions")
    p_train.set_defaults(func=cmd_train)

    p_ref = sub.add_parser("reference", help="build the FD reference solution")
    p_ref.add_argument("-c", "--config", required=True)
    p_ref.add_argument("-o", "--output", default=None)
    p_ref.add_argument("--allow-3d", action="store_true")
    p_ref.set_defaults(func=cmd_reference)

    p_cmp = sub.add_parser("compare", help="error metrics of a run against the reference")
    p_cmp.add_argument("--run", required=True, help="run directory")
    p_cmp.add_argument("--ref-cache", default=None)
    p_cmp.add_argument("--allow-3d", action="store_true")
    p_cmp.set_defaults(func=cmd_compare)

    p_exp = sub.add_parser("export", help="export the normalized field on a grid")
    p_exp.add_argument("--run", required=True)
    p_exp.add_argument("--grid", type=int, required=True)
    p_exp.add_argument("--out", default=None)
    p_exp.set_defaults(func=cmd_export)

    p_bench = sub.add_parser("bench", help="scaling / ablation suites")
    p_bench.add_argument("--suite", required=True, choices=("scaling", "ablation"))
    p_bench.add_argument("-o", "--output", default=None)
    p_bench.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
