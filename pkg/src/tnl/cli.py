"""Command line entry point: ``tnl run``, ``tnl validate``, ``tnl checks``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import spectral as sp
from .checks import SUITES, dual_suite, noise_suite, run_suite
from .cltstats import ExperimentError, run_rate_experiment, wasserstein_coupling_bound
from .config import ConfigError, ExperimentConfig, load_config
from .detpde import DriftSpec, solve_skeleton_transport
from .ldp import RateProblem, finite_difference_check, minimize_rate, planted_control, tail_probability_mc
from .noise import build_noise_model
from .spde import StochasticRunConfig, run_coupled

log = logging.getLogger("tnl")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

_RATE = {
    "lln_transport": ("transport_LLN", "delta", ("transport_LLN", "delta")),
    "clt_transport": ("transport_CLT", "s", ("transport_CLT", "delta")),
    "lln_euler": ("euler_LLN", "delta", None),
    "clt_euler": ("euler_CLT", "s", ("euler_CLT", "beta")),
}


def initial_field(cfg: ExperimentConfig, grid: sp.TorusGrid) -> sp.SpectralField:
    """Initial condition preset, normalized to unit L2 norm for the random band."""
    if cfg.init == "taylor_green":
        return sp.taylor_green(grid)
    if cfg.init == "file":
        arr = np.load(cfg.init_file)
        if arr.shape != (grid.N, grid.N):
            raise ValueError(f"initial field file holds shape {arr.shape}, expected {(grid.N, grid.N)}")
        if np.iscomplexobj(arr):
            return sp.SpectralField(grid, arr)
        return sp.SpectralField.from_physical(grid, arr)
    f = sp.SpectralField.random(grid, np.random.default_rng(cfg.init_seed), cfg.init_k_lo, cfg.init_k_hi, 1.0)
    return f * (1.0 / sp.sobolev_norm(f, 0.0))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _run_rate(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    kind, s_field, expo = _RATE[cfg.kind]
    s = getattr(cfg, s_field)
    grid = sp.get_grid(cfg.N)
    init = initial_field(cfg, grid)
    b = DriftSpec(cfg.drift, cfg.drift_amplitude) if cfg.kind.endswith("transport") else None
    exponent = (expo[0], getattr(cfg, expo[1])) if expo else None
    path_rows = []
    extra = {}

    def on_run(n, cp):
        key = cp.meta["key"]
        for p in range(cp.errors[key].shape[1]):
            for t, val in zip(cp.times, cp.errors[key][:, p]):
                path_rows.append([p, repr(float(t)), f"{key}[n={n}]", repr(float(val))])
        if cfg.kind == "clt_euler":
            extra.setdefault("wasserstein_bound", {})[str(n)] = wasserstein_coupling_bound((cp, key))

    est = run_rate_experiment(kind, cfg.alpha, cfg.n_list, cfg.paths, grid, cfg.T, s, init, dt=cfg.dt, b=b,
                              seed=cfg.seed, window=cfg.window, stride=cfg.stride, exponent=exponent,
                              workers=threads, on_run=on_run)
    est.meta.update(extra)
    est.to_json(out / "estimate.json")
    est.to_csv(out / "estimate.csv")
    est.to_gnuplot(out / "estimate.dat")
    _write_csv(out / "paths.csv", ["path_id", "t", "quantity_name", "value"], path_rows)
    return {"aborted": {str(r.n): r.aborted for r in est.rows}, "slope": est.slope}


def _run_ldp_minimize(cfg: ExperimentConfig, out: Path) -> dict:
    grid = sp.get_grid(cfg.N)
    f0 = initial_field(cfg, grid)
    b = DriftSpec(cfg.drift, cfg.drift_amplitude)
    base = RateProblem(f0, b, f0, cfg.T, cfg.dt, alpha=cfg.alpha, pieces=cfg.pieces)
    cov = sp.SpectralField.random(grid, np.random.default_rng(cfg.seed), 1, 3, 1.0)
    planted = planted_control(base, cov, cfg.control_scale)
    target = solve_skeleton_transport(f0, b, planted, cfg.T, cfg.dt).final
    problem = RateProblem(f0, b, target, cfg.T, cfg.dt, alpha=cfg.alpha, lam=cfg.lam, delta=cfg.delta,
                          pieces=cfg.pieces, max_iter=cfg.max_iter)
    fd = finite_difference_check(problem, planted * 0.5, seed=cfg.seed)
    g_star, upper, report = minimize_rate(problem)
    report.to_csv(out / "trace.csv")
    planted.to_csv(out / "control_planted.csv")
    g_star.to_csv(out / "control_recovered.csv")
    obj = np.array(report.objectives)
    result = {
        "planted_cost": planted.cost(), "upper_bound": upper, "ratio": upper / planted.cost(),
        "final_mismatch": report.mismatches[-1], "status": report.status, "iterations": report.iterations,
        "fd_max_rel_error": fd["max_rel_error"], "monotone": bool(np.all(np.diff(obj) <= 0)),
    }
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if fd["max_rel_error"] > 1e-4 or not result["monotone"]:
        raise ExperimentError(f"optimizer diagnostics failed: {result}")
    return {}


def _run_ldp_tail(cfg: ExperimentConfig, out: Path) -> dict:
    grid = sp.get_grid(cfg.N)
    f0 = initial_field(cfg, grid)
    b = DriftSpec(cfg.drift, cfg.drift_amplitude)
    models = [build_noise_model(cfg.alpha, n, cfg.window) for n in cfg.n_list]
    R = cfg.R
    if R is None:
        R = pilot_threshold(f0, b, models[0], cfg)
        log.info("tail threshold from pilot run: R = %.6g", R)
    rep = tail_probability_mc(f0, b, models, R, cfg.delta, cfg.paths, cfg.T, cfg.dt, seed=cfg.seed,
                              stride=cfg.stride)
    cols = ["n", "epsilon", "hits", "paths", "p_hat", "ci_low", "ci_high", "eps_log_p", "degenerate"]
    _write_csv(out / "tail.csv", cols, [[r[c] if isinstance(r[c], (int, bool)) else repr(float(r[c]))
                                         for c in cols] for r in rep.rows])
    return {"R": R, "degenerate": [r["n"] for r in rep.rows if r["degenerate"]]}


def pilot_threshold(f0, b, model, cfg: ExperimentConfig, paths: int = 200) -> float:
    """Median sup-deviation at the coarsest cutoff from an independent pilot batch."""
    scfg = StochasticRunConfig(f0.grid, cfg.dt, cfg.T, model, seed=cfg.seed + 1_000_003, paths=paths,
                               stride=cfg.stride)
    cp = run_coupled("transport", scfg, f0, b, s_values=(), delta=cfg.delta, keep="none")
    return float(np.median(np.sqrt(cp.sup_error("lln"))))


def _run_checks(suite, out: Path) -> dict:
    res = suite()
    _write_csv(out / "checks.csv", ["name", "value", "threshold", "passed"],
               [[r.name, repr(float(r.value)), repr(float(r.threshold)), r.passed] for r in res])
    for r in res:
        log.info(r.line())
    failed = [r.name for r in res if not r.passed]
    if failed:
        raise ExperimentError(f"failed checks: {failed}")
    return {}


def execute(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    if cfg.kind in _RATE:
        return _run_rate(cfg, out, threads)
    if cfg.kind == "ldp_minimize":
        return _run_ldp_minimize(cfg, out)
    if cfg.kind == "ldp_tail":
        return _run_ldp_tail(cfg, out)
    if cfg.kind == "dual_checks":
        return _run_checks(dual_suite, out)
    return _run_checks(noise_suite, out)


def _metadata(cfg: ExperimentConfig, wall: float, status: str, summary: dict) -> dict:
    return {
        "versions": {"tnl": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "seed": cfg.seed, "kind": cfg.kind, "wall_time": wall, "status": status, **summary,
    }


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    env_seed = os.environ.get("TNL_SEED")
    if env_seed is not None:
        try:
            cfg = cfg.with_overrides(seed=int(env_seed))
        except (ValueError, ConfigError) as exc:
            print(f"TNL_SEED: {exc}", file=sys.stderr)
            return EXIT_USAGE
    out = Path(args.out or cfg.output or f"runs/{cfg.kind}")
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"refusing to write into non-empty directory {out} (use --force)", file=sys.stderr)
        return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    threads = args.threads or os.cpu_count() or 1
    t0 = time.perf_counter()
    status, code, summary = "ok", EXIT_OK, {}
    try:
        summary = execute(cfg, out, threads)
    except ExperimentError as exc:
        status, code = f"failed: {exc}", EXIT_FAILED
        log.error("%s", exc)
    meta = _metadata(cfg, time.perf_counter() - t0, status, summary)
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return code


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FAILED
    print(cfg.to_json())
    return EXIT_OK


def cmd_checks(args) -> int:
    results, wall = run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed in {wall:.1f}s")
    return EXIT_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tnl", description="Transport-noise SPDE simulation lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment described by a JSON config")
    r.add_argument("config")
    r.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    r.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a config and print it with defaults filled")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    c = sub.add_parser("checks", help="run a standalone invariant suite")
    c.add_argument("suite", choices=sorted(SUITES))
    c.set_defaults(func=cmd_checks)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
