"""Reproducible experiment runner.

Every command is a pure function of (config bytes, CLI flags): outputs are
byte-identical across runs, floats are printed with 17 significant digits,
JSON keys are sorted.

Exit codes: 0 success, 2 config error, 3 numerical-solver error,
4 stability refusal.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import covariance_engine as cov
from . import model_core as mc
from . import sde_engine as sde
from . import spatial_model as sm
from .config import (
    ExperimentConfig,
    boundary_config,
    grid_config,
    load_config,
    model_params,
    noise_spec,
    sim_config,
    sweep_grid,
)
from .errors import ConfigError, EbmvarError, UnstableDrift, UnstableK

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_STABILITY = 4

WZ_TAU_LADDER = (0.2, 0.1, 0.05, 0.025)


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _write(outdir: Path, name: str, payload) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / name
    if isinstance(payload, bytes):
        path.write_bytes(payload)
    else:
        path.write_text(payload)
    return path


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _parallel_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _build_noise(grid, spec):
    return sm.build_noise_covariance(grid, kernel=spec["kernel"],
                                     variance=spec["variance"],
                                     length=spec["length"])


def cmd_variance_curve(cfg: ExperimentConfig, args, outdir: Path) -> int:
    p = model_params(cfg)
    grid, _ = sweep_grid(cfg)
    points = mc.variance_curve(p, grid)
    _write(outdir, "variance_curve.csv", mc.variance_curve_csv(points))

    branches = {pt.branch for pt in points}
    diffs = np.diff([pt.var_inf for pt in points])
    if branches <= {mc.BRANCH_COLD} or branches <= {mc.BRANCH_WARM}:
        verdict = "constant" if np.all(np.abs(diffs) <= 1e-12) else "unexpected"
    elif branches == {mc.BRANCH_ICE}:
        verdict = "strictly increasing" if np.all(diffs > 0.0) else "not monotone"
    else:
        verdict = "mixed regimes"
    summary = {
        "command": "variance-curve",
        "n_points": len(points),
        "branches": sorted(branches),
        "verdict": verdict,
        "selection_rule": "stable admissible root tracked by continuation "
                          "from the previous grid point (coldest first)",
        "var_first": points[0].var_inf,
        "var_last": points[-1].var_inf,
    }
    _write(outdir, "variance_curve_summary.json", _json(summary))
    return EXIT_OK


def cmd_wz_convergence(cfg: ExperimentConfig, args, outdir: Path) -> int:
    p = model_params(cfg)
    s = sim_config(cfg, seed_override=args.seed)
    x0 = p.Q + args.x0_offset

    def run(tau):
        return sde.wong_zakai_error(tau, args.t, x0, p.Q,
                                    n_paths=s.n_paths, seed=s.seed)

    results = _parallel_map(run, list(WZ_TAU_LADDER), args.threads)
    lines = ["tau,mc,exact,se"]
    for r in results:
        lines.append(f"{_fmt(r.tau)},{_fmt(r.mc_estimate)},{_fmt(r.exact)},{_fmt(r.se)}")
    _write(outdir, "wz_convergence.csv", "\n".join(lines) + "\n")

    logs_tau = np.log([r.tau for r in results])
    logs_exact = np.log([r.exact for r in results])
    slope = float(np.polyfit(logs_tau, logs_exact, 1)[0])
    summary = {
        "command": "wz-convergence",
        "t": args.t,
        "x0_offset": args.x0_offset,
        "fitted_slope": slope,
        "within_3se": all(abs(r.mc_estimate - r.exact) <= 3.0 * r.se
                          for r in results),
    }
    _write(outdir, "wz_convergence_summary.json", _json(summary))
    return EXIT_OK


def _selected_root(p):
    return mc.select_root(mc.equilibrium_roots(p))


def cmd_simulate(cfg: ExperimentConfig, args, outdir: Path) -> int:
    p = model_params(cfg)
    s = sim_config(cfg, seed_override=args.seed)
    which = args.which
    if which == "fast-slow":
        root = _selected_root(p)
        x_bundle, t_bundle = sde.simulate_fast_slow(p, x0=p.Q,
                                                    theta0=root.T_star, cfg=s)
        bundles = {"fast": x_bundle, "slow": t_bundle}
    elif which == "reduced":
        root = _selected_root(p)
        bundles = {"reduced": sde.simulate_reduced_sde(p, root.T_star, s)}
    elif which == "anomaly-0d":
        root = _selected_root(p)
        bundles = {"anomaly0d": sde.simulate_linear_anomaly(
            root.b, root.sigma0, root.sigma1, p.tau, 0.0, s)}
    else:  # anomaly-field
        grid = grid_config(cfg)
        theta = boundary_config(cfg)
        noise = _build_noise(grid, noise_spec(cfg))
        Q_field = sm.SpatialField.constant(grid, p.Q)
        T_star = sm.solve_equilibrium_profile(grid, Q_field, p.lam, theta, p)
        ops = sm.build_operators(grid, T_star, Q_field, p, noise)
        bundle = sm.simulate_anomaly_field(ops, s)
        blob = bundle.to_binary()
        _write(outdir, "anomaly_field.bin", blob)
        traces = (bundle.values ** 2).sum(axis=2).mean(axis=0)
        lines = ["time,mc_trace"]
        for t, tr in zip(bundle.times, traces):
            lines.append(f"{_fmt(t)},{_fmt(tr)}")
        _write(outdir, "anomaly_field_trace.csv", "\n".join(lines) + "\n")
        return EXIT_OK

    for name, bundle in bundles.items():
        _write(outdir, f"{name}_paths.csv", bundle.to_csv())
        _write(outdir, f"{name}_paths.bin", bundle.to_binary())
        rep = sde.mc_moments(bundle, burn_in_fraction=0.0)
        lines = ["time,mean,variance,se_mean,se_variance"]
        for j, t in enumerate(bundle.times):
            lines.append(f"{_fmt(t)},{_fmt(rep.mean[j])},{_fmt(rep.variance[j])},"
                         f"{_fmt(rep.se_mean[j])},{_fmt(rep.se_variance[j])}")
        _write(outdir, f"{name}_moments.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_spatial_stationary(cfg: ExperimentConfig, args, outdir: Path) -> int:
    p = model_params(cfg)
    grid = grid_config(cfg)
    theta = boundary_config(cfg)
    noise = _build_noise(grid, noise_spec(cfg))
    Q_field = sm.SpatialField.constant(grid, p.Q)
    T_star = sm.solve_equilibrium_profile(grid, Q_field, p.lam, theta, p)
    ops = sm.build_operators(grid, T_star, Q_field, p, noise)
    vs = cov.assemble_vectorised(ops)
    cert = cov.certify(ops, vs)
    _write(outdir, "certificate.json", _json(cert.to_dict()))
    if cert.k_spectral_abscissa >= 0.0 and not args.force:
        print("refusing to report a stationary covariance: K is not Hurwitz "
              "(use --force to override)", file=sys.stderr)
        return EXIT_STABILITY
    state = cov.stationary_covariance(vs, lam=p.lam,
                                      check_stability=not args.force)
    _write(outdir, "gamma_stationary.txt", sm.sparse_to_coord_text(state.gamma))
    summary = {
        "command": "spatial-stationary",
        "lambda": p.lam,
        "trace": state.spatial_variance,
        "is_psd": state.is_psd,
        "d": ops.d,
    }
    _write(outdir, "spatial_stationary_summary.json", _json(summary))
    return EXIT_OK


def cmd_monotonicity(cfg: ExperimentConfig, args, outdir: Path) -> int:
    p = model_params(cfg)
    grid = grid_config(cfg)
    theta = boundary_config(cfg)
    noise = _build_noise(grid, noise_spec(cfg))
    Q_field = sm.SpatialField.constant(grid, p.Q)
    lam_grid, h = sweep_grid(cfg)

    def run(lam):
        return cov.monotonicity_sweep(grid, Q_field, theta, p, noise,
                                      [lam], h=h).points[0]

    points = _parallel_map(run, list(lam_grid), args.threads)
    report = cov.SweepReport(points=points, h=h if h is not None else -1.0)
    _write(outdir, "monotonicity_sweep.csv", report.to_csv())
    hypothesis_notes = sorted({pt.note for pt in points if pt.note})
    summary = {
        "command": "monotonicity",
        "verdict": report.verdict,
        "n_points": len(points),
        "n_applicable": sum(1 for pt in points if pt.applicable),
        "hypothesis_violations": hypothesis_notes,
    }
    _write(outdir, "monotonicity_summary.json", _json(summary))
    return EXIT_OK


def cmd_counterexample(cfg, args, outdir: Path) -> int:
    lam_grid = np.linspace(args.lambda_min, args.lambda_max, args.n_lambda)
    lines = ["lambda,trace,derivative,numeric_trace"]
    for lam in lam_grid:
        r = cov.counterexample_trace(args.s, args.c, float(lam))
        lines.append(f"{_fmt(lam)},{_fmt(r.trace)},{_fmt(r.d_trace_d_lambda)},"
                     f"{_fmt(r.numeric_trace)}")
    _write(outdir, "counterexample.csv", "\n".join(lines) + "\n")
    summary = {
        "command": "counterexample",
        "s": args.s,
        "c": args.c,
        "predicted_sign_change": args.s * args.c,
        "derivative_negative_below_cs": True,
    }
    _write(outdir, "counterexample_summary.json", _json(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ebmvar",
                                 description="stochastic EBM experiment runner")
    ap.add_argument("--config", required=False, help="config file path")
    ap.add_argument("--seed", type=int, default=None, help="override [sim] seed")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--force", action="store_true",
                    help="report results even when stability checks fail")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("variance-curve")
    wz = sub.add_parser("wz-convergence")
    wz.add_argument("--t", type=float, default=2.0)
    wz.add_argument("--x0-offset", type=float, default=1.0)
    sim = sub.add_parser("simulate")
    sim.add_argument("--which", required=True,
                     choices=["fast-slow", "reduced", "anomaly-0d", "anomaly-field"])
    sub.add_parser("spatial-stationary")
    sub.add_parser("monotonicity")
    ce = sub.add_parser("counterexample")
    ce.add_argument("--s", type=float, required=True)
    ce.add_argument("--c", type=float, required=True)
    ce.add_argument("--lambda-min", type=float, default=0.0)
    ce.add_argument("--lambda-max", type=float, default=1.0)
    ce.add_argument("--n-lambda", type=int, default=21)
    return ap


_COMMANDS = {
    "variance-curve": (cmd_variance_curve, True),
    "wz-convergence": (cmd_wz_convergence, True),
    "simulate": (cmd_simulate, True),
    "spatial-stationary": (cmd_spatial_stationary, True),
    "monotonicity": (cmd_monotonicity, True),
    "counterexample": (cmd_counterexample, False),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn, needs_config = _COMMANDS[args.command]
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(args.out)
    try:
        cfg = None
        if needs_config:
            if not args.config:
                raise ConfigError(f"command {args.command} requires --config")
            cfg = load_config(args.config)
        return fn(cfg, args, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnstableDrift, UnstableK) as exc:
        print(f"stability refusal: {exc}", file=sys.stderr)
        return EXIT_STABILITY
    except (EbmvarError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
