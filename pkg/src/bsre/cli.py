"""Command line front end.

Subcommands: solve-lyapunov, solve-riccati, simulate, verify, oracle-compare.
All read a JSON configuration, write delimited artifacts (and figures unless
suppressed) into the output directory, and print the written paths.  Errors
leave a JSON object {"error": kind, "message": ...} on stderr; exit status is
0 for success, 1 for failed verification or comparison, 2 for configuration
and domain errors, 3 for solver-level failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .control import closed_loop
from .errors import BsreError, InvalidConfigurationError
from .lyapunov import lyapunov_representation_solve, picard_solve
from .report import write_solution_report, write_trajectory_report, write_verify_report
from .riccati import diagonal_oracle, riccati_solve
from .verify import run_verification

_CONFIG_EXIT = {"invalid-configuration": 2, "domain": 2}


def _common(sub):
    sub.add_argument("--config", required=True, help="path to a JSON experiment file")
    sub.add_argument("--output-dir", default="out", help="directory for artifacts")
    sub.add_argument("--seed", type=int, default=None, help="override the solver seed")
    sub.add_argument("--workers", type=int, default=None, help="override the worker count")
    sub.add_argument("--name", default=None, help="override the artifact base name")
    sub.add_argument(
        "--no-figures", action="store_true", help="skip figure rendering"
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bsre",
        description="backward stochastic Lyapunov/Riccati solver at spectral truncation",
    )
    subs = p.add_subparsers(dest="command", required=True)

    s = subs.add_parser("solve-lyapunov", help="solve the linear backward equation")
    _common(s)
    s.add_argument(
        "--backend",
        choices=["auto", "deterministic-exact", "monte-carlo", "picard"],
        default=None,
        help="override the configured backend",
    )
    s.add_argument("--n-paths", type=int, default=None, help="override the path count")

    s = subs.add_parser("solve-riccati", help="solve the quadratic backward equation")
    _common(s)
    s.add_argument("--n-paths", type=int, default=None, help="override the path count")

    s = subs.add_parser("simulate", help="closed-loop run under the synthesized feedback")
    _common(s)
    s.add_argument("--n-paths", type=int, default=None, help="override the simulation paths")

    s = subs.add_parser("verify", help="run the verification suite for the instance")
    _common(s)
    s.add_argument("--quick", action="store_true", help="smaller ensembles, fewer probes")

    s = subs.add_parser("oracle-compare", help="per-mode comparison against the adaptive oracle")
    _common(s)
    s.add_argument("--tol", type=float, default=1e-4, help="acceptance threshold")
    return p


def _solve_linear(cfg: ExperimentConfig, args):
    backend = args.backend if getattr(args, "backend", None) else cfg.backend
    opts = cfg.solver_options(seed=args.seed, workers=args.workers,
                              n_paths=getattr(args, "n_paths", None))
    if backend == "picard":
        return picard_solve(cfg.model, cfg.grid, opts)
    return lyapunov_representation_solve(cfg.model, cfg.grid, backend=backend, options=opts)


def _solve_quadratic(cfg: ExperimentConfig, args):
    rc = cfg.riccati_config(seed=args.seed, workers=args.workers,
                            n_paths=getattr(args, "n_paths", None))
    return riccati_solve(cfg.model, cfg.grid, rc)


def _solve_for(cfg: ExperimentConfig, args):
    if cfg.kind == "riccati":
        return _solve_quadratic(cfg, args)
    return _solve_linear(cfg, args)


def _figures(cfg: ExperimentConfig, args) -> bool:
    if args.no_figures:
        return False
    return bool(cfg.report.get("figures", True))


def _print_written(written: dict):
    for key in sorted(written):
        val = written[key]
        if isinstance(val, str):
            print(f"wrote {val}")


def _cmd_solve_lyapunov(args) -> int:
    cfg = load_config(args.config)
    if cfg.kind == "riccati":
        raise InvalidConfigurationError(
            "configuration requests the quadratic solver; use solve-riccati"
        )
    sol = _solve_linear(cfg, args)
    name = args.name or cfg.name
    written = write_solution_report(sol, args.output_dir, name, figures=_figures(cfg, args))
    _print_written(written)
    print(f"P(0) trace {np.trace(sol.P0().entries):.12g} ({sol.meta['backend']})")
    return 0


def _cmd_solve_riccati(args) -> int:
    cfg = load_config(args.config)
    if cfg.kind != "riccati":
        raise InvalidConfigurationError(
            "configuration requests the linear solver; use solve-lyapunov"
        )
    sol = _solve_quadratic(cfg, args)
    name = args.name or cfg.name
    written = write_solution_report(sol, args.output_dir, name, figures=_figures(cfg, args))
    _print_written(written)
    print(f"P(0) trace {np.trace(sol.P0().entries):.12g} (ball max {sol.meta['ball_max']:.6g} "
          f"of r {sol.meta['r']:.6g})")
    return 0


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sol = _solve_for(cfg, args)
    name = args.name or cfg.name
    x = cfg.control_x()
    n_paths = args.n_paths or cfg.control.get("n_paths", 2000)
    seed = args.seed if args.seed is not None else cfg.control.get("seed", 0)
    run = closed_loop(sol, x, n_paths=n_paths, seed=seed,
                      store=cfg.control.get("store", 8))
    figs = _figures(cfg, args)
    written = write_solution_report(sol, args.output_dir, name, figures=figs)
    written.update(write_trajectory_report(run, cfg.grid, args.output_dir, name, figures=figs))
    _print_written(written)
    print(f"ensemble cost {run.mean_cost:.9g} (se {run.se_cost:.3g}, "
          f"value {sol.value_at(x):.9g})")
    return 0


def _cmd_verify(args) -> int:
    cfg = load_config(args.config)
    checks = run_verification(cfg, seed=args.seed, workers=args.workers, quick=args.quick)
    name = args.name or cfg.name
    written = write_verify_report(checks, args.output_dir, name)
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}")
    n_pass = sum(1 for c in checks if c["passed"])
    print(f"PASSED {n_pass}/{len(checks)}")
    _print_written(written)
    return 0 if written["all_passed"] else 1


def _cmd_oracle_compare(args) -> int:
    cfg = load_config(args.config)
    model, grid = cfg.model, cfg.grid
    if type(model).__name__ != "ConstantDiagonal":
        raise InvalidConfigurationError(
            "oracle comparison needs per-mode constant coefficients"
        )
    sol = _solve_for(cfg, args)
    P = sol.P.values() if sol.P.deterministic else np.stack(
        [sol.P.eval_at(i, 0.0) for i in range(grid.L + 1)]
    )
    b_eff = model.b if cfg.kind == "riccati" else np.zeros_like(model.b)
    rows = []
    worst = 0.0
    for k, lam in enumerate(model.basis.lambdas):
        oc = diagonal_oracle(
            float(lam), float(model.c[k]), float(b_eff[k]),
            float(model.s[k]), float(model.m[k]), grid.T, grid.times,
        )
        err = np.abs(P[:, k, k] - oc)
        worst = max(worst, float(err.max()))
        rows.append((k, oc, P[:, k, k]))
    name = args.name or cfg.name
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}_oracle.csv"
    with csv_path.open("w") as f:
        f.write("t,mode,solved,oracle,abs_err\n")
        for k, oc, got in rows:
            for i in range(grid.L + 1):
                f.write(
                    f"{grid.times[i]:.17g},{k + 1},{got[i]:.17g},{oc[i]:.17g},"
                    f"{abs(got[i] - oc[i]):.17g}\n"
                )
    summary = {
        "max_abs_err": worst,
        "tol": args.tol,
        "passed": worst <= args.tol,
        "modes": model.basis.N,
        "solver": sol.meta["backend"],
    }
    js_path = out / f"{name}_oracle.json"
    js_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"wrote {csv_path}")
    print(f"wrote {js_path}")
    print(f"max |solved - oracle| = {worst:.3e} (tol {args.tol:g})")
    return 0 if summary["passed"] else 1


_COMMANDS = {
    "solve-lyapunov": _cmd_solve_lyapunov,
    "solve-riccati": _cmd_solve_riccati,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
    "oracle-compare": _cmd_oracle_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except BsreError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return _CONFIG_EXIT.get(exc.kind, 3)


if __name__ == "__main__":
    sys.exit(main())
