"""Verification suite for a configured instance.

Each check returns a PASS/FAIL row with a one-line detail; the suite never
raises for a failed property, only for broken configurations.  Checks cover
the structural hypotheses (bounds, positivity, smoothing, regularizers), the
solve itself (symmetry, datum, positivity, backend agreement, contraction,
energy audit, martingale consistency) and the control layer (value identity,
suboptimality, completion of squares, exact scalings, determinism of
artifacts and of the worker split).
"""

from __future__ import annotations

import filecmp
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .coefficients import validate_model
from .config import ExperimentConfig
from .control import closed_loop, completion_of_squares, suboptimality_probe, value_check
from .errors import BsreError
from .lyapunov import (
    BackwardSolution,
    apriori_audit,
    lyapunov_representation_solve,
    picard_solve,
)
from .processes import batched_opH
from .riccati import diagonal_oracle, riccati_solve
from .spectral import jn_factors, smoothing_audit

__all__ = ["run_verification"]


def _row(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def _guard(name: str, fn) -> dict:
    try:
        return fn()
    except BsreError as exc:
        return _row(name, False, f"{exc.kind}: {exc}")
    except Exception as exc:  # pragma: no cover - diagnostic fallback
        return _row(name, False, f"unexpected {type(exc).__name__}: {exc}")


def run_verification(
    cfg: ExperimentConfig,
    seed: int | None = None,
    workers: int | None = None,
    quick: bool = False,
) -> list[dict]:
    model, grid = cfg.model, cfg.grid
    checks: list[dict] = []
    info = validate_model(model, grid)
    riccati_kind = cfg.kind == "riccati"

    checks.append(_check_hypotheses(info, riccati_kind))
    checks.append(_check_bounds(info))
    checks.append(_check_smoothing(model, grid))
    checks.append(_check_regularizers(model))

    solver_seed = seed if seed is not None else cfg.solver.get("seed", 0)
    n_paths = cfg.solver.get("n_paths", 2000)
    if quick:
        n_paths = min(n_paths, 1000)
    probe_paths = 1000 if quick else 2000

    state = {}
    checks.append(_guard("solve-primary", lambda: _check_solve(
        cfg, state, solver_seed, n_paths, workers)))
    sol = state.get("solution")
    if sol is None:
        checks.append(_row("suite-aborted", False, "primary solve failed; later checks skipped"))
        return checks

    checks.append(_guard("solution-symmetric", lambda: _check_symmetry(sol)))
    checks.append(_guard("final-datum", lambda: _check_datum(sol)))
    checks.append(_guard("solution-psd", lambda: _check_psd(sol, info)))
    checks.append(_guard("backend-agreement", lambda: _check_agreement(
        cfg, sol, state, solver_seed, n_paths)))
    checks.append(_guard("window-contraction", lambda: _check_contraction(state)))
    checks.append(_guard("energy-audit", lambda: _check_energy(sol, model)))
    checks.append(_guard("martingale-consistency", lambda: _check_q(sol)))

    x = cfg.control_x()
    if info["A3"]:
        checks.append(_guard("value-identity", lambda: _check_value(
            sol, x, riccati_kind, probe_paths, solver_seed)))
        checks.append(_guard("suboptimality", lambda: _check_subopt(
            sol, x, riccati_kind, probe_paths, solver_seed, quick)))
        checks.append(_guard("completion-of-squares", lambda: _check_cos(
            sol, x, riccati_kind, probe_paths, solver_seed)))
        checks.append(_guard("scaling-exactness", lambda: _check_scaling(sol, x, solver_seed)))
        checks.append(_guard("simulate-determinism", lambda: _check_sim_det(sol, x, solver_seed)))
    else:
        skip = "skipped: quadratic cost needs positive source and datum"
        for nm in ("value-identity", "suboptimality", "completion-of-squares",
                   "scaling-exactness", "simulate-determinism"):
            checks.append(_row(nm, True, skip))
    checks.append(_guard("worker-determinism", lambda: _check_workers(
        cfg, sol, solver_seed, n_paths)))
    checks.append(_guard("report-determinism", lambda: _check_report(sol)))
    return checks


def _check_hypotheses(info: dict, riccati_kind: bool) -> dict:
    if riccati_kind:
        ok = info["A3"]
        need = "positive bounded data"
    else:
        ok = info["A3"] or info["A3_prime"]
        need = "positive bounded data or symmetric K-integrable source"
    notes = "; ".join(info["messages"]) if info["messages"] else "hypotheses hold at probes"
    return _row("model-hypotheses", ok, f"requires {need}; {notes}")


def _check_bounds(info: dict) -> dict:
    rows = []
    ok = True
    for key in ("C", "B", "S"):
        declared = info["bounds"].get(f"M_{key}")
        observed = info["observed"].get(f"sup_opH_{key}")
        if declared is None or observed is None:
            continue
        good = observed <= declared + 1e-9
        ok = ok and good
        rows.append(f"{key}: {observed:.4g} <= {declared:.4g}")
    return _row("declared-bounds", ok, "; ".join(rows))


def _check_smoothing(model, grid) -> dict:
    t_grid = np.geomspace(grid.h / 4, grid.T, 40)
    audit = smoothing_audit(model.basis, t_grid)
    return _row(
        "smoothing-audit",
        audit["passed"],
        f"max t^rho |A^rho e^(tA)| = {audit['max_ratio']:.6f} <= 1, "
        f"analytic sup {audit['analytic_sup']:.6f}",
    )


def _check_regularizers(model) -> dict:
    basis = model.basis
    lam, rho = basis.lambdas, basis.rho
    msgs, ok = [], True
    prev = None
    for n in (10.0, 100.0):
        jn = jn_factors(basis, n)
        ok &= bool(np.all((jn > 0) & (jn <= 1.0)))
        ok &= bool(np.all(np.diff(jn) <= 1e-15))
        ok &= bool(np.max(jn * lam**rho) <= n**rho * (1 + 1e-12))
        if prev is not None:
            ok &= bool(np.all(jn >= prev))
        semig = basis.semigroup_diagonal(0.1)
        ok &= bool(np.array_equal(jn * semig, semig * jn))
        msgs.append(f"n={n:g}: V-bound {np.max(jn * lam**rho):.3g} <= {n**rho:.3g}")
        prev = jn
    return _row("regularizer-properties", ok, "; ".join(msgs))


def _check_solve(cfg, state, seed, n_paths, workers) -> dict:
    model, grid = cfg.model, cfg.grid
    if cfg.kind == "riccati":
        rc = cfg.riccati_config(seed=seed, n_paths=n_paths, workers=workers)
        sol = riccati_solve(model, grid, rc)
    else:
        opts = cfg.solver_options(seed=seed, n_paths=n_paths, workers=workers)
        if cfg.backend == "picard":
            sol = picard_solve(model, grid, opts)
        else:
            sol = lyapunov_representation_solve(
                model, grid, backend=cfg.backend, options=opts
            )
    state["solution"] = sol
    state["seed"] = seed
    state["n_paths"] = n_paths
    it = sum(w["iterations"] for w in sol.meta.get("windows", [])) or sol.meta.get("iterations", 1)
    return _row("solve-primary", True, f"{sol.meta['backend']}, {it} sweeps")


def _check_symmetry(sol: BackwardSolution) -> dict:
    worst = 0.0
    for i in range(0, sol.P.n_times, max(1, sol.P.n_times // 20)):
        m = sol.P.eval_at(i, 0.0)
        worst = max(worst, float(np.max(np.abs(m - m.T))))
    return _row("solution-symmetric", worst <= 1e-9, f"max asymmetry {worst:.2e}")


def _check_datum(sol: BackwardSolution) -> dict:
    M = np.diag(sol.model.diag_m())
    gap = float(np.max(np.abs(sol.P.eval_at(sol.grid.L, 0.0) - M)))
    return _row("final-datum", gap <= 1e-10, f"|P(T) - M| = {gap:.2e}")


def _check_psd(sol: BackwardSolution, info: dict) -> dict:
    if not info["A3"]:
        return _row("solution-psd", True, "positivity not claimed for this datum/source")
    eigs = sol.eigenvalue_table(0.0)
    low = float(eigs.min())
    tol = 1e-8 if sol.P.deterministic else 1e-6
    return _row("solution-psd", low >= -tol, f"min eigenvalue {low:.3e} >= -{tol:g}")


def _check_agreement(cfg, sol, state, seed, n_paths) -> dict:
    model, grid = cfg.model, cfg.grid
    if cfg.kind == "riccati":
        if model.deterministic and type(model).__name__ == "ConstantDiagonal":
            worst = 0.0
            P = sol.P.values()
            for k, lam in enumerate(model.basis.lambdas):
                oc = diagonal_oracle(
                    float(lam), float(model.c[k]), float(model.b[k]),
                    float(model.s[k]), float(model.m[k]), grid.T, grid.times,
                )
                worst = max(worst, float(np.max(np.abs(P[:, k, k] - oc))))
            tol = max(1e-4, 50.0 * grid.h**2)
            return _row("backend-agreement", worst <= tol,
                        f"vs per-mode adaptive oracle: max err {worst:.2e} <= {tol:.1e}")
        cfg2 = cfg.riccati_config(seed=seed + 1, n_paths=n_paths)
        other = riccati_solve(model, grid, cfg2)
        state["secondary"] = other
        gap = float(np.linalg.norm(other.P.eval_at(0, 0.0) - sol.P.eval_at(0, 0.0), 2))
        scale = max(1.0, float(np.linalg.norm(sol.P.eval_at(0, 0.0), 2)))
        tol = 0.02 * scale if not model.deterministic else 1e-8
        return _row("backend-agreement", gap <= tol,
                    f"independent-seed re-solve: initial-matrix gap {gap:.2e} <= {tol:.1e}")
    opts = cfg.solver_options(seed=seed, n_paths=n_paths)
    if cfg.backend == "picard":
        other = lyapunov_representation_solve(model, grid, options=opts)
    else:
        other = picard_solve(model, grid, replace(opts, tol=min(opts.tol, 1e-9)))
    state["secondary"] = other
    if model.deterministic:
        gap = float(np.max(batched_opH(other.P.values() - sol.P.values())))
        tol = max(1e-6, 10.0 * grid.h**2)
    else:
        gap = float(np.linalg.norm(other.P.eval_at(0, 0.0) - sol.P.eval_at(0, 0.0), 2))
        se = np.asarray(sol.meta.get("P0_se", other.meta.get("P0_se", [0.0])), dtype=float)
        tol = max(2.0 * 3.0 * float(np.sqrt(np.sum(se**2))), 5e-3)
    return _row("backend-agreement", gap <= tol,
                f"representation vs fixed-point: gap {gap:.2e} <= {tol:.1e}")


def _check_contraction(state) -> dict:
    for key in ("solution", "secondary"):
        sol = state.get(key)
        if sol is None:
            continue
        windows = sol.meta.get("windows")
        if windows:
            ratios = [r for w in windows for r in w["ratios"]]
            worst = max(ratios) if ratios else 0.0
            return _row(
                "window-contraction",
                worst < 1.0,
                f"{len(windows)} windows, max consecutive-residual ratio {worst:.3f} < 1",
            )
    return _row("window-contraction", False, "no windowed solve available")


def _check_energy(sol: BackwardSolution, model) -> dict:
    T = sol.grid.T
    deltas = sorted({max(4 * sol.grid.h, T * f) for f in (1.0, 0.5, 0.25)}, reverse=True)
    weak = not validate_model(model)["A3"]
    audit = apriori_audit(sol, model, deltas, weak=weak)
    return _row(
        "energy-audit",
        audit["lhs_finite"] and audit["max_ratio"] is not None,
        f"windows {[round(r['delta'], 6) for r in audit['rows']]}, "
        f"max lhs/rhs ratio {audit['max_ratio']:.3f}",
    )


def _check_q(sol: BackwardSolution) -> dict:
    if sol.P.deterministic:
        flat = float(np.max(np.abs(sol.Q.coeffs)))
        return _row("martingale-consistency", flat == 0.0,
                    f"deterministic data: |Q| = {flat:.1e} (exact zero expected)")
    worst = 0.0
    scale = 0.0
    idx = range(0, sol.grid.L, max(1, sol.grid.L // 8))
    for i in idx:
        # probe within the sampled range: W_t has standard deviation sqrt(t)
        sd = np.sqrt(max(sol.grid.times[i], sol.grid.h))
        for z0 in (-0.8, 0.0, 0.8):
            w = z0 * sd
            q_reg = sol.Q.eval_at(i, w)
            q_fd = sol.P.deriv_at(i, w)
            worst = max(worst, float(np.max(np.abs(q_reg - q_fd))))
            scale = max(scale, float(np.max(np.abs(q_reg))))
    # the two estimators carry independent sampling noise of the signal's
    # order; a wrong operator (e.g. flipped sign) would sit near 2x scale
    tol = max(0.05, scale)
    return _row("martingale-consistency", worst <= tol,
                f"increment regression vs surface derivative: max gap {worst:.3f} <= {tol:.3f}")


def _check_value(sol, x, riccati_kind, n_paths, seed) -> dict:
    if riccati_kind:
        vc = value_check(sol, x, n_paths=n_paths, seed=seed + 101)
    else:
        L, N = sol.grid.L, sol.model.basis.N
        run = closed_loop(sol, x, n_paths=n_paths, seed=seed + 101,
                          control=np.zeros((L, N)))
        value = sol.value_at(x)
        vc = {
            "value": value,
            "mean_cost": run.mean_cost,
            "se_cost": run.se_cost,
            "gap": run.mean_cost - value,
        }
    # left-endpoint cost quadrature carries O(h) bias; it dominates when the
    # closed loop is noiseless (C = 0) and the standard error collapses
    h_bias = 5.0 * sol.grid.h * max(1.0, abs(vc["value"]))
    ok = abs(vc["gap"]) <= max(3 * vc["se_cost"], h_bias, 1e-10)
    return _row(
        "value-identity",
        ok,
        f"<P(0)x,x> = {vc['value']:.6f}, ensemble cost {vc['mean_cost']:.6f} "
        f"(3se {3 * vc['se_cost']:.1e}, h-bias allowance {h_bias:.1e})",
    )


def _check_subopt(sol, x, riccati_kind, n_paths, seed, quick) -> dict:
    if not riccati_kind:
        return _row("suboptimality", True, "not applicable to the linear equation (no feedback)")
    sp = suboptimality_probe(sol, x, n_paths=n_paths, seed=seed + 202,
                             n_random=1 if quick else 2)
    detail = "; ".join(
        f"{r['challenger']}: +{r['mean_excess']:.4f}" for r in sp["rows"]
    )
    return _row("suboptimality", sp["all_passed"], f"paired excess costs {detail}")


def _check_cos(sol, x, riccati_kind, n_paths, seed) -> dict:
    cs = completion_of_squares(sol, x, control=None, n_paths=n_paths, seed=seed + 303)
    scale = max(1.0, abs(cs["value"]))
    # an estimated surface leaves O(|Phat - P|) in the identity on top of O(h)
    floor = 5e-3 if sol.P.deterministic else 2e-2
    tol = max(3 * cs["se_residual"], floor * scale)
    which = "feedback" if riccati_kind else "zero-gain feedback"
    return _row(
        "completion-of-squares",
        abs(cs["mean_residual"]) <= tol,
        f"{which}: residual {cs['mean_residual']:.2e} <= {tol:.1e}",
    )


def _check_scaling(sol, x, seed) -> dict:
    r1 = closed_loop(sol, x, n_paths=200, seed=seed + 404)
    r2 = closed_loop(sol, 2.0 * x, n_paths=200, seed=seed + 404)
    exact = np.array_equal(r2.costs, 4.0 * r1.costs)
    return _row("scaling-exactness", exact,
                "doubling the initial state multiplies every path cost by exactly 4")


def _check_sim_det(sol, x, seed) -> dict:
    r1 = closed_loop(sol, x, n_paths=200, seed=seed + 505)
    r2 = closed_loop(sol, x, n_paths=200, seed=seed + 505)
    same = np.array_equal(r1.costs, r2.costs)
    return _row("simulate-determinism", same, "same seed twice: identical cost arrays")


def _check_workers(cfg, sol, seed, n_paths) -> dict:
    model, grid = cfg.model, cfg.grid
    if model.deterministic and cfg.kind != "riccati" and cfg.backend != "picard":
        again = lyapunov_representation_solve(
            model, grid, backend=cfg.backend, options=cfg.solver_options(seed=seed)
        )
        same = np.array_equal(again.P.coeffs, sol.P.coeffs)
        return _row("worker-determinism", same, "re-solve reproduces coefficients exactly")
    if cfg.kind == "riccati":
        a = riccati_solve(model, grid, cfg.riccati_config(seed=seed, n_paths=n_paths, workers=1))
        b = riccati_solve(model, grid, cfg.riccati_config(seed=seed, n_paths=n_paths, workers=2))
    else:
        opts = cfg.solver_options(seed=seed, n_paths=n_paths)
        if cfg.backend == "picard":
            a = picard_solve(model, grid, replace(opts, workers=1))
            b = picard_solve(model, grid, replace(opts, workers=2))
        else:
            a = lyapunov_representation_solve(model, grid, options=replace(opts, workers=1))
            b = lyapunov_representation_solve(model, grid, options=replace(opts, workers=2))
    same = np.array_equal(a.P.coeffs, b.P.coeffs)
    return _row("worker-determinism", same,
                "1 worker vs 2 workers: bitwise identical surface coefficients")


def _check_report(sol) -> dict:
    from .report import write_solution_report

    with tempfile.TemporaryDirectory() as tmp:
        d1, d2 = Path(tmp) / "a", Path(tmp) / "b"
        w1 = write_solution_report(sol, d1, "probe", figures=True)
        w2 = write_solution_report(sol, d2, "probe", figures=True)
        same = all(
            filecmp.cmp(w1[k], w2[k], shallow=False) for k in w1
        )
        n = len(w1)
    return _row("report-determinism", same, f"{n} artifacts re-rendered byte-identical")
