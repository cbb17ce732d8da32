"""Delimited reports and figures for solved equations and controlled runs.

Everything written here is deterministic for a fixed input: no timestamps, no
environment echoes, sorted JSON keys, floats at full round-trip precision.
Figures render through the Agg canvas directly so no display or global
backend state is involved.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .control import LoopResult
from .grid import TimeGrid
from .lyapunov import BackwardSolution
from .spectral import dump_matrix_csv

__all__ = [
    "write_solution_report",
    "write_trajectory_report",
    "write_verify_report",
]


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _ensure_dir(out_dir) -> Path:
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _new_axes(figsize=(7.0, 4.0)):
    fig = Figure(figsize=figsize, dpi=120)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot()


def write_solution_report(
    solution: BackwardSolution,
    out_dir,
    name: str,
    figures: bool = True,
    extra_meta: dict | None = None,
) -> dict:
    """Surface table, initial matrix, meta JSON and optional figures.

    The surface CSV lists per node the eigenvalues of P(t_i) and the Ks norm
    of Q(t_i), both read at w = 0; Q has no value at the final node, the field
    stays empty there.
    """
    out = _ensure_dir(out_dir)
    N = solution.model.basis.N
    grid = solution.grid
    eigs = solution.eigenvalue_table(0.0)
    qks = solution.q_ks_table(0.0)

    surface = out / f"{name}_surface.csv"
    with surface.open("w") as f:
        cols = ["t"] + [f"eig_{k + 1}" for k in range(N)] + ["q_ks"]
        f.write(",".join(cols) + "\n")
        for i in range(grid.L + 1):
            row = [_fmt(grid.times[i])] + [_fmt(v) for v in eigs[i]]
            row.append(_fmt(qks[i]) if i < grid.L else "")
            f.write(",".join(row) + "\n")

    p0_path = out / f"{name}_p0.csv"
    dump_matrix_csv(solution.P0(), p0_path)

    meta = {
        "name": name,
        "grid": {"T": grid.T, "steps": grid.L},
        "basis": {
            "N": N,
            "rho": solution.model.basis.rho,
            "lambdas": solution.model.basis.lambdas.tolist(),
        },
        "solver": solution.meta,
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_path = out / f"{name}_meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2, default=float) + "\n")

    written = {
        "surface": str(surface),
        "p0": str(p0_path),
        "meta": str(meta_path),
    }
    if figures:
        fig, ax = _new_axes()
        for k in range(N):
            ax.plot(grid.times, eigs[:, k], label=f"mode {k + 1}")
        ax.set_xlabel("t")
        ax.set_ylabel("eigenvalues of P(t)")
        ax.legend(loc="best", fontsize=8)
        ax.set_title(name)
        eig_png = out / f"{name}_eigs.png"
        fig.savefig(eig_png)
        written["eigs_png"] = str(eig_png)

        fig, ax = _new_axes()
        ax.plot(grid.times[: grid.L], qks, color="tab:red")
        ax.set_xlabel("t")
        ax.set_ylabel("|Q(t)| in Ks norm")
        ax.set_title(name)
        q_png = out / f"{name}_qks.png"
        fig.savefig(q_png)
        written["qks_png"] = str(q_png)
    return written


def write_trajectory_report(
    result: LoopResult,
    grid: TimeGrid,
    out_dir,
    name: str,
    figures: bool = True,
) -> dict:
    """First stored trajectory as CSV plus ensemble cost summary."""
    out = _ensure_dir(out_dir)
    states = result.sample_states[0]
    controls = result.sample_controls[0]
    N = states.shape[1]

    traj = out / f"{name}_traj.csv"
    with traj.open("w") as f:
        cols = ["t"] + [f"y_{k + 1}" for k in range(N)] + [f"u_{k + 1}" for k in range(N)]
        f.write(",".join(cols) + "\n")
        for i in range(grid.L + 1):
            row = [_fmt(grid.times[i])] + [_fmt(v) for v in states[i]]
            if i < grid.L:
                row += [_fmt(v) for v in controls[i]]
            else:
                row += [""] * N
            f.write(",".join(row) + "\n")

    cost = out / f"{name}_cost.json"
    cost.write_text(
        json.dumps(
            {
                "mean_cost": result.mean_cost,
                "se_cost": result.se_cost,
                "n_paths": result.n_paths,
                "seed": result.seed,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )

    samples = out / f"{name}_costs.csv"
    with samples.open("w") as f:
        f.write("path,cost\n")
        for j, v in enumerate(result.costs):
            f.write(f"{j},{_fmt(v)}\n")

    written = {"traj": str(traj), "cost": str(cost), "costs": str(samples)}
    if figures:
        fig, ax = _new_axes()
        for k in range(N):
            ax.plot(grid.times, states[:, k], label=f"y_{k + 1}")
        for k in range(N):
            ax.plot(grid.times[: grid.L], controls[:, k], "--", label=f"u_{k + 1}")
        ax.set_xlabel("t")
        ax.set_title(name)
        ax.legend(loc="best", fontsize=7, ncol=2)
        png = out / f"{name}_traj.png"
        fig.savefig(png)
        written["traj_png"] = str(png)
    return written


def write_verify_report(checks: list[dict], out_dir, name: str) -> dict:
    """One PASS/FAIL line per check plus the same content as JSON."""
    out = _ensure_dir(out_dir)
    txt = out / f"{name}_verify.txt"
    n_pass = sum(1 for c in checks if c["passed"])
    lines = [
        f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}" for c in checks
    ]
    lines.append(f"PASSED {n_pass}/{len(checks)}")
    txt.write_text("\n".join(lines) + "\n")
    js = out / f"{name}_verify.json"
    js.write_text(
        json.dumps(
            {"checks": checks, "passed": n_pass, "total": len(checks)},
            sort_keys=True,
            indent=2,
            default=float,
        )
        + "\n"
    )
    return {"txt": str(txt), "json": str(js), "all_passed": n_pass == len(checks)}
