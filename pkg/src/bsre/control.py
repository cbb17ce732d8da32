"""Linear-quadratic synthesis from a solved backward equation.

The optimal feedback reads the solution surface along the driving path:
u*(t, y) = -B' P(t, W_t) y.  The quadratic functional

    J(u) = E[ sum_i h (y_i' S_i y_i + |u_i|^2) + y_L' M y_L ]

is estimated by ensemble simulation of the same forward scheme used
elsewhere.  Three verifications hang off this: the value identity
J(u*) = <P(0) x, x>, completion of squares
J(u) = <P(0) x, x> + E sum_i h |B' P y + u|^2 up to discretization bias, and
paired suboptimality probes where challenger controls ride the same Brownian
paths as the feedback loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientModel, sample_paths
from .errors import ContractViolationError, InvalidConfigurationError
from .grid import TimeGrid
from .lyapunov import BackwardSolution
from .processes import poly_features

__all__ = [
    "LoopResult",
    "feedback_gain",
    "closed_loop",
    "recompute_cost",
    "value_check",
    "suboptimality_probe",
    "completion_of_squares",
]

COST_PSD_TOL = 1e-10


def _cost_weights(s: np.ndarray) -> np.ndarray:
    """Diagonal of S as squared weights of |sqrt(S) y|: clip roundoff negatives."""
    low = float(np.min(s))
    if low < -COST_PSD_TOL:
        raise ContractViolationError(
            f"cost weights must be positive semidefinite; min diagonal {low:.3e}"
        )
    return np.maximum(s, 0.0)


@dataclass(frozen=True)
class LoopResult:
    """Ensemble outcome of a controlled forward run.

    costs holds every per-path cost so runs on common paths can be paired;
    sample_states / sample_controls keep the first few trajectories for
    reporting.
    """

    mean_cost: float
    se_cost: float
    n_paths: int
    seed: int
    costs: np.ndarray
    sample_states: np.ndarray
    sample_controls: np.ndarray
    sample_w: np.ndarray

    @property
    def ci3(self) -> float:
        return 3.0 * self.se_cost


def feedback_gain(solution: BackwardSolution, i: int, w) -> np.ndarray:
    """Gain B' P(t_i, w); the optimal control is u = -gain @ y."""
    model = solution.model
    w_arr = np.asarray(w, dtype=float)
    P_here = solution.P.eval_at(i, w_arr)
    _, b, _ = model.diagonals_at(solution.grid.times[i], w_arr)
    return b[..., :, None] * P_here


def _surface_eval(solution: BackwardSolution, i: int, w_vec: np.ndarray) -> np.ndarray:
    coeffs = solution.P.coeffs[i]
    feats = poly_features(w_vec / solution.P.scales[i], coeffs.shape[0] - 1)
    return np.tensordot(feats, coeffs, axes=([-1], [0]))


def _control_eval(control, i, t, Y, w_vec):
    """Challenger control: None = zero, array (L, N) = open loop, callable."""
    if control is None:
        return np.zeros_like(Y)
    if callable(control):
        return np.asarray(control(i, t, Y, w_vec), dtype=float)
    arr = np.asarray(control, dtype=float)
    return np.broadcast_to(arr[i], Y.shape)


def closed_loop(
    solution: BackwardSolution,
    x: np.ndarray,
    n_paths: int = 2000,
    seed: int = 0,
    control=None,
    store: int = 8,
    stream: int = 1,
) -> LoopResult:
    """Simulate the controlled state and accumulate the quadratic cost.

    control None applies the feedback -B' P y read from the solution surface;
    an (L, N) array is applied open loop; a callable receives
    (i, t, states, w) per step.  The Brownian ensemble is independent of any
    solver ensemble (separate stream) unless the caller reuses the seed pair.
    """
    model, grid = solution.model, solution.grid
    N = model.basis.N
    x = np.asarray(x, dtype=float)
    if x.shape != (N,):
        raise InvalidConfigurationError(f"initial state must have shape ({N},)")
    if n_paths < 1:
        raise InvalidConfigurationError("n_paths must be positive")
    ens = sample_paths(grid, n_paths, seed, stream=stream)
    semig = model.basis.semigroup_diagonal(grid.h)
    Y = np.broadcast_to(x, (n_paths, N)).copy()
    costs = np.zeros(n_paths)
    keep = min(store, n_paths)
    saved_states = np.empty((keep, grid.L + 1, N))
    saved_controls = np.empty((keep, grid.L, N))
    saved_states[:, 0] = Y[:keep]
    h = grid.h
    for i in range(grid.L):
        t = grid.times[i]
        w_vec = ens.values[:, i]
        c, b, s = model.diagonals_at(t, w_vec)
        if control is None:
            P_here = _surface_eval(solution, i, w_vec)
            U = -b * np.einsum("pjk,pk->pj", P_here, Y)
        else:
            U = _control_eval(control, i, t, Y, w_vec)
        costs += h * (np.sum(_cost_weights(s) * Y**2, axis=1) + np.sum(U**2, axis=1))
        saved_controls[:, i] = U[:keep]
        dW = ens.increments[:, i][:, None]
        Y = semig * (Y + h * b * U + c * Y * dW)
        saved_states[:, i + 1] = Y[:keep]
    m = _cost_weights(model.diag_m())
    costs += np.sum(m * Y**2, axis=1)
    mean = float(costs.mean())
    se = float(costs.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return LoopResult(
        mean, se, n_paths, seed, costs, saved_states, saved_controls,
        ens.values[:keep].copy(),
    )


def recompute_cost(
    model: CoefficientModel,
    grid: TimeGrid,
    states: np.ndarray,
    controls: np.ndarray,
    w_values: np.ndarray,
) -> float:
    """Quadratic cost of one stored trajectory, from its fields alone."""
    h = grid.h
    total = 0.0
    for i in range(grid.L):
        _, _, s = model.diagonals_at(grid.times[i], float(w_values[i]))
        total += h * (
            float(np.sum(_cost_weights(s) * states[i] ** 2))
            + float(np.sum(controls[i] ** 2))
        )
    total += float(np.sum(_cost_weights(model.diag_m()) * states[grid.L] ** 2))
    return total


def value_check(
    solution: BackwardSolution,
    x: np.ndarray,
    n_paths: int = 2000,
    seed: int = 0,
) -> dict:
    """Optimal cost against the quadratic form of the initial surface."""
    if n_paths < 1000:
        raise InvalidConfigurationError(
            f"value check needs at least 1000 paths, got {n_paths}"
        )
    run = closed_loop(solution, x, n_paths=n_paths, seed=seed)
    value = solution.value_at(np.asarray(x, dtype=float))
    gap = run.mean_cost - value
    return {
        "value": value,
        "mean_cost": run.mean_cost,
        "se_cost": run.se_cost,
        "gap": gap,
        "z": gap / run.se_cost if run.se_cost > 0 else 0.0,
        "within_3se": abs(gap) <= max(run.ci3, 1e-12),
        "n_paths": n_paths,
        "seed": seed,
    }


def _challenger_controls(grid, N, n_random, amplitude, seed):
    """Deterministic open-loop challengers: zero plus smooth random fields."""
    out = [("zero", np.zeros((grid.L, N)))]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 777)))
    t = grid.times[: grid.L, None]
    for j in range(n_random):
        freq = rng.integers(1, 4, size=N)
        phase = rng.uniform(0, 2 * np.pi, size=N)
        amp = amplitude * rng.uniform(0.3, 1.0, size=N)
        arr = amp * np.sin(np.pi * freq * t + phase)
        out.append((f"smooth-{j}", arr))
    return out


def suboptimality_probe(
    solution: BackwardSolution,
    x: np.ndarray,
    n_paths: int = 2000,
    seed: int = 0,
    n_random: int = 2,
    amplitude: float = 0.5,
) -> dict:
    """Feedback cost versus challengers on common Brownian paths.

    Differences are paired per path, so the comparison standard error reflects
    the difference process rather than two independent runs.
    """
    if n_random < 1:
        raise InvalidConfigurationError(
            "suboptimality probe needs at least one random challenger"
        )
    base = closed_loop(solution, x, n_paths=n_paths, seed=seed)
    rows = []
    for name, ctrl in _challenger_controls(
        solution.grid, solution.model.basis.N, n_random, amplitude, seed
    ):
        run = closed_loop(solution, x, n_paths=n_paths, seed=seed, control=ctrl)
        diffs = run.costs - base.costs
        mean = float(diffs.mean())
        se = float(diffs.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
        rows.append(
            {
                "challenger": name,
                "mean_excess": mean,
                "se_excess": se,
                "never_better_3se": mean >= -3.0 * se - 1e-12,
            }
        )
    return {
        "feedback_cost": base.mean_cost,
        "feedback_se": base.se_cost,
        "rows": rows,
        "all_passed": all(r["never_better_3se"] for r in rows),
    }


def completion_of_squares(
    solution: BackwardSolution,
    x: np.ndarray,
    control=None,
    n_paths: int = 2000,
    seed: int = 0,
) -> dict:
    """Per-path residual of the square-completion identity.

    residual_j = cost_j - <P(0) x, x> - sum_i h |B' P y_i + u_i|^2 on path j.
    The ensemble mean carries an O(h) discretization bias on top of its Monte
    Carlo error; both are reported.
    """
    model, grid = solution.model, solution.grid
    N = model.basis.N
    x = np.asarray(x, dtype=float)
    ens = sample_paths(grid, n_paths, seed, stream=1)
    semig = model.basis.semigroup_diagonal(grid.h)
    Y = np.broadcast_to(x, (n_paths, N)).copy()
    costs = np.zeros(n_paths)
    squares = np.zeros(n_paths)
    h = grid.h
    for i in range(grid.L):
        t = grid.times[i]
        w_vec = ens.values[:, i]
        c, b, s = model.diagonals_at(t, w_vec)
        P_here = _surface_eval(solution, i, w_vec)
        gain_y = b * np.einsum("pjk,pk->pj", P_here, Y)
        U = -gain_y if control is None else _control_eval(control, i, t, Y, w_vec)
        costs += h * (np.sum(_cost_weights(s) * Y**2, axis=1) + np.sum(U**2, axis=1))
        squares += h * np.sum((gain_y + U) ** 2, axis=1)
        dW = ens.increments[:, i][:, None]
        Y = semig * (Y + h * b * U + c * Y * dW)
    costs += np.sum(_cost_weights(model.diag_m()) * Y**2, axis=1)
    value = solution.value_at(x)
    resid = costs - value - squares
    mean = float(resid.mean())
    se = float(resid.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return {
        "value": value,
        "mean_cost": float(costs.mean()),
        "mean_square_term": float(squares.mean()),
        "mean_residual": mean,
        "se_residual": se,
        "h": h,
        "n_paths": n_paths,
        "seed": seed,
    }
