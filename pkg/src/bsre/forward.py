"""Forward state dynamics under the exponential Euler scheme.

One step of the controlled state equation dy = (Ay + Bu) dt + Cy dW reads

    y_{i+1} = e^{hA} (y_i + h B_i u_i + C_i y_i dW_i),

with coefficients and noise read at the left endpoint.  The semigroup factor
is exact per mode, so stiff modes never constrain the step size.  Flow
matrices of the uncontrolled equation compose exactly as products of the
per-step matrices e^{hA}(I + dW_i C_i).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import BrownianEnsemble, BrownianPath, CoefficientModel, sample_paths
from .errors import InvalidConfigurationError
from .grid import TimeGrid
from .spectral import OperatorMatrix

__all__ = [
    "Trajectory",
    "FlowMatrix",
    "propagate",
    "flow_matrices",
    "moment_audit",
    "empirical_C2",
    "MOMENT_MIN_PATHS",
]

MOMENT_MIN_PATHS = 1000


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on the full grid and the controls actually applied per step."""

    grid: TimeGrid
    states: np.ndarray  # (L+1, N)
    controls: np.ndarray  # (L, N)
    path_seed: int
    path_index: int


@dataclass(frozen=True, eq=False)
class FlowMatrix:
    """State flow of the uncontrolled equation from grid index i_from to i_to."""

    i_from: int
    i_to: int
    op: OperatorMatrix


def _control_at(control, i: int, t: float, y: np.ndarray, w: float) -> np.ndarray:
    if control is None:
        return np.zeros_like(y)
    if callable(control):
        return np.asarray(control(i, t, y, w), dtype=float)
    return np.asarray(control[i], dtype=float)


def propagate(
    x: np.ndarray,
    control,
    model: CoefficientModel,
    path: BrownianPath,
) -> Trajectory:
    """Run the scheme along one path from initial state x.

    control may be None (zero control), an (L, N) array of open-loop values,
    or a callable (i, t, y, w) -> u evaluated at the left endpoint.
    """
    grid = path.grid
    N = model.basis.N
    x = np.asarray(x, dtype=float)
    if x.shape != (N,):
        raise InvalidConfigurationError(f"initial state must have shape ({N},), got {x.shape}")
    semig = model.basis.semigroup_diagonal(grid.h)
    states = np.empty((grid.L + 1, N))
    controls = np.empty((grid.L, N))
    states[0] = x
    for i in range(grid.L):
        t = grid.times[i]
        w = path.values[i]
        c, b, _ = model.diagonals_at(t, w)
        u = _control_at(control, i, t, states[i], w)
        controls[i] = u
        states[i + 1] = semig * (
            states[i] + grid.h * b * u + c * states[i] * path.increments[i]
        )
    return Trajectory(
        grid=grid, states=states, controls=controls,
        path_seed=path.seed, path_index=path.index,
    )


def flow_matrices(
    model: CoefficientModel, path: BrownianPath, to_index: int | None = None
) -> list[FlowMatrix]:
    """Flows Phi(t_i -> t_j) of the uncontrolled scheme for all i <= j.

    Column k of Phi(t_i -> t_j) is the scheme applied to e_k over [t_i, t_j].
    Materializes (j+1) dense matrices for one path; the solvers use a fused
    accumulation instead, this op exists for inspection and tests.
    """
    grid = path.grid
    j = grid.L if to_index is None else int(to_index)
    if not (0 <= j <= grid.L):
        raise InvalidConfigurationError(f"to_index {j} out of range 0..{grid.L}")
    N = model.basis.N
    semig = model.basis.semigroup_diagonal(grid.h)
    flows = [None] * (j + 1)
    acc = np.eye(N)
    flows[j] = FlowMatrix(j, j, OperatorMatrix(model.basis, acc.copy()))
    for i in range(j - 1, -1, -1):
        c, _, _ = model.diagonals_at(grid.times[i], path.values[i])
        step = semig[:, None] * (np.eye(N) + path.increments[i] * np.diag(c))
        acc = acc @ step
        flows[i] = FlowMatrix(i, j, OperatorMatrix(model.basis, acc.copy()))
    return flows


def ensemble_states_init(x: np.ndarray, n_paths: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=float), (n_paths, x.shape[0])).copy()


def ensemble_step(
    model: CoefficientModel,
    grid: TimeGrid,
    i: int,
    Y: np.ndarray,
    U: np.ndarray | None,
    W_i: np.ndarray,
    dW_i: np.ndarray,
    semig: np.ndarray,
) -> np.ndarray:
    """One scheme step for all paths at once; Y and U have shape (n_paths, N)."""
    c, b, _ = model.diagonals_at(grid.times[i], W_i)
    drift = Y if U is None else Y + grid.h * b * U
    return semig * (drift + c * Y * dW_i[:, None])


def moment_audit(
    model: CoefficientModel,
    x: np.ndarray,
    control,
    n_paths: int,
    grid: TimeGrid,
    seed: int,
    min_paths: int = MOMENT_MIN_PATHS,
) -> dict:
    """Estimate sup_s E|y(s)|^2 against the bracket |x|^2 + E int |u|^2 ds.

    The ratio of the two is the empirical counterpart of the second-moment
    growth constant; it feeds the invariant-ball radius of the Riccati solver.
    """
    if n_paths < min_paths:
        raise InvalidConfigurationError(
            f"moment_audit needs n_paths >= {min_paths} for stable second moments, "
            f"got {n_paths}"
        )
    ens = sample_paths(grid, n_paths, seed)
    x = np.asarray(x, dtype=float)
    semig = model.basis.semigroup_diagonal(grid.h)
    Y = ensemble_states_init(x, n_paths)
    second = np.empty(grid.L + 1)
    second[0] = float(np.mean(np.sum(Y**2, axis=1)))
    u_quad = 0.0
    for i in range(grid.L):
        W_i = ens.values[:, i]
        if control is None:
            U = None
        elif callable(control):
            U = np.stack(
                [control(i, grid.times[i], Y[p], W_i[p]) for p in range(n_paths)]
            )
        else:
            U = np.broadcast_to(np.asarray(control[i], dtype=float), Y.shape)
        if U is not None:
            u_quad += grid.h * float(np.mean(np.sum(U**2, axis=1)))
        Y = ensemble_step(model, grid, i, Y, U, W_i, ens.increments[:, i], semig)
        second[i + 1] = float(np.mean(np.sum(Y**2, axis=1)))
    sup_idx = int(np.argmax(second))
    rhs = float(np.sum(x**2)) + u_quad
    ratio = float(second[sup_idx] / rhs) if rhs > 0 else float("inf")
    return {
        "sup_second_moment": float(second[sup_idx]),
        "sup_time": float(grid.times[sup_idx]),
        "rhs_bracket": rhs,
        "ratio": ratio,
        "n_paths": n_paths,
        "second_moments": second.tolist(),
    }


def empirical_C2(
    model: CoefficientModel,
    grid: TimeGrid,
    x: np.ndarray | None = None,
    n_paths: int = 2000,
    seed: int = 0,
    safety: float = 2.0,
) -> tuple[float, dict]:
    """Second-moment growth constant of the uncontrolled dynamics, inflated.

    Deterministic-coefficient models admit the closed form: mode k grows like
    exp((c_k^2 - 2 lambda_k) s), so the worst ratio over states is the running
    maximum of the per-mode factors.  Otherwise a Monte Carlo audit estimates
    the ratio for the given initial state.
    """
    lam = model.basis.lambdas
    if model.deterministic:
        growth = np.ones(model.basis.N)
        worst = 1.0
        for i in range(grid.L):
            c, _, _ = model.diagonals_at(grid.times[i], 0.0)
            growth = growth * np.exp((c**2 - 2.0 * lam) * grid.h)
            worst = max(worst, float(np.max(growth)))
        details = {"method": "closed-form", "ratio": worst}
    else:
        if x is None:
            x = np.ones(model.basis.N) / np.sqrt(model.basis.N)
        report = moment_audit(
            model, x, None, max(n_paths, MOMENT_MIN_PATHS), grid, seed
        )
        worst = max(1.0, report["ratio"])
        details = {"method": "monte-carlo", "ratio": worst, "audit": report}
    c2 = safety * worst
    details["safety"] = safety
    details["C2"] = c2
    return c2, details
