"""Backward Riccati equations by quadratic outer iteration.

The drift of the Riccati equation differs from the Lyapunov one by the
quadratic feedback term -P B B' P.  The solver freezes that term at the
current iterate K, solves the remaining linear backward equation through its
flow representation, and repeats inside a ball of radius r whose size comes
from an a priori bound on the solution:

    bound = C2^2 |M| + 2 C2^2 T sup|S|,      r > bound.

C2 dominates the second moment growth of the controlled state; it is measured
empirically (closed form per mode for deterministic coefficients, a sampled
moment audit otherwise) and inflated by a safety factor.  Iteration runs on
windows pasted backward from T, with the window length halved whenever the
measured contraction ratio degrades or an iterate leaves the ball.

diagonal_oracle provides an independent check: with diagonal data every mode
solves a scalar Riccati ODE, integrated here with an adaptive Runge-Kutta
scheme at tight tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .coefficients import CoefficientModel, sample_paths, validate_model
from .errors import (
    BallViolationError,
    ContractViolationError,
    InvalidConfigurationError,
    NonConvergenceError,
    OracleFailureError,
)
from .forward import empirical_C2
from .grid import TimeGrid
from .lyapunov import (
    BackwardSolution,
    _det_representation_window,
    _embed_diag,
    _mc_backward_sweep,
    _pad_F,
    _plan_windows,
    _surface_block_distance,
    _WindowRetry,
    _zero_Q,
    extract_Q,
)
from .processes import (
    OperatorProcess,
    batched_opH,
    poly_features,
    rebase_surface,
    surface_scales,
)
from .spectral import psd_repair

__all__ = [
    "RiccatiConfig",
    "riccati_solve",
    "lambda_apply",
    "diagonal_oracle",
]

PSD_SOLUTION_TOL = 1e-8


@dataclass(frozen=True)
class RiccatiConfig:
    """Knobs of the quadratic iteration.

    r = None sizes the ball automatically from the a priori bound; an explicit
    r must exceed that bound.  delta = None starts from the same automatic
    window as the linear solver and relies on measured-contraction halving.
    """

    r: float | None = None
    delta: float | None = None
    tol: float = 1e-10
    max_iter: int = 60
    c2_safety: float = 2.0
    c2_paths: int = 2000
    n_paths: int = 4000
    degree: int = 4
    ridge: float = 1e-8
    seed: int = 0
    workers: int = 1
    chunk: int = 1024
    max_halvings: int = 8
    contraction_threshold: float = 0.9


def _source_sup(model: CoefficientModel, grid: TimeGrid) -> float:
    """Uniform bound on |S(t, w)| in operator norm."""
    if model.deterministic:
        worst = 0.0
        for t in grid.times:
            _, _, s = model.diagonals_at(t, 0.0)
            worst = max(worst, float(np.max(np.abs(s))))
        return worst
    if model.bounds.M_S is None:
        raise InvalidConfigurationError("random-field model needs M_S in bounds")
    return float(model.bounds.M_S)


def _ball_data(model: CoefficientModel, grid: TimeGrid, cfg: RiccatiConfig):
    C2, c2_details = empirical_C2(
        model, grid, n_paths=cfg.c2_paths, seed=cfg.seed, safety=cfg.c2_safety
    )
    M_op = float(np.max(np.abs(model.diag_m())))
    S_sup = _source_sup(model, grid)
    bound = C2**2 * M_op + 2.0 * C2**2 * grid.T * S_sup
    if cfg.r is None:
        r = max(1.0, 2.0 * bound)
    else:
        r = float(cfg.r)
        if r <= bound:
            raise InvalidConfigurationError(
                f"ball radius r={r} does not exceed the a priori bound {bound:.6g}"
            )
    M_B = model.bounds.M_B
    delta_theory = (
        (r - bound) / (C2**2 * M_B**2 * r**2) if M_B > 0 else None
    )
    return C2, c2_details, bound, r, delta_theory


def _quadratic_extra_det(model, grid, i_lo, i_hi, K_block):
    """-K B B' K at the window nodes, deterministic data."""
    n = i_hi - i_lo + 1
    N = model.basis.N
    out = np.empty((n, N, N))
    for k, i in enumerate(range(i_lo, i_hi + 1)):
        _, b, _ = model.diagonals_at(grid.times[i], 0.0)
        out[k] = -K_block[k] @ np.diag(b * b) @ K_block[k]
    return out


def _quadratic_source_eval(model, grid, K_co, scales, i_lo):
    """S - K B B' K read from the frozen iterate surfaces, per path."""

    def source_eval(i, w_vec, path_slice):
        _, b, s = model.diagonals_at(grid.times[i], w_vec)
        k = i - i_lo
        feats = poly_features(w_vec / scales[k], K_co.shape[1] - 1)
        K_here = np.tensordot(feats, K_co[k], axes=([-1], [0]))
        quad = np.einsum("pja,pa,pak->pjk", K_here, b * b, K_here)
        return _embed_diag(s) - quad

    return source_eval


def riccati_solve(
    model: CoefficientModel,
    grid: TimeGrid,
    cfg: RiccatiConfig | None = None,
) -> BackwardSolution:
    """Solve the backward Riccati equation inside an a priori ball.

    Requires the positivity hypothesis (S and the final datum positive
    semidefinite); deterministic accepted solutions are checked for
    positivity, sampled ones record their smallest eigenvalue in meta.
    """
    cfg = cfg or RiccatiConfig()
    info = validate_model(model, grid)
    if not info["A3"]:
        raise ContractViolationError(
            "positivity hypothesis violated: " + "; ".join(info["messages"])
        )
    C2, c2_details, bound, r, delta_theory = _ball_data(model, grid, cfg)
    basis = model.basis
    M = np.diag(model.diag_m())
    delta = cfg.delta
    if delta is None:
        delta = min(grid.T, 0.5 / (model.bounds.M_C**2 + 1.0))
    if not (0 < delta <= grid.T + 1e-12):
        raise InvalidConfigurationError(f"window delta must lie in (0, T], got {delta}")

    stochastic = not model.deterministic
    ens = None
    degree = 0
    if stochastic:
        degree = cfg.degree
        if cfg.n_paths < max(100, degree + 1):
            raise InvalidConfigurationError(
                "regression underdetermined: n_paths below feature count or floor"
            )
        ens = sample_paths(grid, cfg.n_paths, cfg.seed)
    F = degree + 1
    all_scales = surface_scales(grid, grid.L + 1)

    win_steps = max(1, int(round(delta / grid.h)))
    halvings = 0
    ball_max = 0.0
    while True:
        try:
            windows_meta = []
            ball_max = 0.0
            P_full = np.zeros((grid.L + 1, F, basis.N, basis.N))
            datum_co = _pad_F(np.asarray(M)[None], F)
            datum_scale = 1.0
            for (i_lo, i_hi) in _plan_windows(grid.L, win_steps):
                block, datum_co, datum_scale, wmeta, wball = _riccati_window(
                    model, grid, ens, i_lo, i_hi, degree, cfg,
                    datum_co, datum_scale, all_scales, r,
                )
                ball_max = max(ball_max, wball)
                top = i_hi + 1 if i_hi == grid.L else i_hi
                P_full[i_lo:top] = block[: top - i_lo]
                windows_meta.append(wmeta)
            break
        except _WindowRetry as retry:
            halvings += 1
            if win_steps == 1 or halvings > cfg.max_halvings:
                if retry.residuals and retry.residuals[-1] > r:
                    raise BallViolationError(
                        f"iterates left the ball of radius {r:.6g} at minimal window"
                    ) from None
                raise NonConvergenceError(
                    f"riccati windows failed to contract after {halvings - 1} halvings",
                    residuals=retry.residuals,
                ) from None
            win_steps = max(1, win_steps // 2)

    scales = all_scales if stochastic else np.ones(grid.L + 1)
    min_eig = None
    if stochastic:
        P = OperatorProcess(grid, basis, P_full, scales)
        Q = extract_Q(P, ens, degree=degree, ridge=cfg.ridge)
        mats = np.stack([P.eval_at(i, 0.0) for i in range(grid.L + 1)])
        mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
        min_eig = float(np.min(np.linalg.eigvalsh(mats)))
    else:
        vals = P_full[:, 0]
        min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (vals + np.swapaxes(vals, -1, -2)))))
        if min_eig < 0.0:
            # roundoff-sized dips are clipped, anything real raises
            P_full = psd_repair(vals, PSD_SOLUTION_TOL)[:, None]
        P = OperatorProcess(grid, basis, P_full, scales)
        Q = _zero_Q(grid, basis)
    meta = {
        "backend": "riccati-monte-carlo" if stochastic else "riccati-deterministic",
        "variant": type(model).__name__,
        "C2": C2,
        "C2_details": c2_details,
        "bound": bound,
        "r": r,
        "delta": win_steps * grid.h,
        "delta_theoretical": delta_theory,
        "win_steps": win_steps,
        "halvings": halvings,
        "windows": windows_meta,
        "ball_max": ball_max,
        "min_eig_at_origin": min_eig,
        "tol": cfg.tol,
        "seeds": {"paths": cfg.seed} if stochastic else {},
    }
    if stochastic:
        meta.update({"n_paths": cfg.n_paths, "degree": degree, "ridge": cfg.ridge})
    return BackwardSolution(model, grid, P, Q, meta, ens=ens)


def _riccati_window(
    model, grid, ens, i_lo, i_hi, degree, cfg, datum_co, datum_scale, all_scales, r
):
    basis = model.basis
    F = degree + 1
    win = i_hi - i_lo
    scales = all_scales[i_lo : i_hi + 1]
    stochastic = ens is not None
    if stochastic:
        K_cur = rebase_surface(datum_co, datum_scale, scales)
    else:
        K_cur = np.broadcast_to(datum_co[0], (win + 1, basis.N, basis.N)).copy()
    residuals: list[float] = []
    converged = False
    ball_seen = 0.0
    for _ in range(cfg.max_iter):
        if stochastic:
            src = _quadratic_source_eval(model, grid, K_cur, scales, i_lo)
            K_new, _, _, _ = _mc_backward_sweep(
                model, grid, ens, i_lo, i_hi, degree, cfg.ridge, True,
                src, datum_co, datum_scale,
                workers=cfg.workers, chunk=cfg.chunk,
            )
            iter_norm = _surface_sup_hs(K_new, scales, ens.values[:, i_lo : i_hi + 1])
            res = _surface_block_distance(
                K_new, K_cur, scales, ens.values[:, i_lo : i_hi + 1]
            )
        else:
            extra = _quadratic_extra_det(model, grid, i_lo, i_hi, K_cur)
            K_new = _det_representation_window(
                model, grid, i_lo, i_hi, datum_co[0], extra_nodes=extra
            )
            iter_norm = float(np.max(batched_opH(K_new)))
            res = float(np.max(batched_opH(K_new - K_cur)))
        ball_seen = max(ball_seen, iter_norm)
        if iter_norm > r:
            residuals.append(iter_norm)
            raise _WindowRetry(residuals)
        if residuals and res >= cfg.tol and res >= cfg.contraction_threshold * residuals[-1]:
            residuals.append(res)
            raise _WindowRetry(residuals)
        residuals.append(res)
        K_cur = K_new
        if res < cfg.tol:
            converged = True
            break
    if not converged:
        raise NonConvergenceError(
            f"riccati window [{i_lo}, {i_hi}] hit max_iter={cfg.max_iter}",
            residuals=residuals,
        )
    ratios = [residuals[m] / residuals[m - 1] for m in range(1, len(residuals))
              if residuals[m - 1] > 0]
    wmeta = {
        "window": [int(i_lo), int(i_hi)],
        "iterations": len(residuals),
        "residuals": residuals,
        "ratios": ratios,
    }
    if stochastic:
        block, new_datum = K_cur, K_cur[0]
    else:
        block, new_datum = K_cur[:, None], _pad_F(K_cur[0][None], F)
    return block, new_datum, float(scales[0]), wmeta, ball_seen


def _surface_sup_hs(block: np.ndarray, scales: np.ndarray, W_cols: np.ndarray) -> float:
    """sup over times and sampled paths of the Frobenius norm of a surface block."""
    worst = 0.0
    for k in range(block.shape[0]):
        feats = poly_features(W_cols[:, k] / scales[k], block.shape[1] - 1)
        vals = np.tensordot(feats, block[k], axes=([-1], [0]))
        worst = max(worst, float(np.max(np.sqrt(np.sum(vals**2, axis=(-2, -1))))))
    return worst


def lambda_apply(
    K: OperatorProcess,
    model: CoefficientModel,
    cfg: RiccatiConfig | None = None,
    M_tilde: np.ndarray | None = None,
) -> tuple[OperatorProcess, OperatorProcess]:
    """One application of the quadratic map on the full grid.

    Freezes -K B B' K, solves the linear backward equation with the flow
    representation, ball-checks input and output against the automatically
    sized (or configured) radius, and returns the new pair (P, Q).
    """
    cfg = cfg or RiccatiConfig()
    grid, basis = K.grid, K.basis
    _, _, _, r, _ = _ball_data(model, grid, cfg)
    M = np.diag(model.diag_m()) if M_tilde is None else np.asarray(M_tilde, dtype=float)
    if model.deterministic and K.deterministic:
        K_block = K.values()
        in_norm = float(np.max(batched_opH(K_block)))
        if in_norm > r:
            raise BallViolationError(
                f"input iterate norm {in_norm:.6g} exceeds ball radius {r:.6g}"
            )
        extra = _quadratic_extra_det(model, grid, 0, grid.L, K_block)
        out = _det_representation_window(model, grid, 0, grid.L, M, extra_nodes=extra)
        out_norm = float(np.max(batched_opH(out)))
        if out_norm > r:
            raise BallViolationError(
                f"output iterate norm {out_norm:.6g} exceeds ball radius {r:.6g}"
            )
        return OperatorProcess.from_values(grid, basis, out), _zero_Q(grid, basis)
    degree = cfg.degree
    if cfg.n_paths < max(100, degree + 1):
        raise InvalidConfigurationError(
            "regression underdetermined: n_paths below feature count or floor"
        )
    ens = sample_paths(grid, cfg.n_paths, cfg.seed)
    scales = surface_scales(grid, grid.L + 1)
    F = degree + 1
    K_co = np.zeros((grid.L + 1, F, basis.N, basis.N))
    K_co[:, : K.coeffs.shape[1]] = rebase_surface_block(K.coeffs, K.scales, scales)
    W_cols = ens.values
    in_norm = _surface_sup_hs(K_co, scales, W_cols)
    if in_norm > r:
        raise BallViolationError(
            f"input iterate norm {in_norm:.6g} exceeds ball radius {r:.6g}"
        )
    src = _quadratic_source_eval(model, grid, K_co, scales, 0)
    datum = _pad_F(np.asarray(M)[None], F)
    coeffs, out_scales, _, _ = _mc_backward_sweep(
        model, grid, ens, 0, grid.L, degree, cfg.ridge, True,
        src, datum, 1.0, workers=cfg.workers, chunk=cfg.chunk,
    )
    out_norm = _surface_sup_hs(coeffs, out_scales, W_cols)
    if out_norm > r:
        raise BallViolationError(
            f"output iterate norm {out_norm:.6g} exceeds ball radius {r:.6g}"
        )
    P_out = OperatorProcess(grid, basis, coeffs, out_scales)
    return P_out, extract_Q(P_out, ens, degree=degree, ridge=cfg.ridge)


def rebase_surface_block(
    coeffs: np.ndarray, scales: np.ndarray, target_scales: np.ndarray
) -> np.ndarray:
    """Re-express per-time surfaces on new feature scalings, exactly."""
    F = coeffs.shape[1]
    factors = (scales / target_scales)[:, None] ** np.arange(F)[None, :]
    return coeffs * factors[:, :, None, None]


def diagonal_oracle(
    lam: float,
    c: float,
    b: float,
    s: float,
    m: float,
    T: float,
    t_eval: np.ndarray,
) -> np.ndarray:
    """Scalar Riccati mode solved backward by adaptive Runge-Kutta.

    dP/dtau = (c^2 - 2 lam) P + s - b^2 P^2 with P(0) = m, tau = T - t.
    Integrates at tolerance 1e-10 and raises if the solution blows up.
    """
    t_eval = np.asarray(t_eval, dtype=float)
    if np.any(t_eval < -1e-12) or np.any(t_eval > T + 1e-12):
        raise InvalidConfigurationError("oracle evaluation times must lie in [0, T]")
    taus = T - t_eval
    order = np.argsort(taus)
    tau_sorted = taus[order]

    def rhs(tau, y):
        return [(c * c - 2.0 * lam) * y[0] + s - b * b * y[0] ** 2]

    def blow_up(tau, y):
        return abs(y[0]) - 1e8

    blow_up.terminal = True
    sol = solve_ivp(
        rhs,
        (0.0, max(float(tau_sorted[-1]), 1e-14)),
        [m],
        method="RK45",
        rtol=1e-10,
        atol=1e-10,
        t_eval=np.maximum(tau_sorted, 0.0),
        events=blow_up,
    )
    if not sol.success or sol.t.size != tau_sorted.size:
        raise OracleFailureError(
            f"scalar riccati oracle failed: {sol.message} (blow-up or step failure)"
        )
    out = np.empty_like(taus)
    out[order] = sol.y[0]
    return out
