"""Backward operator-valued Lyapunov equations at spectral truncation.

Two routes compute the same object and check each other:

* lyapunov_representation_solve conjugates the final datum and the running
  source by the state flow and takes conditional expectations.  With
  deterministic coefficients the expected flow quadratic form is known per
  mode pair (kernel mu_jk = -(lambda_j + lambda_k) + c_j c_k), so that backend
  integrates the equation in closed form per interval.  Otherwise flows are
  sampled, the backward accumulation R(t_i) = S_hat_i + E_i' R(t_{i+1}) E_i is
  fused over steps, and conditional expectations at t > 0 come from polynomial
  least squares on the Brownian value (plain means at t = 0).

* picard_solve iterates the linearized map: freeze the quadratic-in-C and
  martingale terms of the drift, solve the resulting linear backward equation
  with semigroup kernels, repeat.  On short windows the map contracts; windows
  are pasted backward from T and halved automatically when the measured
  contraction ratio is too close to one.

The martingale integrand Q is recovered from the conditional surfaces: the
increment of the P-martingale regressed against dW_i / h, which estimates the
w-derivative of the surface.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .coefficients import BrownianEnsemble, CoefficientModel, sample_paths
from .errors import (
    ContractViolationError,
    InvalidConfigurationError,
    NonConvergenceError,
)
from .grid import TimeGrid
from .processes import (
    OperatorProcess,
    batched_opH,
    fit_from_gram,
    gram_terms,
    poly_features,
    rebase_surface,
    surface_scales,
)
from .spectral import OperatorMatrix, SpectralBasis, norm

__all__ = [
    "SolverOptions",
    "BackwardSolution",
    "lyapunov_representation_solve",
    "extract_Q",
    "gamma_apply",
    "picard_solve",
    "apriori_audit",
    "jn_stability_audit",
    "weak_source_solve",
    "MIN_MC_PATHS",
]

MIN_MC_PATHS = 100


@dataclass(frozen=True)
class SolverOptions:
    """Knobs shared by the backward solvers.

    delta = None means the automatic window min(T, 0.5 / (M_C^2 + 1)) with
    measured-contraction halving.  n_paths, degree, ridge, seed govern the
    Monte Carlo backend; workers and chunk the deterministic path splitting.
    """

    tol: float = 1e-10
    max_iter: int = 80
    delta: float | None = None
    n_paths: int = 4000
    degree: int = 4
    ridge: float = 1e-8
    seed: int = 0
    workers: int = 1
    chunk: int = 1024
    max_halvings: int = 8
    contraction_threshold: float = 0.9


@dataclass(frozen=True, eq=False)
class BackwardSolution:
    """Solution pair on the grid: P at every node, Q at left endpoints.

    P has L + 1 times, Q has L.  For stochastic-coefficient models both are
    conditional surfaces in the Brownian value; meta records backend,
    iteration history and seeds.  ens keeps the driving ensemble for audits
    and is never serialized.
    """

    model: CoefficientModel
    grid: TimeGrid
    P: OperatorProcess
    Q: OperatorProcess
    meta: dict
    ens: BrownianEnsemble | None = None

    def P0(self) -> OperatorMatrix:
        return self.P.matrix_at(0, 0.0)

    def value_at(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.P0().entries @ x)

    def eigenvalue_table(self, w: float = 0.0) -> np.ndarray:
        """Eigenvalues of P(t_i) (surfaces read at w), shape (L+1, N)."""
        mats = np.stack([self.P.eval_at(i, w) for i in range(self.P.n_times)])
        mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
        return np.linalg.eigvalsh(mats)

    def q_ks_table(self, w: float = 0.0) -> np.ndarray:
        """Ks norm of Q(t_i) for i < L (surfaces read at w)."""
        weights = self.model.basis.weights
        out = np.empty(self.Q.n_times)
        for i in range(self.Q.n_times):
            q = self.Q.eval_at(i, w)
            out[i] = np.sqrt(2.0 * np.sum(weights[None, :] * q**2))
        return out


# ---------------------------------------------------------------------------
# kernels and quadrature weights


def _nu_kernel(basis: SpectralBasis) -> np.ndarray:
    lam = basis.lambdas
    return -(lam[:, None] + lam[None, :])


def _phi_weights(nu: np.ndarray, h: float):
    """Exponential-trapezoid weights: integral of e^{nu s} times the linear
    interpolant of the source over one step.  Series near nu = 0."""
    z = nu * h
    small = np.abs(z) < 1e-6
    nu_safe = np.where(small, 1.0, nu)
    I0 = np.where(small, h * (1.0 + z / 2.0 + z**2 / 6.0), np.expm1(z) / nu_safe)
    I1 = np.where(
        small,
        h * h * (0.5 + z / 3.0 + z**2 / 8.0),
        (h * np.exp(z) - I0) / nu_safe,
    )
    w1 = I1 / h
    return I0 - w1, w1


def _left_weight(nu: np.ndarray, h: float) -> np.ndarray:
    """Integral of e^{nu s} over one step (left-frozen source weight)."""
    z = nu * h
    small = np.abs(z) < 1e-6
    nu_safe = np.where(small, 1.0, nu)
    return np.where(small, h * (1.0 + z / 2.0 + z**2 / 6.0), np.expm1(z) / nu_safe)


def _embed_diag(vals: np.ndarray) -> np.ndarray:
    """(..., N) diagonals to (..., N, N) matrices."""
    N = vals.shape[-1]
    return np.eye(N) * vals[..., None, :]


# ---------------------------------------------------------------------------
# deterministic backend


def _det_source_nodes(model: CoefficientModel, grid: TimeGrid, i_lo: int, i_hi: int):
    """Per-node diagonals of c and S matrices over window indices."""
    n = i_hi - i_lo + 1
    N = model.basis.N
    c_nodes = np.empty((n, N))
    s_nodes = np.empty((n, N, N))
    for k, i in enumerate(range(i_lo, i_hi + 1)):
        c, _, s = model.diagonals_at(grid.times[i], 0.0)
        c_nodes[k] = c
        s_nodes[k] = np.diag(s)
    return c_nodes, s_nodes


def _det_representation_window(
    model: CoefficientModel,
    grid: TimeGrid,
    i_lo: int,
    i_hi: int,
    final: np.ndarray,
    extra_nodes: np.ndarray | None = None,
) -> np.ndarray:
    """Exact mode-pair integration of the full linear equation on a window.

    The kernel per interval is mu = -(lambda_j + lambda_k) + c_j c_k with c
    read at the interval midpoint (exact for constants, second order for
    schedules); the source S enters through exponential-trapezoid weights.
    extra_nodes, when given, is added to the source at the nodes.
    """
    h = grid.h
    nu = _nu_kernel(model.basis)
    _, s_nodes = _det_source_nodes(model, grid, i_lo, i_hi)
    if extra_nodes is not None:
        s_nodes = s_nodes + extra_nodes
    n = i_hi - i_lo + 1
    N = model.basis.N
    P = np.empty((n, N, N))
    P[-1] = final
    for k in range(n - 2, -1, -1):
        i = i_lo + k
        t_mid = 0.5 * (grid.times[i] + grid.times[i + 1])
        c_mid, _, _ = model.diagonals_at(t_mid, 0.0)
        mu = nu + np.outer(c_mid, c_mid)
        w0, w1 = _phi_weights(mu, h)
        P[k] = np.exp(mu * h) * P[k + 1] + w0 * s_nodes[k] + w1 * s_nodes[k + 1]
    return P


def _det_linear_sweep(
    basis: SpectralBasis,
    h: float,
    sources: np.ndarray,
    final: np.ndarray,
) -> np.ndarray:
    """Backward sweep of the linear equation with semigroup-only kernels.

    sources holds the frozen drift at the nodes; the quadrature integrates its
    linear interpolant against the kernel exactly.
    """
    nu = _nu_kernel(basis)
    E = np.exp(nu * h)
    w0, w1 = _phi_weights(nu, h)
    n = sources.shape[0]
    P = np.empty_like(sources)
    P[-1] = final
    for k in range(n - 2, -1, -1):
        P[k] = E * P[k + 1] + w0 * sources[k] + w1 * sources[k + 1]
    return P


def _det_gamma_window(
    model: CoefficientModel,
    grid: TimeGrid,
    i_lo: int,
    i_hi: int,
    P_block: np.ndarray,
    final: np.ndarray,
) -> np.ndarray:
    """One application of the linearized map on a window, deterministic case."""
    c_nodes, s_nodes = _det_source_nodes(model, grid, i_lo, i_hi)
    sources = c_nodes[:, :, None] * c_nodes[:, None, :] * P_block + s_nodes
    return _det_linear_sweep(model.basis, grid.h, sources, final)


# ---------------------------------------------------------------------------
# Monte Carlo backend


def _chunks(n_paths: int, chunk: int):
    return [(a, min(a + chunk, n_paths)) for a in range(0, n_paths, chunk)]


def _mc_backward_sweep(
    model: CoefficientModel,
    grid: TimeGrid,
    ens: BrownianEnsemble,
    i_lo: int,
    i_hi: int,
    degree: int,
    ridge: float,
    flow_noise: bool,
    source_eval,
    datum_coeffs: np.ndarray,
    datum_scale: float,
    workers: int = 1,
    chunk: int = 1024,
):
    """Chunked backward accumulation with per-time least-squares fits.

    source_eval(i, w_vec) -> (paths, N, N) frozen source at node i; the datum
    surface is evaluated per path at i_hi.  Returns the coefficient block for
    indices i_lo..i_hi plus ensemble statistics of R at i_lo.  Chunks are cut
    at fixed path boundaries and reduced in index order, so results do not
    depend on the worker count.
    """
    basis = model.basis
    N = basis.N
    h = grid.h
    F = degree + 1
    win = i_hi - i_lo
    semig = basis.semigroup_diagonal(h)
    nu = _nu_kernel(basis)
    src_w = _left_weight(nu, h)
    kappa = np.exp(nu * h)
    all_scales = surface_scales(grid, grid.L + 1)

    def run_chunk(bounds):
        a, b = bounds
        W = ens.values[a:b]
        dW = ens.increments[a:b]
        feats_hi = poly_features(W[:, i_hi] / datum_scale, datum_coeffs.shape[0] - 1)
        R = np.tensordot(feats_hi, datum_coeffs, axes=([-1], [0]))
        G1 = np.zeros((win, F, F))
        G2 = np.zeros((win, F, N * N))
        for i in range(i_hi - 1, i_lo - 1, -1):
            src = source_eval(i, W[:, i], slice(a, b))
            if flow_noise:
                c, _, _ = model.diagonals_at(grid.times[i], W[:, i])
                d = semig * (1.0 + c * dW[:, i][:, None])
                R = src * src_w + d[:, :, None] * R * d[:, None, :]
            else:
                R = src * src_w + kappa * R
            k = i - i_lo
            g1, g2 = gram_terms(W[:, i] / all_scales[i], R, degree)
            G1[k] += g1
            G2[k] += g2
        return G1, G2, R.sum(axis=0), (R**2).sum(axis=0)

    bounds_list = _chunks(ens.n_paths, chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(run_chunk, bounds_list))
    else:
        partials = [run_chunk(bo) for bo in bounds_list]

    G1 = partials[0][0].copy()
    G2 = partials[0][1].copy()
    low_sum = partials[0][2].copy()
    low_sumsq = partials[0][3].copy()
    for p in partials[1:]:
        G1 += p[0]
        G2 += p[1]
        low_sum += p[2]
        low_sumsq += p[3]

    coeffs = np.empty((win + 1, F, N, N))
    for k in range(win):
        coeffs[k] = fit_from_gram(G1[k], G2[k], N, ridge)
    scales = all_scales[i_lo : i_hi + 1]
    coeffs[win] = _pad_F(rebase_surface(datum_coeffs, datum_scale, scales[-1:])[0], F)
    n_paths = ens.n_paths
    mean_low = low_sum / n_paths
    var_low = np.maximum(low_sumsq / n_paths - mean_low**2, 0.0)
    se_low = np.sqrt(var_low / n_paths)
    return coeffs, scales, mean_low, se_low


def _pad_F(coeffs: np.ndarray, F: int) -> np.ndarray:
    if coeffs.shape[0] == F:
        return coeffs
    out = np.zeros((F,) + coeffs.shape[1:])
    out[: coeffs.shape[0]] = coeffs
    return out


def _model_source_eval(model: CoefficientModel, grid: TimeGrid):
    """Source = S(t, w) embedded as diagonal matrices."""

    def source_eval(i, w_vec, path_slice):
        _, _, s = model.diagonals_at(grid.times[i], w_vec)
        return _embed_diag(s)

    return source_eval


def _frozen_source_eval(
    model: CoefficientModel,
    grid: TimeGrid,
    P_coeffs: np.ndarray,
    Q_coeffs: np.ndarray | None,
    scales: np.ndarray,
    i_lo: int,
):
    """Source = C' P_in C + S + C' Q_in + Q_in C evaluated from frozen surfaces."""

    def source_eval(i, w_vec, path_slice):
        c, _, s = model.diagonals_at(grid.times[i], w_vec)
        k = i - i_lo
        feats = poly_features(w_vec / scales[k], P_coeffs.shape[1] - 1)
        P_here = np.tensordot(feats, P_coeffs[k], axes=([-1], [0]))
        src = c[:, :, None] * c[:, None, :] * P_here + _embed_diag(s)
        if Q_coeffs is not None:
            Q_here = np.tensordot(feats, Q_coeffs[k], axes=([-1], [0]))
            src = src + (c[:, :, None] + c[:, None, :]) * Q_here
        return src

    return source_eval


def _extract_q_block(
    basis: SpectralBasis,
    grid: TimeGrid,
    ens: BrownianEnsemble,
    P_coeffs: np.ndarray,
    scales: np.ndarray,
    i_lo: int,
    i_hi: int,
    degree: int,
    ridge: float,
) -> np.ndarray:
    """Martingale-increment regression for Q on window indices [i_lo, i_hi).

    Per step: conjugate the next-time surface value one step back through the
    semigroup, center it by its regression on the current Brownian value, and
    regress (increment * dW_i / h) on the same features.
    """
    N = basis.N
    h = grid.h
    kappa = np.exp(_nu_kernel(basis) * h)
    F = degree + 1
    win = i_hi - i_lo
    Q = np.empty((win, F, N, N))
    W = ens.values
    dW = ens.increments
    for i in range(i_lo, i_hi):
        k = i - i_lo
        feats_next = poly_features(W[:, i + 1] / scales[k + 1], P_coeffs.shape[1] - 1)
        Z = kappa * np.tensordot(feats_next, P_coeffs[k + 1], axes=([-1], [0]))
        z_here = W[:, i] / scales[k]
        g1, g2 = gram_terms(z_here, Z, degree)
        pred_coeffs = fit_from_gram(g1, g2, N, ridge)
        feats_here = poly_features(z_here, degree)
        resid = Z - np.tensordot(feats_here, pred_coeffs, axes=([-1], [0]))
        target = resid * (dW[:, i] / h)[:, None, None]
        g1b, g2b = gram_terms(z_here, target, degree)
        Q[k] = fit_from_gram(g1b, g2b, N, ridge)
    return 0.5 * (Q + np.swapaxes(Q, -1, -2))


def extract_Q(
    P: OperatorProcess,
    ens: BrownianEnsemble | None,
    degree: int | None = None,
    ridge: float = 1e-8,
) -> OperatorProcess:
    """Martingale integrand from the solved conditional surfaces.

    Deterministic processes have no martingale part and return exact zeros.
    """
    grid, basis = P.grid, P.basis
    if P.deterministic:
        coeffs = np.zeros((grid.L, 1, basis.N, basis.N))
        return OperatorProcess(grid, basis, coeffs, np.ones(grid.L))
    if ens is None:
        raise InvalidConfigurationError("extract_Q needs the driving ensemble")
    deg = P.degree if degree is None else degree
    coeffs = _extract_q_block(
        basis, grid, ens, P.coeffs, P.scales, 0, grid.L, deg, ridge
    )
    return OperatorProcess(grid, basis, coeffs, P.scales[: grid.L].copy())


# ---------------------------------------------------------------------------
# representation solver


def _zero_Q(grid: TimeGrid, basis: SpectralBasis) -> OperatorProcess:
    return OperatorProcess(
        grid, basis, np.zeros((grid.L, 1, basis.N, basis.N)), np.ones(grid.L)
    )


def _resolve_backend(model: CoefficientModel, backend: str) -> str:
    if backend == "auto":
        return "deterministic-exact" if model.deterministic else "monte-carlo"
    if backend not in ("deterministic-exact", "monte-carlo"):
        raise InvalidConfigurationError(
            f"unknown backend {backend!r}; use deterministic-exact, monte-carlo or auto"
        )
    if backend == "deterministic-exact" and not model.deterministic:
        raise InvalidConfigurationError(
            "deterministic-exact backend requires deterministic coefficients"
        )
    return backend


def _mc_degree(model: CoefficientModel, options: SolverOptions) -> int:
    # a deterministic law needs no regressors beyond the constant
    return 0 if model.deterministic else options.degree


def lyapunov_representation_solve(
    model: CoefficientModel,
    grid: TimeGrid,
    backend: str = "auto",
    n_paths: int | None = None,
    options: SolverOptions | None = None,
) -> BackwardSolution:
    """Solve the backward Lyapunov equation through its flow representation.

    backend 'deterministic-exact' (deterministic coefficients only) integrates
    per mode pair in closed form; 'monte-carlo' samples flows and fits
    conditional surfaces; 'auto' picks by model.
    """
    options = options or SolverOptions()
    if n_paths is not None:
        options = replace(options, n_paths=n_paths)
    backend = _resolve_backend(model, backend)
    basis = model.basis
    M = np.diag(model.diag_m())
    if backend == "deterministic-exact":
        values = _det_representation_window(model, grid, 0, grid.L, M)
        P = OperatorProcess.from_values(grid, basis, values)
        meta = {
            "backend": backend,
            "variant": type(model).__name__,
            "iterations": 1,
            "residuals": [],
            "seeds": {},
        }
        return BackwardSolution(model, grid, P, _zero_Q(grid, basis), meta)

    if options.n_paths < MIN_MC_PATHS:
        raise InvalidConfigurationError(
            f"monte-carlo backend needs n_paths >= {MIN_MC_PATHS}, got {options.n_paths}"
        )
    degree = _mc_degree(model, options)
    if options.n_paths < degree + 1:
        raise InvalidConfigurationError("regression underdetermined: n_paths < basis size")
    ens = sample_paths(grid, options.n_paths, options.seed)
    datum = _pad_F(np.asarray(M)[None], degree + 1)
    coeffs, scales, mean0, se0 = _mc_backward_sweep(
        model,
        grid,
        ens,
        0,
        grid.L,
        degree,
        options.ridge,
        True,
        _model_source_eval(model, grid),
        datum,
        1.0,
        workers=options.workers,
        chunk=options.chunk,
    )
    P = OperatorProcess(grid, basis, coeffs, scales)
    Q = extract_Q(P, ens, degree=degree, ridge=options.ridge) if not model.deterministic \
        else _zero_Q(grid, basis)
    meta = {
        "backend": backend,
        "variant": type(model).__name__,
        "n_paths": options.n_paths,
        "degree": degree,
        "ridge": options.ridge,
        "iterations": 1,
        "residuals": [],
        "seeds": {"paths": options.seed},
        "P0_mean": mean0.tolist(),
        "P0_se": se0.tolist(),
    }
    return BackwardSolution(model, grid, P, Q, meta, ens=ens)


# ---------------------------------------------------------------------------
# linearized map and Picard iteration


def gamma_apply(
    P_in: OperatorProcess,
    model: CoefficientModel,
    options: SolverOptions | None = None,
    Q_in: OperatorProcess | None = None,
    ens: BrownianEnsemble | None = None,
) -> tuple[OperatorProcess, OperatorProcess]:
    """One application of the linearized backward map on the full grid.

    The drift C' P C (plus the martingale coupling C' Q + Q C when surfaces
    carry one) is frozen at the input and the remaining linear equation is
    solved with semigroup kernels.  Returns the new pair (P_out, Q_out).
    """
    options = options or SolverOptions()
    grid, basis = P_in.grid, P_in.basis
    M = np.diag(model.diag_m())
    if model.deterministic and P_in.deterministic:
        out = _det_gamma_window(model, grid, 0, grid.L, P_in.values(), M)
        return (
            OperatorProcess.from_values(grid, basis, out),
            _zero_Q(grid, basis),
        )
    degree = options.degree
    if options.n_paths < max(MIN_MC_PATHS, degree + 1):
        raise InvalidConfigurationError(
            "regression underdetermined: n_paths below feature count or floor"
        )
    if ens is None:
        ens = sample_paths(grid, options.n_paths, options.seed)
    if Q_in is None:
        Q_in = extract_Q(P_in, ens, degree=P_in.degree, ridge=options.ridge)
    F = degree + 1
    scales = surface_scales(grid, grid.L + 1)
    P_co = _pad_F_block(P_in.coeffs, F)
    Q_co = _pad_F_block(Q_in.coeffs, F)
    source_eval = _frozen_source_eval(model, grid, P_co, Q_co, scales, 0)
    datum = _pad_F(np.asarray(M)[None], F)
    coeffs, out_scales, _, _ = _mc_backward_sweep(
        model, grid, ens, 0, grid.L, degree, options.ridge, False,
        source_eval, datum, 1.0, workers=options.workers, chunk=options.chunk,
    )
    P_out = OperatorProcess(grid, basis, coeffs, out_scales)
    Q_out = extract_Q(P_out, ens, degree=degree, ridge=options.ridge)
    return P_out, Q_out


def _pad_F_block(coeffs: np.ndarray, F: int) -> np.ndarray:
    if coeffs.shape[1] == F:
        return coeffs
    out = np.zeros((coeffs.shape[0], F) + coeffs.shape[2:])
    out[:, : coeffs.shape[1]] = coeffs
    return out


def _det_block_distance(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.max(batched_opH(A - B)))


def _surface_block_distance(
    A: np.ndarray, B: np.ndarray, scales: np.ndarray, W_cols: np.ndarray
) -> float:
    """sup over times of the root mean square Frobenius gap at the sampled paths."""
    worst = 0.0
    for k in range(A.shape[0]):
        feats = poly_features(W_cols[:, k] / scales[k], A.shape[1] - 1)
        diff = np.tensordot(feats, A[k] - B[k], axes=([-1], [0]))
        worst = max(worst, float(np.sqrt(np.mean(np.sum(diff**2, axis=(-2, -1))))))
    return worst


class _WindowRetry(Exception):
    def __init__(self, residuals):
        self.residuals = residuals


def _auto_delta(model: CoefficientModel, grid: TimeGrid) -> float:
    return min(grid.T, 0.5 / (model.bounds.M_C**2 + 1.0))


def _plan_windows(L: int, win_steps: int):
    out = []
    hi = L
    while hi > 0:
        lo = max(0, hi - win_steps)
        out.append((lo, hi))
        hi = lo
    return out


def picard_solve(
    model: CoefficientModel,
    grid: TimeGrid,
    options: SolverOptions | None = None,
) -> BackwardSolution:
    """Fixed point of the linearized map by windowed backward iteration.

    Each window starts from the final datum held constant, applies the map
    until the sup-distance between iterates falls under tol, and passes its
    value at the window start to the next window.  If a measured contraction
    ratio reaches the threshold the window length is halved and the whole
    sweep restarts; the count of halvings is capped.
    """
    options = options or SolverOptions()
    basis = model.basis
    M = np.diag(model.diag_m())
    delta = options.delta if options.delta is not None else _auto_delta(model, grid)
    if not (0 < delta <= grid.T + 1e-12):
        raise InvalidConfigurationError(f"window delta must lie in (0, T], got {delta}")
    stochastic = not model.deterministic
    ens = None
    degree = 0
    if stochastic:
        degree = options.degree
        if options.n_paths < max(MIN_MC_PATHS, degree + 1):
            raise InvalidConfigurationError(
                "regression underdetermined: n_paths below feature count or floor"
            )
        ens = sample_paths(grid, options.n_paths, options.seed)
    F = degree + 1
    all_scales = surface_scales(grid, grid.L + 1)

    win_steps = max(1, int(round(delta / grid.h)))
    halvings = 0
    while True:
        try:
            windows_meta = []
            P_full = np.zeros((grid.L + 1, F, basis.N, basis.N))
            datum_co = _pad_F(np.asarray(M)[None], F)
            datum_scale = 1.0
            for (i_lo, i_hi) in _plan_windows(grid.L, win_steps):
                block, datum_co, datum_scale, wmeta = _picard_window(
                    model, grid, ens, i_lo, i_hi, degree, options,
                    datum_co, datum_scale, all_scales,
                )
                top = i_hi + 1 if i_hi == grid.L else i_hi
                P_full[i_lo:top] = block[: top - i_lo]
                windows_meta.append(wmeta)
            break
        except _WindowRetry as retry:
            halvings += 1
            if win_steps == 1 or halvings > options.max_halvings:
                raise NonConvergenceError(
                    f"picard windows failed to contract after {halvings - 1} halvings",
                    residuals=retry.residuals,
                ) from None
            win_steps = max(1, win_steps // 2)

    scales = all_scales if stochastic else np.ones(grid.L + 1)
    P = OperatorProcess(grid, basis, P_full, scales)
    Q = extract_Q(P, ens, degree=degree, ridge=options.ridge) if stochastic \
        else _zero_Q(grid, basis)
    meta = {
        "backend": "picard-monte-carlo" if stochastic else "picard-deterministic",
        "variant": type(model).__name__,
        "delta": win_steps * grid.h,
        "win_steps": win_steps,
        "halvings": halvings,
        "windows": windows_meta,
        "seeds": {"paths": options.seed} if stochastic else {},
        "tol": options.tol,
    }
    if stochastic:
        meta.update({"n_paths": options.n_paths, "degree": degree, "ridge": options.ridge})
    return BackwardSolution(model, grid, P, Q, meta, ens=ens)


def _picard_window(
    model, grid, ens, i_lo, i_hi, degree, options, datum_co, datum_scale, all_scales
):
    basis = model.basis
    F = degree + 1
    win = i_hi - i_lo
    scales = all_scales[i_lo : i_hi + 1]
    stochastic = ens is not None
    if stochastic:
        P_cur = rebase_surface(datum_co, datum_scale, scales)
        Q_cur = np.zeros((win, F, basis.N, basis.N))
    else:
        P_cur = np.broadcast_to(datum_co[0], (win + 1, basis.N, basis.N)).copy()
    final = None if stochastic else datum_co[0]
    residuals: list[float] = []
    converged = False
    for _ in range(options.max_iter):
        if stochastic:
            src = _frozen_source_eval(model, grid, P_cur, Q_cur, scales, i_lo)
            P_new, _, _, _ = _mc_backward_sweep(
                model, grid, ens, i_lo, i_hi, degree, options.ridge, False,
                src, datum_co, datum_scale,
                workers=options.workers, chunk=options.chunk,
            )
            res = _surface_block_distance(
                P_new, P_cur, scales, ens.values[:, i_lo : i_hi + 1]
            )
        else:
            P_new = _det_gamma_window(model, grid, i_lo, i_hi, P_cur, final)
            res = _det_block_distance(P_new, P_cur)
        if residuals and res >= options.tol and res >= options.contraction_threshold * residuals[-1]:
            residuals.append(res)
            raise _WindowRetry(residuals)
        residuals.append(res)
        P_cur = P_new
        if stochastic:
            Q_cur = _extract_q_block(
                basis, grid, ens, P_cur, scales, i_lo, i_hi, degree, options.ridge
            )
        if res < options.tol:
            converged = True
            break
    if not converged:
        raise NonConvergenceError(
            f"picard window [{i_lo}, {i_hi}] hit max_iter={options.max_iter}",
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
        block, new_datum = P_cur, P_cur[0]
    else:
        block, new_datum = P_cur[:, None], _pad_F(P_cur[0][None], F)
    return block, new_datum, float(scales[0]), wmeta


# ---------------------------------------------------------------------------
# audits


def apriori_audit(
    solution: BackwardSolution,
    model: CoefficientModel,
    deltas: list[float],
    subsample: int = 1000,
    weak: bool = False,
) -> dict:
    """Energy inequality on shrinking windows [T - delta, T].

    LHS: sup-norm of P squared plus the time integral of the Ks norm of Q
    squared (ensemble means for stochastic solutions, evaluated on a fixed
    subsample of paths).  RHS bracket: |M|^2 plus delta times the integrated
    squared sup-norm of S; the weak variant weights the source integral by
    delta^{1 - 2 rho} and measures S in the K norm.
    """
    grid, basis = solution.grid, solution.model.basis
    weights = basis.weights
    M_op = norm(OperatorMatrix(basis, np.diag(model.diag_m()), symmetric=True), "opH")
    ens = solution.ens
    stochastic = not solution.P.deterministic
    if stochastic and ens is None:
        raise InvalidConfigurationError("stochastic audit needs the solution ensemble")
    n_sub = min(subsample, ens.n_paths) if stochastic else 1
    rows = []
    for delta in sorted(deltas, reverse=True):
        steps = min(grid.L, max(1, int(round(delta / grid.h))))
        i_lo = grid.L - steps
        d_eff = steps * grid.h
        idx = range(i_lo, grid.L + 1)
        if stochastic:
            W = ens.values[:n_sub]
            sup_sq = np.zeros(n_sub)
            q_int = np.zeros(n_sub)
            s_int = np.zeros(n_sub)
            for i in idx:
                P_i = solution.P.eval_at(i, W[:, i])
                sup_sq = np.maximum(sup_sq, batched_opH(P_i) ** 2)
                if i < grid.L:
                    Q_i = solution.Q.eval_at(i, W[:, i])
                    q_int += grid.h * 2.0 * np.sum(weights[None, :] * Q_i**2, axis=(-2, -1))
                    _, _, s = model.diagonals_at(grid.times[i], W[:, i])
                    if weak:
                        s_int += grid.h * 2.0 * np.sum(weights * s**2, axis=-1)
                    else:
                        s_int += grid.h * np.max(np.abs(s), axis=-1) ** 2
            lhs = float(np.mean(sup_sq) + np.mean(q_int))
            source_term = float(np.mean(s_int))
        else:
            P_vals = solution.P.values()[i_lo:]
            sup_sq = float(np.max(batched_opH(P_vals)) ** 2)
            s_int = 0.0
            for i in range(i_lo, grid.L):
                _, _, s = model.diagonals_at(grid.times[i], 0.0)
                if weak:
                    s_int += grid.h * 2.0 * float(np.sum(weights * s**2))
                else:
                    s_int += grid.h * float(np.max(np.abs(s))) ** 2
            lhs = sup_sq
            source_term = s_int
        weight = d_eff ** (1.0 - 2.0 * basis.rho) if weak else d_eff
        rhs = M_op**2 + weight * source_term
        rows.append(
            {
                "delta": d_eff,
                "lhs": lhs,
                "rhs": rhs,
                "ratio": lhs / rhs if rhs > 0 else None,
            }
        )
    finite = all(np.isfinite(r["lhs"]) for r in rows)
    ratios = [r["ratio"] for r in rows if r["ratio"] is not None]
    return {
        "weak": weak,
        "rows": rows,
        "lhs_finite": finite,
        "max_ratio": max(ratios) if ratios else None,
        "subsample": n_sub if stochastic else None,
    }


def jn_stability_audit(
    model: CoefficientModel,
    grid: TimeGrid,
    n_list: list[float],
    eps: float,
    delta: float,
    options: SolverOptions | None = None,
    tol: float = 1e-3,
) -> dict:
    """Distance between the solution and its regularized approximants.

    For each n the final datum, the source and the frozen C' P C term are
    conjugated by J_n and the linear equation is re-solved; the audit reports
    the sup distance over [T - delta, T - eps] (interior) and at t = T
    (endpoint, not controlled when the datum is not K-regular).
    Deterministic-coefficient models only.
    """
    if not model.deterministic:
        raise InvalidConfigurationError("jn_stability_audit supports deterministic models")
    if not (0 <= eps < delta <= grid.T + 1e-12):
        raise InvalidConfigurationError(f"need 0 <= eps < delta <= T, got eps={eps} delta={delta}")
    options = options or SolverOptions()
    tight = replace(options, tol=min(options.tol, 1e-12))
    base = picard_solve(model, grid, tight)
    P_star = base.P.values()
    basis = model.basis
    lam = basis.lambdas
    c_nodes, s_nodes = _det_source_nodes(model, grid, 0, grid.L)
    M = np.diag(model.diag_m())
    i_lo = grid.L - max(1, int(round(delta / grid.h)))
    i_hi = grid.L - int(round(eps / grid.h))
    i_lo = max(0, i_lo)
    distances = {}
    endpoint = {}
    for n in n_list:
        jn = n / (n + lam)
        jn2 = np.outer(jn, jn)
        sources = (
            c_nodes[:, :, None] * c_nodes[:, None, :] * (jn2 * P_star)
            + jn2 * s_nodes
        )
        approx = _det_linear_sweep(basis, grid.h, sources, jn2 * M)
        gap = batched_opH(approx - P_star)
        distances[n] = float(np.max(gap[i_lo : i_hi + 1]))
        endpoint[n] = float(gap[grid.L])
    seq = [distances[n] for n in n_list]
    monotone = all(seq[i + 1] < seq[i] for i in range(len(seq) - 1))
    return {
        "n_list": list(n_list),
        "distances": {str(n): distances[n] for n in n_list},
        "endpoint_distances": {str(n): endpoint[n] for n in n_list},
        "interval": [float(grid.times[i_lo]), float(grid.times[i_hi])],
        "monotone": monotone,
        "largest_below_tol": seq[-1] <= tol,
        "tol": tol,
    }


def weak_source_solve(
    model: CoefficientModel,
    grid: TimeGrid,
    backend: str = "auto",
    options: SolverOptions | None = None,
) -> BackwardSolution:
    """Representation solve for sources that are only K-integrable.

    Same pipeline as lyapunov_representation_solve; positivity of P is not
    asserted, and the matching audit weights the source by delta^{1 - 2 rho}
    in the K norm.
    """
    sol = lyapunov_representation_solve(model, grid, backend=backend, options=options)
    sol.meta["variant_hypothesis"] = "weak-source"
    return sol
