"""Operator-valued processes on the grid and the conditional-mean surfaces.

A process holds, per grid time, a polynomial in z = w / scale_i with matrix
coefficients; w is the driving Brownian value.  Degree zero recovers plain
deterministic arrays, higher degrees are the least-squares conditional
expectation surfaces used by the Monte Carlo backend.  Scales follow the
standard deviation sqrt(t_i) so the feature matrices stay well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidConfigurationError
from .grid import TimeGrid
from .spectral import OperatorMatrix, SpectralBasis

__all__ = [
    "OperatorProcess",
    "poly_features",
    "poly_feature_derivs",
    "fit_from_gram",
    "gram_terms",
    "batched_opH",
    "surface_scales",
]

DEFAULT_RIDGE = 1e-8


def surface_scales(grid: TimeGrid, n_times: int) -> np.ndarray:
    """Feature scale per grid index, sqrt(max(t_i, h))."""
    t = grid.times[:n_times]
    return np.sqrt(np.maximum(t, grid.h))


def poly_features(z: np.ndarray, degree: int) -> np.ndarray:
    """Vandermonde block [1, z, ..., z^degree] along a new last axis."""
    z = np.asarray(z, dtype=float)
    return np.stack([z**f for f in range(degree + 1)], axis=-1)


def poly_feature_derivs(z: np.ndarray, degree: int) -> np.ndarray:
    """d/dz of the features: [0, 1, 2z, ..., d z^{d-1}]."""
    z = np.asarray(z, dtype=float)
    cols = [np.zeros_like(z)]
    for f in range(1, degree + 1):
        cols.append(f * z ** (f - 1))
    return np.stack(cols, axis=-1)


def gram_terms(z: np.ndarray, targets: np.ndarray, degree: int):
    """Normal-equation contributions for one batch of paths.

    z has shape (P,), targets (P, N, N).  Returns (X'X, X'Y) with Y flattened
    to (P, N*N); summing these over fixed-order batches keeps fits bitwise
    reproducible under any worker split.
    """
    X = poly_features(z, degree)
    P, F = X.shape
    Y = targets.reshape(P, -1)
    return X.T @ X, X.T @ Y


def fit_from_gram(G1: np.ndarray, G2: np.ndarray, N: int, ridge: float = DEFAULT_RIDGE):
    """Solve the ridge normal equations; returns coefficients (F, N, N)."""
    F = G1.shape[0]
    beta = np.linalg.solve(G1 + ridge * np.eye(F), G2)
    return beta.reshape(F, N, N)


def batched_opH(arr: np.ndarray) -> np.ndarray:
    """Largest singular value over the trailing (N, N) axes."""
    return np.linalg.matrix_norm(arr, ord=2)


@dataclass(frozen=True, eq=False)
class OperatorProcess:
    """Per-time matrix polynomial surfaces P(t_i, w) = sum_f coeffs[i, f] (w/scale_i)^f.

    coeffs has shape (n_times, F, N, N); n_times may be L + 1 (state-like
    processes) or L (integrands read at left endpoints).  F = 1 means the
    process is deterministic and eval_at ignores w.
    """

    grid: TimeGrid
    basis: SpectralBasis
    coeffs: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 4 or c.shape[2:] != (self.basis.N, self.basis.N):
            raise InvalidConfigurationError(
                f"coeffs must be (n_times, F, N, N), got {c.shape}"
            )
        if c.shape[0] not in (self.grid.L, self.grid.L + 1):
            raise InvalidConfigurationError(
                f"process length {c.shape[0]} fits neither L nor L+1 of {self.grid}"
            )
        s = np.asarray(self.scales, dtype=float)
        if s.shape != (c.shape[0],) or np.any(s <= 0):
            raise InvalidConfigurationError("scales must be positive, one per time")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "scales", s)

    @property
    def n_times(self) -> int:
        return self.coeffs.shape[0]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def deterministic(self) -> bool:
        return self.coeffs.shape[1] == 1

    @classmethod
    def from_values(cls, grid: TimeGrid, basis: SpectralBasis, values: np.ndarray):
        v = np.asarray(values, dtype=float)
        return cls(grid, basis, v[:, None, :, :], np.ones(v.shape[0]))

    @classmethod
    def constant(cls, grid: TimeGrid, basis: SpectralBasis, matrix: np.ndarray, n_times: int):
        v = np.broadcast_to(np.asarray(matrix, dtype=float), (n_times, basis.N, basis.N))
        return cls.from_values(grid, basis, v.copy())

    def values(self) -> np.ndarray:
        """Deterministic view (n_times, N, N); requires degree 0."""
        if not self.deterministic:
            raise ContractViolationError("values() needs a deterministic process")
        return self.coeffs[:, 0]

    def eval_at(self, i: int, w=0.0) -> np.ndarray:
        """Surface value at grid index i and Brownian value(s) w."""
        feats = poly_features(np.asarray(w, dtype=float) / self.scales[i], self.degree)
        return np.tensordot(feats, self.coeffs[i], axes=([-1], [0]))

    def deriv_at(self, i: int, w=0.0) -> np.ndarray:
        """d/dw of the surface at grid index i; zero for deterministic processes."""
        z = np.asarray(w, dtype=float) / self.scales[i]
        dfeats = poly_feature_derivs(z, self.degree) / self.scales[i]
        return np.tensordot(dfeats, self.coeffs[i], axes=([-1], [0]))

    def matrix_at(self, i: int, w: float = 0.0) -> OperatorMatrix:
        ent = self.eval_at(i, float(w))
        sym = np.triu(0.5 * (ent + ent.T)) + np.triu(0.5 * (ent + ent.T), 1).T
        return OperatorMatrix(self.basis, sym, symmetric=True)

    def sup_opH_deterministic(self) -> float:
        return float(np.max(batched_opH(self.values())))


def rebase_surface(
    base_coeffs: np.ndarray, base_scale: float, target_scales: np.ndarray
) -> np.ndarray:
    """Spread one surface (F, N, N) over several times with exact rescaling.

    The returned block (n, F, N, N) represents the same function of w at every
    target time: coefficients pick up the factor (scale_i / base_scale)^f.
    """
    F = base_coeffs.shape[0]
    ratios = (np.asarray(target_scales, dtype=float)[:, None] / base_scale) ** np.arange(F)[None, :]
    return base_coeffs[None, :, :, :] * ratios[:, :, None, None]
