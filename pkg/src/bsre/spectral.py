"""Spectral basis, operator matrices and the norms attached to the scale of spaces.

All operators live at a finite truncation level N in the eigenbasis of a
self-adjoint negative operator with eigenvalues -lambda_k.  The semigroup is
diagonal there, e^{tA} e_k = e^{-lambda_k t} e_k, so conjugation by it is an
entrywise kernel.  The weighted norms use the factors lambda_k^{-2 rho} with
rho in (1/4, 1/2); the summability of those factors is what makes the
Hilbert-Schmidt-type norms meaningful as N grows.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolationError,
    DomainError,
    InvalidConfigurationError,
)

__all__ = [
    "PSD_TOL",
    "ASYMMETRY_WARN",
    "SpectralBasis",
    "laplacian_basis",
    "OperatorMatrix",
    "psd_repair",
    "identity",
    "zeros",
    "diagonal",
    "semigroup_conjugate",
    "norm",
    "jn_factors",
    "jn_conjugate",
    "smoothing_audit",
    "dump_matrix_csv",
    "load_matrix_csv",
]

PSD_TOL = 1e-10
ASYMMETRY_WARN = 1e-9

RHO_LOW = 0.25
RHO_HIGH = 0.5


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Truncation of the eigenbasis: N modes, eigenvalues lambda_k, weight exponent rho.

    Invariants checked on construction: N >= 1, 0 < lambda_1 <= ... <= lambda_N,
    and rho strictly inside (1/4, 1/2).
    """

    N: int
    lambdas: np.ndarray
    rho: float

    def __post_init__(self):
        if self.N < 1:
            raise InvalidConfigurationError(f"basis needs at least one mode, got N={self.N}")
        if not (RHO_LOW < self.rho < RHO_HIGH):
            raise InvalidConfigurationError(
                f"rho={self.rho} outside the open interval (1/4, 1/2) required for "
                "summable weights"
            )
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.shape != (self.N,):
            raise InvalidConfigurationError(
                f"lambdas must have shape ({self.N},), got {lam.shape}"
            )
        if not np.all(np.isfinite(lam)) or lam[0] <= 0.0:
            raise InvalidConfigurationError("eigenvalues must be finite and positive")
        if np.any(np.diff(lam) < 0.0):
            raise InvalidConfigurationError("eigenvalues must be nondecreasing")
        object.__setattr__(self, "lambdas", lam)

    @property
    def weights(self) -> np.ndarray:
        """Per-mode weights lambda_k^{-2 rho}."""
        return self.lambdas ** (-2.0 * self.rho)

    def tail_weight(self) -> float:
        """Sum of the weights lambda_k^{-2 rho} up to the truncation level."""
        return float(np.sum(self.weights))

    def semigroup_diagonal(self, t: float) -> np.ndarray:
        """Diagonal of e^{tA}, entries e^{-lambda_k t}."""
        if t < 0.0:
            raise DomainError(f"semigroup time must be nonnegative, got {t}")
        return np.exp(-self.lambdas * t)

    def same_as(self, other: "SpectralBasis") -> bool:
        return (
            self.N == other.N
            and self.rho == other.rho
            and np.array_equal(self.lambdas, other.lambdas)
        )


def laplacian_basis(N: int, rho: float) -> SpectralBasis:
    """Dirichlet Laplacian truncation on an interval: lambda_k = k^2, k = 1..N."""
    if N < 1:
        raise InvalidConfigurationError(f"laplacian_basis needs N >= 1, got {N}")
    k = np.arange(1, N + 1, dtype=float)
    return SpectralBasis(N=N, lambdas=k**2, rho=float(rho))


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Bounded operator at truncation: entries G[j, k] = <G e_k, e_j>.

    The symmetric flag is only trustworthy when set through symmetrize() or a
    symmetric constructor; the constructor rejects a claimed-symmetric matrix
    whose entries are not exactly symmetric.
    """

    basis: SpectralBasis
    entries: np.ndarray
    symmetric: bool = False
    psd: bool | None = None

    def __post_init__(self):
        ent = np.asarray(self.entries, dtype=float)
        N = self.basis.N
        if ent.shape != (N, N):
            raise InvalidConfigurationError(f"entries must be {N}x{N}, got {ent.shape}")
        if not np.all(np.isfinite(ent)):
            raise InvalidConfigurationError("entries must be finite")
        if self.symmetric and not np.array_equal(ent, ent.T):
            raise ContractViolationError(
                "symmetric flag requires exactly symmetric entries; use symmetrize()"
            )
        if self.psd and not self.symmetric:
            raise ContractViolationError("psd flag requires the symmetric flag")
        object.__setattr__(self, "entries", ent)

    def symmetrize(self, warn_above: float = ASYMMETRY_WARN) -> "OperatorMatrix":
        """Return (G + G') / 2 with the symmetric flag set.

        Emits a warning when the discarded asymmetry exceeds warn_above; that
        signals an upstream defect rather than roundoff.
        """
        asym = float(np.max(np.abs(self.entries - self.entries.T), initial=0.0))
        if asym > warn_above:
            warnings.warn(
                f"symmetrize() discarded asymmetry {asym:.3e} above {warn_above:.1e}",
                RuntimeWarning,
                stacklevel=2,
            )
        sym = 0.5 * (self.entries + self.entries.T)
        # enforce exact symmetry against roundoff in the addition
        sym = np.triu(sym) + np.triu(sym, 1).T
        return OperatorMatrix(self.basis, sym, symmetric=True, psd=self.psd)

    def min_eigenvalue(self) -> float:
        if not self.symmetric:
            raise ContractViolationError("min_eigenvalue requires a symmetric operator")
        return float(np.linalg.eigvalsh(self.entries)[0])

    def is_psd(self, tol: float = PSD_TOL) -> bool:
        return self.min_eigenvalue() >= -tol

    def checked_psd(self, tol: float = PSD_TOL) -> "OperatorMatrix":
        """Copy with the psd flag set; raises if the smallest eigenvalue < -tol."""
        m = self.min_eigenvalue()
        if m < -tol:
            raise ContractViolationError(
                f"operator fails positivity: min eigenvalue {m:.3e} < -{tol:.1e}"
            )
        return OperatorMatrix(self.basis, self.entries, symmetric=True, psd=True)

    def psd_repaired(self, tol: float = PSD_TOL) -> "OperatorMatrix":
        mat = psd_repair(self.entries, tol)
        return OperatorMatrix(self.basis, mat, symmetric=True, psd=True)

    def transpose(self) -> "OperatorMatrix":
        if self.symmetric:
            return self
        return OperatorMatrix(self.basis, self.entries.T.copy())

    def __matmul__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        if not self.basis.same_as(other.basis):
            raise ContractViolationError("operator product across different bases")
        return OperatorMatrix(self.basis, self.entries @ other.entries)


def psd_repair(mat: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Clip eigenvalues in [-tol, 0) to zero; reject anything more negative.

    Roundoff-sized negativity is repaired; a genuinely negative eigenvalue
    signals a solver failure and raises instead of being masked.
    Accepts a single symmetric matrix or a stacked (..., N, N) batch.
    """
    arr = np.asarray(mat, dtype=float)
    sym = 0.5 * (arr + np.swapaxes(arr, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    low = float(vals.min()) if vals.size else 0.0
    if low < -tol:
        raise ContractViolationError(
            f"positivity repair refused: min eigenvalue {low:.3e} < -{tol:.1e}"
        )
    if low >= 0.0:
        return sym
    clipped = np.clip(vals, 0.0, None)
    rebuilt = np.einsum("...jk,...k,...lk->...jl", vecs, clipped, vecs)
    # reconstruction is symmetric only to roundoff; the contract wants exact
    upper = np.triu(rebuilt)
    return upper + np.swapaxes(np.triu(rebuilt, 1), -1, -2)


def identity(basis: SpectralBasis) -> OperatorMatrix:
    return OperatorMatrix(basis, np.eye(basis.N), symmetric=True, psd=True)


def zeros(basis: SpectralBasis) -> OperatorMatrix:
    return OperatorMatrix(basis, np.zeros((basis.N, basis.N)), symmetric=True, psd=True)


def diagonal(basis: SpectralBasis, values: np.ndarray) -> OperatorMatrix:
    """Diagonal operator; psd flag set from the sign of the entries."""
    v = np.broadcast_to(np.asarray(values, dtype=float), (basis.N,))
    return OperatorMatrix(
        basis, np.diag(v), symmetric=True, psd=bool(np.all(v >= 0.0)) or None
    )


def semigroup_conjugate(G: OperatorMatrix, t: float) -> OperatorMatrix:
    """e^{tA'} G e^{tA}: entrywise kernel e^{-(lambda_j + lambda_k) t}.

    Congruence with a positive diagonal, so the symmetric and psd flags carry over.
    """
    if t < 0.0:
        raise DomainError(f"semigroup_conjugate needs t >= 0, got {t}")
    d = G.basis.semigroup_diagonal(t)
    ent = G.entries * np.outer(d, d)
    return OperatorMatrix(G.basis, ent, symmetric=G.symmetric, psd=G.psd)


def norm(G: OperatorMatrix, which: str = "opH") -> float:
    """Norms on the truncation.

    which:
      opH  operator norm on H (largest singular value)
      HS   Hilbert-Schmidt norm
      K    sum_k lambda_k^{-2 rho} (|G e_k|^2 + |G' e_k|^2), square root
      Ks   symmetric-case K norm, 2 sum_k lambda_k^{-2 rho} |G e_k|^2, square root
    """
    ent = G.entries
    if which == "opH":
        return float(np.linalg.norm(ent, 2))
    if which == "HS":
        return float(np.linalg.norm(ent, "fro"))
    w = G.basis.weights
    col_sq = np.sum(ent**2, axis=0)
    if which == "K":
        row_sq = np.sum(ent**2, axis=1)
        return float(np.sqrt(np.sum(w * (col_sq + row_sq))))
    if which == "Ks":
        if not G.symmetric:
            raise ContractViolationError("Ks norm applies to symmetric operators only")
        return float(np.sqrt(2.0 * np.sum(w * col_sq)))
    raise InvalidConfigurationError(f"unknown norm kind {which!r}")


def jn_factors(basis: SpectralBasis, n: float) -> np.ndarray:
    """Diagonal of the Yosida-type regularizer J_n, entries n / (n + lambda_k)."""
    if not (n > 0):
        raise DomainError(f"regularizer index must be positive, got {n}")
    return n / (n + basis.lambdas)


def jn_conjugate(G: OperatorMatrix, n: float) -> OperatorMatrix:
    """J_n G J_n with J_n = diag(n / (n + lambda_k)).  Flags carry over."""
    d = jn_factors(G.basis, n)
    ent = G.entries * np.outer(d, d)
    return OperatorMatrix(G.basis, ent, symmetric=G.symmetric, psd=G.psd)


def smoothing_audit(basis: SpectralBasis, t_grid: np.ndarray) -> dict:
    """Check t^rho |e^{tA}|_{L(H,V)} <= 1 on a grid of positive times.

    At truncation |e^{tA}|_{L(H,V)} = max_k lambda_k^rho e^{-lambda_k t}, and the
    audited quantity never exceeds sup_{x>0} x^rho e^{-x} = (rho/e)^rho < 1.
    The V' -> H smoothing constant coincides with this one on a diagonal
    truncation, so the report's observed M_A equals the same maximum.
    """
    t = np.asarray(t_grid, dtype=float)
    if t.size == 0:
        raise InvalidConfigurationError("smoothing_audit needs a nonempty time grid")
    if np.any(t <= 0.0):
        raise DomainError("smoothing_audit needs strictly positive times")
    rho = basis.rho
    lam = basis.lambdas
    ratios = (t[:, None] ** rho) * (lam[None, :] ** rho) * np.exp(-np.outer(t, lam))
    flat = int(np.argmax(ratios))
    it, ik = np.unravel_index(flat, ratios.shape)
    max_ratio = float(ratios[it, ik])
    per_time = np.max(ratios, axis=1)
    return {
        "max_ratio": max_ratio,
        "argmax_t": float(t[it]),
        "argmax_mode": int(ik + 1),
        "analytic_sup": float((rho / np.e) ** rho),
        "bound": 1.0,
        "passed": bool(max_ratio <= 1.0),
        "observed_M_A": max_ratio,
        "assumed_M_A": 1.0,
        "t_grid": t.tolist(),
        "per_time_max": per_time.tolist(),
    }


def dump_matrix_csv(G: OperatorMatrix, path) -> None:
    """Row-major CSV block with a one-line header `N,rho`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([G.basis.N, format(G.basis.rho, ".17g")])
        for row in G.entries:
            writer.writerow([format(x, ".17g") for x in row])


def load_matrix_csv(path, basis: SpectralBasis) -> OperatorMatrix:
    """Read a matrix written by dump_matrix_csv; header must match the basis."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidConfigurationError(f"{path}: empty matrix file")
    n_decl, rho_decl = int(rows[0][0]), float(rows[0][1])
    if n_decl != basis.N or rho_decl != basis.rho:
        raise InvalidConfigurationError(
            f"{path}: header ({n_decl},{rho_decl}) does not match basis "
            f"({basis.N},{basis.rho})"
        )
    ent = np.array([[float(x) for x in row] for row in rows[1:]], dtype=float)
    sym = bool(ent.size and np.array_equal(ent, ent.T))
    return OperatorMatrix(basis, ent, symmetric=sym)
