"""Coefficient models, the scalar field grammar, and Brownian driving paths.

Every model variant keeps C, B, S diagonal in the spectral basis, which is the
regime where the backward equations stay tractable at truncation:

  ConstantDiagonal     per-mode constants c_k, b_k, s_k, m_k
  DeterministicSchedule  per-mode fields of t only, evaluated on the grid
  ScalarRandomField    scalar fields c(t, w), s(t, w) times the identity,
                       plus per-mode constants b_k, m_k

Fields come from a deliberately small grammar (constants, t, w, sin, cos, exp,
sums, products, unary minus) so configs stay serializable and checkable.
Declared bound violations raise at evaluation time; nothing is clipped.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    BoundViolationError,
    InvalidConfigurationError,
)
from .grid import TimeGrid
from .spectral import OperatorMatrix, SpectralBasis, diagonal, norm

__all__ = [
    "FieldExpression",
    "Bounds",
    "ConstantDiagonal",
    "DeterministicSchedule",
    "ScalarRandomField",
    "CoefficientModel",
    "BrownianPath",
    "BrownianEnsemble",
    "sample_paths",
    "eval_coefficients",
    "validate_model",
]

_ALLOWED_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}


class FieldExpression:
    """Compiled scalar field over (t, w) from the restricted grammar.

    Allowed: numeric constants, the names t and w, sin/cos/exp with one
    argument, sums, differences, products and unary minus.  Everything else is
    rejected at parse time with the offending construct named.
    """

    def __init__(self, source: str):
        self.source = source
        try:
            tree = ast.parse(source, mode="eval")
        except SyntaxError as exc:
            raise InvalidConfigurationError(f"field {source!r}: {exc.msg}") from exc
        self._check(tree.body)
        self._code = compile(tree, f"<field {source!r}>", "eval")
        names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
        self.uses_w = "w" in names
        self.uses_t = "t" in names

    def _check(self, node: ast.AST) -> None:
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)):
                raise InvalidConfigurationError(
                    f"field {self.source!r}: constant {node.value!r} is not numeric"
                )
            return
        if isinstance(node, ast.Name):
            # function names are only legal as call targets, handled below
            if node.id not in ("t", "w"):
                raise InvalidConfigurationError(
                    f"field {self.source!r}: unknown name {node.id!r}"
                )
            return
        if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub, ast.Mult)):
            self._check(node.left)
            self._check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            self._check(node.operand)
            return
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_FUNCS:
                raise InvalidConfigurationError(
                    f"field {self.source!r}: only sin, cos, exp may be called"
                )
            if len(node.args) != 1 or node.keywords:
                raise InvalidConfigurationError(
                    f"field {self.source!r}: {node.func.id} takes exactly one argument"
                )
            self._check(node.args[0])
            return
        raise InvalidConfigurationError(
            f"field {self.source!r}: construct {type(node).__name__} not in the grammar"
        )

    def __call__(self, t, w=0.0):
        env = {"__builtins__": {}, "t": t, "w": w, **_ALLOWED_FUNCS}
        return eval(self._code, env)  # AST was whitelisted above

    def __repr__(self) -> str:
        return f"FieldExpression({self.source!r})"


def _const_expr(value: float) -> FieldExpression:
    return FieldExpression(format(float(value), ".17g"))


@dataclass(frozen=True)
class Bounds:
    """Declared coefficient bounds; evaluation errors out when exceeded."""

    M_C: float
    M_B: float
    M_S: float | None = None

    def __post_init__(self):
        if not (self.M_C > 0.0) or not (self.M_B >= 0.0):
            raise InvalidConfigurationError(
                f"bounds must satisfy M_C > 0 and M_B >= 0, got {self}"
            )
        if self.M_S is not None and not (self.M_S > 0.0):
            raise InvalidConfigurationError(f"M_S must be positive when given, got {self.M_S}")


def _as_modes(basis: SpectralBasis, values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(basis.N, float(arr))
    if arr.shape != (basis.N,):
        raise InvalidConfigurationError(
            f"{name} must be a scalar or length-{basis.N} array, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidConfigurationError(f"{name} must be finite")
    return arr


def _check_bound(values: np.ndarray, bound: float | None, name: str, where: str) -> None:
    if bound is None:
        return
    worst = float(np.max(np.abs(values), initial=0.0))
    if worst > bound:
        raise BoundViolationError(
            f"{name} evaluated to magnitude {worst:.6g} > declared bound {bound:.6g} {where}"
        )


class _ModelBase:
    """Shared evaluation plumbing; subclasses fill in the per-mode diagonals."""

    basis: SpectralBasis
    bounds: Bounds

    deterministic: bool = True

    def diag_c(self, t: float, w=0.0) -> np.ndarray:
        raise NotImplementedError

    def diag_b(self, t: float, w=0.0) -> np.ndarray:
        raise NotImplementedError

    def diag_s(self, t: float, w=0.0) -> np.ndarray:
        raise NotImplementedError

    def diag_m(self) -> np.ndarray:
        raise NotImplementedError

    def M_operator(self) -> OperatorMatrix:
        return diagonal(self.basis, self.diag_m())

    def _checked(self, c, b, s, where: str):
        _check_bound(c, self.bounds.M_C, "|C|", where)
        _check_bound(b, self.bounds.M_B, "|B|", where)
        _check_bound(s, self.bounds.M_S, "|S|", where)
        return c, b, s

    def diagonals_at(self, t: float, w=0.0):
        """(c, b, s) per-mode diagonals at time t and Brownian value w.

        w may be an array of path values; results always have shape
        w.shape + (N,).  Declared bounds are enforced here, never clipped.
        """
        shape = np.asarray(w, dtype=float).shape + (self.basis.N,)
        c = np.broadcast_to(np.asarray(self.diag_c(t, w), dtype=float), shape)
        b = np.broadcast_to(np.asarray(self.diag_b(t, w), dtype=float), shape)
        s = np.broadcast_to(np.asarray(self.diag_s(t, w), dtype=float), shape)
        return self._checked(c, b, s, f"at t={t:.6g}")


def _expr_tuple(basis: SpectralBasis, given, name: str) -> tuple[FieldExpression, ...]:
    """Normalize one expression, a constant, or a per-mode list of either."""
    if isinstance(given, (str, FieldExpression, int, float)):
        given = [given] * basis.N
    if len(given) != basis.N:
        raise InvalidConfigurationError(
            f"{name} needs 1 or {basis.N} entries, got {len(given)}"
        )
    out = []
    for item in given:
        if isinstance(item, FieldExpression):
            out.append(item)
        elif isinstance(item, str):
            out.append(FieldExpression(item))
        else:
            out.append(_const_expr(float(item)))
    return tuple(out)


@dataclass(frozen=True)
class ConstantDiagonal(_ModelBase):
    """Per-mode constant coefficients; the fully decoupled reference family."""

    basis: SpectralBasis
    c: np.ndarray
    b: np.ndarray
    s: np.ndarray
    m: np.ndarray
    bounds: Bounds

    deterministic = True

    def __post_init__(self):
        for name in ("c", "b", "s", "m"):
            object.__setattr__(self, name, _as_modes(self.basis, getattr(self, name), name))
        self._checked(self.c, self.b, self.s, "at construction")

    def diag_c(self, t, w=0.0):
        return self.c

    def diag_b(self, t, w=0.0):
        return self.b

    def diag_s(self, t, w=0.0):
        return self.s

    def diag_m(self):
        return self.m


@dataclass(frozen=True)
class DeterministicSchedule(_ModelBase):
    """Per-mode diagonals given by fields of t alone, read on the grid."""

    basis: SpectralBasis
    c: tuple
    b: tuple
    s: tuple
    m: np.ndarray
    bounds: Bounds

    deterministic = True

    def __post_init__(self):
        for name in ("c", "b", "s"):
            exprs = _expr_tuple(self.basis, getattr(self, name), name)
            for e in exprs:
                if e.uses_w:
                    raise InvalidConfigurationError(
                        f"schedule field {e.source!r} may not depend on w"
                    )
            object.__setattr__(self, name, exprs)
        object.__setattr__(self, "m", _as_modes(self.basis, self.m, "m"))

    def _eval(self, exprs, t):
        return np.array([float(e(t)) for e in exprs])

    def diag_c(self, t, w=0.0):
        return self._eval(self.c, t)

    def diag_b(self, t, w=0.0):
        return self._eval(self.b, t)

    def diag_s(self, t, w=0.0):
        return self._eval(self.s, t)

    def diag_m(self):
        return self.m


@dataclass(frozen=True)
class ScalarRandomField(_ModelBase):
    """Scalar fields c(t, w), s(t, w) times the identity; b, m per-mode constants.

    The same family covers the weak-source variant: s may take negative values,
    in which case the model fails the positive-bounded hypothesis but keeps a
    finite K-norm at truncation and is solved through the weak-source path.
    """

    basis: SpectralBasis
    c_field: FieldExpression
    s_field: FieldExpression
    b: np.ndarray
    m: np.ndarray
    bounds: Bounds

    deterministic = False

    def __post_init__(self):
        for name in ("c_field", "s_field"):
            val = getattr(self, name)
            if isinstance(val, str):
                object.__setattr__(self, name, FieldExpression(val))
        object.__setattr__(self, "b", _as_modes(self.basis, self.b, "b"))
        object.__setattr__(self, "m", _as_modes(self.basis, self.m, "m"))
        if self.bounds.M_S is None:
            raise InvalidConfigurationError("ScalarRandomField requires a declared M_S bound")

    def _broadcast(self, scalar, w):
        # a field constant in w must still follow the path axis
        w_arr = np.asarray(w, dtype=float)
        vals = np.broadcast_to(np.asarray(scalar, dtype=float), w_arr.shape)
        return np.repeat(vals[..., None], self.basis.N, axis=-1)

    def diag_c(self, t, w=0.0):
        return self._broadcast(self.c_field(t, w), w)

    def diag_b(self, t, w=0.0):
        w_arr = np.asarray(w, dtype=float)
        return np.broadcast_to(self.b, w_arr.shape + (self.basis.N,))

    def diag_s(self, t, w=0.0):
        return self._broadcast(self.s_field(t, w), w)

    def diag_m(self):
        return self.m


CoefficientModel = ConstantDiagonal | DeterministicSchedule | ScalarRandomField

_PATH_STREAM = 0


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """One driving path on the grid: W_0 = 0, increments ~ N(0, h).

    Reconstructible from (seed, index) alone; adaptedness is kept by interface,
    value_at_index never looks past the requested grid point.
    """

    grid: TimeGrid
    increments: np.ndarray
    seed: int
    index: int
    values: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.grid.L,):
            raise InvalidConfigurationError(
                f"increments must have shape ({self.grid.L},), got {inc.shape}"
            )
        vals = np.concatenate([[0.0], np.cumsum(inc)])
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "values", vals)

    def value_at_index(self, i: int) -> float:
        if not (0 <= i <= self.grid.L):
            raise InvalidConfigurationError(f"grid index {i} out of range 0..{self.grid.L}")
        return float(self.values[i])


def _path_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, stream, index))))


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """n_paths independent paths; row j is reproducible from (seed, j)."""

    grid: TimeGrid
    increments: np.ndarray  # (n_paths, L)
    seed: int
    stream: int = _PATH_STREAM
    values: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        vals = np.concatenate(
            [np.zeros((inc.shape[0], 1)), np.cumsum(inc, axis=1)], axis=1
        )
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "values", vals)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    def path(self, j: int) -> BrownianPath:
        return BrownianPath(self.grid, self.increments[j], seed=self.seed, index=j)


def sample_paths(
    grid: TimeGrid, n_paths: int, seed: int, stream: int = _PATH_STREAM
) -> BrownianEnsemble:
    """Draw n_paths Brownian paths on the grid.

    Each path is generated from its own counter-based substream keyed by
    (seed, stream, path index), so ensembles are identical however the work is
    later split across workers.
    """
    if n_paths < 1:
        raise InvalidConfigurationError(f"n_paths must be >= 1, got {n_paths}")
    sd = np.sqrt(grid.h)
    inc = np.empty((n_paths, grid.L))
    for j in range(n_paths):
        inc[j] = _path_rng(seed, j, stream).normal(0.0, sd, size=grid.L)
    return BrownianEnsemble(grid=grid, increments=inc, seed=seed, stream=stream)


def eval_coefficients(
    model: CoefficientModel, t: float, path: BrownianPath | None = None
) -> tuple[OperatorMatrix, OperatorMatrix, OperatorMatrix]:
    """(C, B, S) at time t along the given path, bounds enforced.

    Only the path prefix up to t is read, so evaluations are adapted by
    construction.  Deterministic variants ignore the path.
    """
    w = 0.0
    if path is not None:
        w = path.value_at_index(path.grid.index_of_time(t))
    c, b, s = model.diagonals_at(t, w)
    basis = model.basis
    return diagonal(basis, c), diagonal(basis, b), diagonal(basis, s)


_PROBE_T = np.linspace(0.0, 4.0, 17)
_PROBE_W = np.linspace(-4.0, 4.0, 17)


def validate_model(model: CoefficientModel, grid: TimeGrid | None = None) -> dict:
    """Static checks: declared bounds, symmetry, positivity, hypothesis class.

    Diagonal variants are symmetric by construction; positivity reduces to the
    sign of the diagonals at probe points.  The report carries which of the two
    source hypotheses holds: the positive-bounded one (PSD source and datum) or
    the weak one (symmetric source with finite K-norm, sign unconstrained).
    """
    times = grid.times if grid is not None else _PROBE_T
    messages: list[str] = []
    s_min = np.inf
    sup_c = sup_b = sup_s = 0.0
    sup_K_S = 0.0
    w_probes = _PROBE_W if not model.deterministic else np.array([0.0])
    for t in times:
        for w in w_probes:
            try:
                c, b, s = model.diagonals_at(float(t), float(w))
            except BoundViolationError as exc:
                messages.append(str(exc))
                c, b, s = model.diag_c(t, w), model.diag_b(t, w), model.diag_s(t, w)
            s_min = min(s_min, float(np.min(s)))
            sup_c = max(sup_c, float(np.max(np.abs(c))))
            sup_b = max(sup_b, float(np.max(np.abs(b))))
            sup_s = max(sup_s, float(np.max(np.abs(s))))
            sup_K_S = max(sup_K_S, norm(diagonal(model.basis, s), "K"))
    m = model.diag_m()
    m_psd = bool(np.min(m) >= 0.0)
    s_psd = bool(s_min >= -1e-15)
    if not m_psd:
        messages.append(f"A3 violated: M not PSD (min diagonal {np.min(m):.6g})")
    if not s_psd:
        messages.append(f"A3 violated: S not PSD at probes (min diagonal {s_min:.6g})")
    a3 = m_psd and s_psd
    a3_prime = True  # symmetric diagonal source with finite K-norm at truncation
    if not a3:
        messages.append("A3' satisfied: symmetric source with finite K-norm at truncation")
    return {
        "variant": type(model).__name__,
        "N": model.basis.N,
        "rho": model.basis.rho,
        "deterministic": model.deterministic,
        "bounds": {
            "M_C": model.bounds.M_C,
            "M_B": model.bounds.M_B,
            "M_S": model.bounds.M_S,
        },
        "observed": {
            "sup_opH_C": sup_c,
            "sup_opH_B": sup_b,
            "sup_opH_S": sup_s,
            "sup_K_S": sup_K_S,
            "min_diag_S": float(s_min),
            "min_diag_M": float(np.min(m)),
        },
        "M_psd": m_psd,
        "S_psd": s_psd,
        "A3": a3,
        "A3_prime": a3_prime,
        "messages": messages,
    }
