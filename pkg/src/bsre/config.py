"""Experiment configuration: JSON in, validated objects out.

A configuration names a coefficient model on a truncation basis, a time grid,
solver settings and optional control / report sections.  Validation is
strict: unknown keys anywhere raise invalid-configuration errors naming the
offender, and a coarse memory estimate rejects instances whose path ensembles
would not fit the process budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coefficients import (
    Bounds,
    CoefficientModel,
    ConstantDiagonal,
    DeterministicSchedule,
    ScalarRandomField,
)
from .errors import InvalidConfigurationError
from .grid import TimeGrid
from .lyapunov import SolverOptions
from .riccati import RiccatiConfig
from .spectral import SpectralBasis, laplacian_basis

__all__ = ["ExperimentConfig", "load_config", "parse_config", "save_config"]

MEMORY_BUDGET_BYTES = 4_000_000_000

_MODEL_KEYS = {
    "constant": {"variant", "N", "rho", "lambdas", "c", "b", "s", "m", "bounds"},
    "schedule": {"variant", "N", "rho", "lambdas", "c", "b", "s", "m", "bounds"},
    "random-field": {
        "variant", "N", "rho", "lambdas", "c_field", "s_field", "b", "m", "bounds",
    },
}
_BOUNDS_KEYS = {"M_C", "M_B", "M_S"}
_GRID_KEYS = {"T", "steps"}
_SOLVER_KEYS = {
    "kind", "backend", "tol", "max_iter", "delta", "n_paths", "degree", "ridge",
    "seed", "workers", "chunk", "max_halvings", "contraction_threshold",
    "r", "c2_safety", "c2_paths",
}
_CONTROL_KEYS = {"x", "n_paths", "seed", "store"}
_REPORT_KEYS = {"figures", "audit_deltas"}
_TOP_KEYS = {"name", "model", "grid", "solver", "control", "report"}


def _reject_unknown(d: dict, allowed: set, where: str):
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise InvalidConfigurationError(
            f"unknown keys in {where}: {', '.join(unknown)}"
        )


def _require(d: dict, keys: tuple, where: str):
    missing = [k for k in keys if k not in d]
    if missing:
        raise InvalidConfigurationError(
            f"missing keys in {where}: {', '.join(missing)}"
        )


def _build_basis(d: dict) -> SpectralBasis:
    _require(d, ("N", "rho"), "model")
    N = d["N"]
    if not isinstance(N, int) or N < 1:
        raise InvalidConfigurationError(f"model.N must be a positive integer, got {N!r}")
    if "lambdas" in d and d["lambdas"] is not None:
        return SpectralBasis(N, np.asarray(d["lambdas"], dtype=float), float(d["rho"]))
    return laplacian_basis(N, float(d["rho"]))


def _build_bounds(d: dict) -> Bounds:
    _reject_unknown(d, _BOUNDS_KEYS, "model.bounds")
    _require(d, ("M_C", "M_B"), "model.bounds")
    return Bounds(
        M_C=float(d["M_C"]),
        M_B=float(d["M_B"]),
        M_S=None if d.get("M_S") is None else float(d["M_S"]),
    )


def build_model(d: dict) -> CoefficientModel:
    if not isinstance(d, dict):
        raise InvalidConfigurationError("model section must be a mapping")
    variant = d.get("variant")
    if variant not in _MODEL_KEYS:
        raise InvalidConfigurationError(
            f"model.variant must be one of {sorted(_MODEL_KEYS)}, got {variant!r}"
        )
    _reject_unknown(d, _MODEL_KEYS[variant], f"model ({variant})")
    basis = _build_basis(d)
    _require(d, ("bounds",), "model")
    bounds = _build_bounds(d["bounds"])
    if variant == "constant":
        _require(d, ("c", "b", "s", "m"), "model")
        return ConstantDiagonal(basis, d["c"], d["b"], d["s"], d["m"], bounds)
    if variant == "schedule":
        _require(d, ("c", "b", "s", "m"), "model")
        return DeterministicSchedule(basis, d["c"], d["b"], d["s"], d["m"], bounds)
    _require(d, ("c_field", "s_field", "b", "m"), "model")
    return ScalarRandomField(basis, d["c_field"], d["s_field"], d["b"], d["m"], bounds)


def _build_grid(d: dict) -> TimeGrid:
    if not isinstance(d, dict):
        raise InvalidConfigurationError("grid section must be a mapping")
    _reject_unknown(d, _GRID_KEYS, "grid")
    _require(d, ("T", "steps"), "grid")
    return TimeGrid(float(d["T"]), int(d["steps"]))


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment: built model and grid plus raw solver knobs."""

    name: str
    model: CoefficientModel
    grid: TimeGrid
    solver: dict = field(default_factory=dict)
    control: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.solver.get("kind", "lyapunov")

    @property
    def backend(self) -> str:
        return self.solver.get("backend", "auto")

    def solver_options(self, **overrides) -> SolverOptions:
        keep = {
            k: v for k, v in self.solver.items()
            if k not in ("kind", "backend", "r", "c2_safety", "c2_paths") and v is not None
        }
        keep.update({k: v for k, v in overrides.items() if v is not None})
        return SolverOptions(**keep)

    def riccati_config(self, **overrides) -> RiccatiConfig:
        keep = {
            k: v for k, v in self.solver.items()
            if k not in ("kind", "backend") and v is not None
        }
        keep.update({k: v for k, v in overrides.items() if v is not None})
        return RiccatiConfig(**keep)

    def control_x(self) -> np.ndarray:
        N = self.model.basis.N
        x = self.control.get("x")
        if x is None:
            x = [1.0] + [0.0] * (N - 1)
        x = np.asarray(x, dtype=float)
        if x.shape != (N,):
            raise InvalidConfigurationError(f"control.x must have {N} entries")
        return x

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.raw))


def _check_memory(model: CoefficientModel, grid: TimeGrid, solver: dict):
    n_paths = int(solver.get("n_paths", 4000))
    degree = int(solver.get("degree", 4))
    N = model.basis.N
    ens_bytes = 2 * n_paths * (grid.L + 1) * 8
    work_bytes = 4 * n_paths * N * N * 8
    coeff_bytes = (grid.L + 1) * (degree + 1) * N * N * 8
    total = ens_bytes + work_bytes + coeff_bytes
    if total > MEMORY_BUDGET_BYTES:
        raise InvalidConfigurationError(
            f"instance needs about {total / 1e9:.1f} GB (paths x grid); "
            f"budget is {MEMORY_BUDGET_BYTES / 1e9:.1f} GB, lower n_paths or steps"
        )


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise InvalidConfigurationError("configuration must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "configuration")
    _require(raw, ("model", "grid"), "configuration")
    model = build_model(raw["model"])
    grid = _build_grid(raw["grid"])
    solver = raw.get("solver", {}) or {}
    if not isinstance(solver, dict):
        raise InvalidConfigurationError("solver section must be a mapping")
    _reject_unknown(solver, _SOLVER_KEYS, "solver")
    kind = solver.get("kind", "lyapunov")
    if kind not in ("lyapunov", "riccati"):
        raise InvalidConfigurationError(
            f"solver.kind must be lyapunov or riccati, got {kind!r}"
        )
    backend = solver.get("backend", "auto")
    if backend not in ("auto", "deterministic-exact", "monte-carlo", "picard"):
        raise InvalidConfigurationError(
            f"solver.backend must be auto, deterministic-exact, monte-carlo or picard, "
            f"got {backend!r}"
        )
    control = raw.get("control", {}) or {}
    if not isinstance(control, dict):
        raise InvalidConfigurationError("control section must be a mapping")
    _reject_unknown(control, _CONTROL_KEYS, "control")
    report = raw.get("report", {}) or {}
    if not isinstance(report, dict):
        raise InvalidConfigurationError("report section must be a mapping")
    _reject_unknown(report, _REPORT_KEYS, "report")
    _check_memory(model, grid, solver)
    name = raw.get("name", "experiment")
    if not isinstance(name, str) or not name:
        raise InvalidConfigurationError("name must be a non-empty string")
    cfg = ExperimentConfig(
        name=name,
        model=model,
        grid=grid,
        solver=dict(solver),
        control=dict(control),
        report=dict(report),
        raw=json.loads(json.dumps(raw)),
    )
    cfg.control_x()
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise InvalidConfigurationError(f"configuration file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfigurationError(f"configuration is not valid JSON: {exc}") from exc
    return parse_config(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
