"""Uniform time grid shared by the forward scheme and the backward solvers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigurationError

__all__ = ["TimeGrid"]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_L = T with step h = T / L."""

    T: float
    steps: int
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.T > 0.0) or not np.isfinite(self.T):
            raise InvalidConfigurationError(f"horizon T must be positive and finite, got {self.T}")
        if self.steps < 1:
            raise InvalidConfigurationError(f"grid needs at least one step, got steps={self.steps}")
        object.__setattr__(self, "times", np.linspace(0.0, self.T, self.steps + 1))

    @property
    def h(self) -> float:
        return self.T / self.steps

    @property
    def L(self) -> int:
        return self.steps

    def index_of_time(self, t: float) -> int:
        """Nearest grid index for t; raises if t is off the grid by more than h/100."""
        i = int(round(t / self.h))
        if i < 0 or i > self.steps or abs(self.times[i] - t) > self.h / 100.0:
            raise InvalidConfigurationError(f"time {t} is not a grid point of {self}")
        return i

    def __repr__(self) -> str:
        return f"TimeGrid(T={self.T}, steps={self.steps})"
