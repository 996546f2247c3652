"""Discrete noise schedules (betas and cumulative alpha-bars)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or out-of-range timestep."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable beta / alpha-bar table.

    ``betas[t - 1]`` is beta_t for t in 1..T and ``alpha_bars[t]`` is the
    cumulative product up to t, with ``alpha_bars[0] == 1.0``.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        abar = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.shape != (self.T,) or abar.shape != (self.T + 1,):
            raise ScheduleError("betas must have T entries and alpha_bars T + 1")
        if not np.all((betas > 0) & (betas < 1)):
            raise ScheduleError("every beta must lie in (0, 1)")
        if abar[0] != 1.0 or not np.all(np.diff(abar) < 0) or abar[-1] <= 0:
            raise ScheduleError("alpha_bars must start at 1 and decrease strictly")
        betas.setflags(write=False)
        abar.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abar)

    def alpha_bar(self, t: int) -> float:
        return alpha_bar(self, t)

    def fingerprint(self) -> str:
        """Stable short hash of the schedule contents (used in weight headers)."""
        h = hashlib.sha256()
        h.update(str(self.T).encode())
        h.update(self.betas.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.T == other.T and np.array_equal(self.betas, other.betas)

    def __hash__(self) -> int:
        return hash((self.T, self.betas.tobytes()))


def make_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha_bars = np.empty(int(T) + 1, dtype=np.float64)
    alpha_bars[0] = 1.0
    # sequential product keeps the recurrence abar_t = abar_{t-1} * (1 - beta_t) exact
    for i, b in enumerate(betas, start=1):
        alpha_bars[i] = alpha_bars[i - 1] * (1.0 - b)
    return NoiseSchedule(int(T), betas, alpha_bars)


def alpha_bar(s: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= s.T:
        raise ScheduleError(f"timestep {t} outside [0, {s.T}]")
    return float(s.alpha_bars[t])
