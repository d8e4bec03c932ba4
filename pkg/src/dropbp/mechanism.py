"""Per-layer drop rates, per-iteration drop sampling and the warmup schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng

GRID_STEP = 0.1
_GRID_TOL = 1e-9


def on_grid(p: float, step: float = GRID_STEP) -> bool:
    return abs(p / step - round(p / step)) < _GRID_TOL


def snap_to_grid(p: float, step: float = GRID_STEP) -> float:
    """Nearest grid point, halves rounded up (0.75 -> 0.8, 0.875 -> 0.9)."""
    k = math.floor(p / step + 0.5 + _GRID_TOL)
    return round(k * step, 10)


@dataclass(frozen=True)
class DropRates:
    """Per-layer backward drop probabilities.

    ``grid`` is the increment every rate must sit on; ``None`` lifts the
    restriction, which is only used for uniform-rate experiments at values
    such as 0.875.
    """

    rates: tuple[float, ...]
    target_avg: float
    grid: float | None = GRID_STEP

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(p) for p in self.rates))
        for p in self.rates:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"drop rate {p} outside [0, 1]")
            if self.grid is not None and not on_grid(p, self.grid):
                raise ValueError(f"drop rate {p} is not on the {self.grid} grid")
        if not 0.0 <= self.target_avg <= 1.0:
            raise ValueError("target_avg must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.rates)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.rates, dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rates)) if self.rates else 0.0

    def weighted_keep(self, flops) -> float:
        """``sum_i (1 - p_i) * F_i``."""
        return float(np.dot(1.0 - self.as_array(), np.asarray(flops, dtype=np.float64)))


@dataclass(frozen=True)
class DropDecisions:
    dropped: np.ndarray
    iteration: int
    stream: str = "dropbp"

    @property
    def n_dropped(self) -> int:
        return int(self.dropped.sum())

    @property
    def n_kept(self) -> int:
        return int((~self.dropped).sum())


def sample_decisions(rates: DropRates, iteration: int, rng: Rng, stream: str = "dropbp") -> DropDecisions:
    """Independent Bernoulli(p_i) per layer, a pure function of (seed, stream, iteration)."""
    u = rng.stream(stream, iteration).random(len(rates))
    return DropDecisions(u < rates.as_array(), iteration, stream)


def uniform_rates(n_layers: int, p_avg: float, grid: float | None = GRID_STEP) -> DropRates:
    """Every layer at ``p_avg``; off-grid values are rejected unless ``grid=None``."""
    if grid is not None and not on_grid(p_avg, grid):
        raise ValueError(
            f"p_avg={p_avg} is not on the {grid} grid; use warmup_rates() to round "
            "it or pass grid=None to allow an exact uniform rate"
        )
    p = round(p_avg, 10) if grid is not None else float(p_avg)
    return DropRates((p,) * n_layers, float(p_avg), grid)


def warmup_rates(n_layers: int, p_avg: float, override: float | None = None) -> tuple[DropRates, dict]:
    """Uniform warmup rates at ``p_avg`` rounded to the grid (or ``override``).

    Also returns a small record of the rounding for the run log.
    """
    p = snap_to_grid(p_avg) if override is None else float(override)
    rates = DropRates((p,) * n_layers, float(p_avg), GRID_STEP if on_grid(p) else None)
    note = {"p_avg": p_avg, "warmup_rate": p, "rounded": p != p_avg, "override": override is not None}
    return rates, note


@dataclass
class WarmupSchedule:
    """Uniform rates for the first ``warmup_fraction`` of the run, then one
    sensitivity-based reallocation at ``boundary`` and never again."""

    total_iters: int
    warmup_fraction: float = 0.1
    reallocated: bool = field(default=False)

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")

    @property
    def boundary(self) -> int:
        return math.floor(self.warmup_fraction * self.total_iters + 1e-9)

    def phase(self, iteration: int) -> str:
        return "uniform" if iteration < self.boundary else "sensitivity"

    def due(self, iteration: int) -> bool:
        return iteration == self.boundary and not self.reallocated
