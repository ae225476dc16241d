"""Width sampling (sandwich rule and dynamic two-stage sampling), the cosine
learning-rate schedule and forward-cost accounting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .objectives import ConfigError

__all__ = [
    "CostLedger",
    "SamplingSchedule",
    "assert_min_samples",
    "cosine_lr",
    "dynamic_sample",
    "expected_forward_count",
    "sandwich_sample",
]

MODES = ("static_sandwich", "dynamic")
MIN_UNIVERSAL_SAMPLES = 3


@dataclass
class SamplingSchedule:
    mode: str = "dynamic"
    T_iters: int = 400
    r_min: float = 0.25
    r_max: float = 1.0
    s: int = 4
    grid_step: float = 0.05
    universal: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"schedule mode must be one of {MODES}, got {self.mode!r}")
        if self.T_iters < 1:
            raise ConfigError("T_iters must be >= 1")
        if not (0.0 < self.r_min <= self.r_max <= 1.0):
            raise ConfigError("need 0 < r_min <= r_max <= 1")
        if self.grid_step <= 0:
            raise ConfigError("grid_step must be positive")

    @property
    def T_p(self) -> int:
        return self.T_iters // 4

    @property
    def width_grid(self) -> np.ndarray:
        n = int(round((self.r_max - self.r_min) / self.grid_step))
        grid = np.round(self.r_min + self.grid_step * np.arange(n + 1), 10)
        grid = grid[grid <= self.r_max + 1e-12]
        if grid[-1] != self.r_max:
            grid = np.append(grid, self.r_max)
        return grid

    def r_min_at(self, t: int) -> float:
        """Smallest width in play at iteration ``t`` of the dynamic schedule."""
        if self.T_p == 0:
            return self.r_min
        return max(self.r_min, 1.0 - 0.25 * (t // self.T_p))

    def samples_per_iteration(self) -> int:
        return self.s if self.mode == "static_sandwich" else MIN_UNIVERSAL_SAMPLES

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sandwich_sample(schedule: SamplingSchedule, rng: np.random.Generator) -> list[float]:
    """``[r_max, r_min]`` plus ``s - 2`` distinct grid widths drawn uniformly."""
    if schedule.s < 2:
        raise ConfigError("the sandwich rule needs s >= 2")
    grid = schedule.width_grid
    if schedule.s > len(grid):
        raise ConfigError(f"s={schedule.s} exceeds the {len(grid)} grid widths")
    extra = rng.choice(grid, size=schedule.s - 2, replace=False) if schedule.s > 2 else []
    return [float(schedule.r_max), float(schedule.r_min), *map(float, extra)]


def dynamic_sample(schedule: SamplingSchedule, t: int, rng: np.random.Generator) -> list[float]:
    """Widths for iteration ``t`` (1-based).

    During the first ``T_p`` iterations only the full network runs. Afterwards
    the set is the full width, the current smallest width and one random grid
    width between them.
    """
    if not 1 <= t <= schedule.T_iters:
        raise ValueError(f"t must lie in [1, {schedule.T_iters}], got {t}")
    if t <= schedule.T_p:
        return [1.0]
    lo = schedule.r_min_at(t)
    grid = schedule.width_grid
    choices = grid[(grid >= lo - 1e-12) & (grid <= 1.0 + 1e-12)]
    return [1.0, float(lo), float(rng.choice(choices))]


def sample_widths(schedule: SamplingSchedule, t: int, rng: np.random.Generator) -> list[float]:
    if schedule.mode == "dynamic":
        return dynamic_sample(schedule, t, rng)
    return sandwich_sample(schedule, rng)


def expected_forward_count(schedule: SamplingSchedule) -> int:
    """Student width-evaluations over a full run (teacher passes excluded)."""
    T = schedule.T_iters
    if schedule.mode == "dynamic":
        return schedule.T_p * 1 + (T - schedule.T_p) * MIN_UNIVERSAL_SAMPLES
    return schedule.s * T


def cosine_lr(t: float, T: float, base_lr: float) -> float:
    if not 0 <= t <= T:
        raise ValueError(f"t must lie in [0, {T}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / T))


def assert_min_samples(schedule: SamplingSchedule) -> None:
    """Reject universal-width schedules that sample fewer than three widths.

    Covering arbitrary widths needs the smallest, the largest and at least one
    random width per iteration. Base-only warmup (``universal=False``) is exempt.
    """
    if not schedule.universal:
        return
    if schedule.samples_per_iteration() < MIN_UNIVERSAL_SAMPLES:
        raise ConfigError(
            f"universal-width training needs at least {MIN_UNIVERSAL_SAMPLES} sampled widths per iteration "
            f"(smallest, largest and one random); got s={schedule.samples_per_iteration()}"
        )


@dataclass
class CostLedger:
    """Per-iteration count of student width-evaluations."""

    iterations: list[tuple[int, tuple[float, ...]]] = field(default_factory=list)
    teacher_forwards: int = 0

    def record(self, t: int, widths: list[float]) -> None:
        self.iterations.append((t, tuple(widths)))

    @property
    def per_iteration(self) -> list[int]:
        return [len(w) for _, w in self.iterations]

    @property
    def total(self) -> int:
        return sum(self.per_iteration)

    def rows(self) -> list[dict]:
        out, cum = [], 0
        for t, widths in self.iterations:
            cum += len(widths)
            out.append({
                "iter": t,
                "widths_sampled": " ".join(f"{w:g}" for w in widths),
                "cumulative_forwards": cum,
            })
        return out

    def write_csv(self, fh: IO[str]) -> None:
        writer = csv.DictWriter(fh, fieldnames=["iter", "widths_sampled", "cumulative_forwards"])
        writer.writeheader()
        writer.writerows(self.rows())
