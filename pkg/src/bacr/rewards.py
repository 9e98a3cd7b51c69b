"""Truncation-aware dense rewards.

A trace generated under budget b is verified at M evenly spaced truncation
points. Each point gets an outcome reward (the binary verifier result on
the prefix) plus a weighted progress reward (the change in outcome since
the previous point, which can be negative when extra tokens destroy a
correct prefix). The cumulative trace reward averages the dense rewards
across the points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .environment import Task, Trace, truncate
from .environment import verify as default_verify


@dataclass
class RewardProfile:
    """Per-truncation-point rewards of one trace. ``budgets`` is strictly
    ascending; the progress column telescopes to the final outcome."""

    budgets: list[int]
    outcomes: list[int]
    progress: list[float]
    dense: list[float]
    cumulative: float

    @property
    def final_outcome(self) -> int:
        return self.outcomes[-1]

    @property
    def progress_contribution(self) -> float:
        """The part of the cumulative reward contributed by progress terms."""
        return self.cumulative - float(np.mean(self.outcomes))


def truncation_points(b: int, m: int) -> list[int]:
    """{floor(j*b/m) : j=1..m}; the last point always equals b."""
    if m < 1:
        raise ValueError("need at least one truncation point")
    if b < m:
        raise ValueError(f"budget {b} smaller than point count {m}")
    return [(j * b) // m for j in range(1, m + 1)]


def progress_reward(r_curr: int, r_prev: int | None, j: int) -> float:
    """r_curr - r_prev for j > 1; the first point's progress is r_curr."""
    if j < 1:
        raise ValueError("truncation index is 1-based")
    if j == 1:
        if r_prev is not None:
            raise ValueError("first point has no predecessor")
        return float(r_curr)
    if r_prev is None:
        raise ValueError("missing previous outcome for j > 1")
    return float(r_curr - r_prev)


def dense_reward(outcome: float, progress: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("progress coefficient must be nonnegative")
    return outcome + lam * progress


def reward_profile(task: Task, trace: Trace, b: int, m: int, lam: float,
                   verify: Callable[[Task, Trace], int] = default_verify,
                   ) -> RewardProfile:
    """Evaluate the verifier at every truncation point of one trace.

    cumulative = mean(dense) = mean(outcomes) + (lam/m) * final outcome,
    by the telescoping identity.
    """
    points = truncation_points(b, m)
    outcomes: list[int] = []
    progress: list[float] = []
    dense: list[float] = []
    prev: int | None = None
    for j, bj in enumerate(points, start=1):
        r = int(verify(task, truncate(trace, bj)))
        dr = progress_reward(r, prev, j)
        outcomes.append(r)
        progress.append(dr)
        dense.append(dense_reward(r, dr, lam))
        prev = r
    return RewardProfile(budgets=points, outcomes=outcomes, progress=progress,
                         dense=dense, cumulative=float(np.mean(dense)))
