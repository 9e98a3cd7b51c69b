"""Curriculum budget scheduler: per-group pass-rate tracking, adaptive
budget means, truncated-normal budget sampling, and frontier-weighted
problem sampling.

Higher pass rate on a group shrinks its mean budget (token efficiency);
lower pass rate grows it toward b_max (more reasoning room). Sampling
weight peaks at pass rate 0.5, the learning frontier.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr, ndtri

PASS_RATE_EMA = 0.1
WEIGHT_DEGENERATE_EPS = 1e-9
REJECTION_TRIES = 1000


@dataclass(frozen=True)
class BudgetRange:
    b_min: int
    b_max: int

    def __post_init__(self):
        if not 0 < self.b_min < self.b_max:
            raise ValueError("need 0 < b_min < b_max")

    def clamp(self, x: float) -> float:
        return min(max(x, float(self.b_min)), float(self.b_max))


@dataclass(frozen=True)
class CurriculumState:
    """Per-group scheduler state. ``mu0`` is the fixed initial mean the
    adaptation rule is anchored to; ``mu`` is the current epoch's mean."""

    pass_rates: np.ndarray
    mu: np.ndarray
    mu0: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    epoch: int

    @property
    def num_groups(self) -> int:
        return self.pass_rates.size


def update_mu(mu0: float, rho: float, alpha: float, beta: float,
              brange: BudgetRange) -> float:
    """mu0 * (1 - alpha*rho) + beta * (1 - rho) * b_max, clamped to range."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"pass rate {rho} outside [0, 1]")
    raw = mu0 * (1.0 - alpha * rho) + beta * (1.0 - rho) * brange.b_max
    return brange.clamp(raw)


def problem_weights(rhos: np.ndarray) -> np.ndarray:
    """w_k proportional to rho_k * (1 - rho_k), normalized to sum 1.

    Falls back to uniform when every group is saturated or at zero, so the
    sampling distribution never degenerates.
    """
    rhos = np.asarray(rhos, dtype=np.float64)
    if rhos.size == 0:
        raise ValueError("no groups")
    if np.any((rhos < 0) | (rhos > 1)):
        raise ValueError("pass rates must lie in [0, 1]")
    raw = rhos * (1.0 - rhos)
    if np.all(raw < WEIGHT_DEGENERATE_EPS):
        return np.full(rhos.size, 1.0 / rhos.size)
    return raw / raw.sum()


def sample_budget(mu: float, sigma: float, brange: BudgetRange,
                  rng: np.random.Generator) -> int:
    """One integer draw from Normal(mu, sigma^2) conditioned on the range.

    Rejection from the parent normal, with an inverse-CDF fallback if a
    degenerate parameter setting makes rejection impractical.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    lo, hi = float(brange.b_min), float(brange.b_max)
    x = None
    for _ in range(REJECTION_TRIES):
        cand = mu + sigma * rng.standard_normal()
        if lo <= cand <= hi:
            x = cand
            break
    if x is None:
        a = ndtr((lo - mu) / sigma)
        b = ndtr((hi - mu) / sigma)
        if b - a > 0:
            u = a + (b - a) * rng.random()
            x = mu + sigma * ndtri(u)
        else:
            # both tails underflow: all mass sits at the boundary nearest mu
            x = mu
        x = min(max(x, lo), hi)
    return int(min(max(int(np.rint(x)), brange.b_min), brange.b_max))


def sample_budgets(mu: float, sigma: float, brange: BudgetRange, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    return np.array([sample_budget(mu, sigma, brange, rng) for _ in range(n)],
                    dtype=np.int64)


def curriculum_init(rho0: np.ndarray, brange: BudgetRange,
                    sigma_scale: float, mu0: float | None = None,
                    ) -> CurriculumState:
    """Epoch-0 state: means sit at mu0 (default: the range midpoint), one
    shared sigma of sigma_scale * range width, weights from the initial
    pass rates."""
    rho0 = np.asarray(rho0, dtype=np.float64)
    k = rho0.size
    if mu0 is None or mu0 <= 0:
        mu0 = 0.5 * (brange.b_min + brange.b_max)
    mu0_vec = np.full(k, float(mu0))
    sigma = np.full(k, sigma_scale * (brange.b_max - brange.b_min))
    return CurriculumState(pass_rates=rho0.copy(), mu=mu0_vec.copy(),
                           mu0=mu0_vec, sigma=sigma,
                           weights=problem_weights(rho0), epoch=0)


def update_pass_rates(state: CurriculumState,
                      batch_results: list[tuple[int, int]],
                      alpha: float, beta: float, brange: BudgetRange,
                      eta: float = PASS_RATE_EMA) -> CurriculumState:
    """EMA pass-rate update from per-group (successes, attempts), then
    recompute means and weights. Groups with zero attempts keep their rate."""
    if len(batch_results) != state.num_groups:
        raise ValueError("one (successes, attempts) pair per group")
    rates = state.pass_rates.copy()
    for k, (succ, att) in enumerate(batch_results):
        if att < 0 or succ < 0 or succ > att:
            raise ValueError(f"bad batch result ({succ}, {att}) for group {k + 1}")
        if att > 0:
            rates[k] = (1.0 - eta) * rates[k] + eta * (succ / att)
    mu = np.array([update_mu(state.mu0[k], rates[k], alpha, beta, brange)
                   for k in range(state.num_groups)])
    return replace(state, pass_rates=rates, mu=mu,
                   weights=problem_weights(rates), epoch=state.epoch + 1)


def truncated_normal_mean(mu: float, sigma: float, lo: float, hi: float) -> float:
    """Closed-form mean of a truncated normal (analytic oracle for tests)."""
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    phi = lambda z: np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)  # noqa: E731
    zden = ndtr(b) - ndtr(a)
    return mu + sigma * (phi(a) - phi(b)) / zden
