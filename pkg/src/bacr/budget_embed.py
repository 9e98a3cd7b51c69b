"""Budget conditioning: sinusoidal features of a scalar token budget, a
learned projection producing the conditioning vector phi(b), and a sigmoid
gate that injects phi(b) into a hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ACT_SILU,
    MlpCache,
    MlpGrads,
    MlpParams,
    mlp_backward,
    mlp_forward,
    mlp_init,
    sigmoid,
)

GATE_INIT_STD = 1e-2  # variance 1e-4: budget influence starts near-neutral


def sinusoidal_features(b: float, d: int) -> np.ndarray:
    """Interleaved (sin, cos) features of a nonnegative scalar budget.

    Entry pair i is (sin(b / 10000^(2i/d)), cos(b / 10000^(2i/d))) for
    i = 0..d/2-1, so the output has length d. d must be even.
    """
    if d % 2 != 0:
        raise ValueError(f"feature dimension must be even, got {d}")
    if b < 0:
        raise ValueError(f"budget must be nonnegative, got {b}")
    i = np.arange(d // 2, dtype=np.float64)
    angles = b / np.power(10000.0, 2.0 * i / d)
    out = np.empty(d)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


@dataclass
class BudgetEmbedParams:
    """Projection MLP (dim -> dim) plus the gating vector w_g (dim,)."""

    proj: MlpParams
    gate_vec: np.ndarray
    dim: int

    def __post_init__(self):
        if self.dim % 2 != 0:
            raise ValueError("embedding dim must be even")
        if self.gate_vec.shape != (self.dim,):
            raise ValueError("gate_vec length must equal dim")
        if self.proj.d_in != self.dim or self.proj.d_out != self.dim:
            raise ValueError("proj must map dim -> dim")

    def copy(self) -> "BudgetEmbedParams":
        return BudgetEmbedParams(self.proj.copy(), self.gate_vec.copy(), self.dim)


def budget_embed_init(dim: int, rng: np.random.Generator) -> BudgetEmbedParams:
    proj = mlp_init(dim, dim, dim, rng, activation=ACT_SILU)
    gate_vec = rng.normal(0.0, GATE_INIT_STD, size=dim)
    return BudgetEmbedParams(proj=proj, gate_vec=gate_vec, dim=dim)


def embed_budget(p: BudgetEmbedParams, b: float, b_min: float,
                 b_max: float) -> np.ndarray:
    phi, _ = embed_budget_forward(p, b, b_min, b_max)
    return phi


def embed_budget_forward(p: BudgetEmbedParams, b: float, b_min: float,
                         b_max: float) -> tuple[np.ndarray, MlpCache]:
    """phi(b) = proj(sinusoidal_features(b, dim)); callers clamp b first."""
    if not b_min <= b <= b_max:
        raise ValueError(f"budget {b} outside [{b_min}, {b_max}]")
    feats = sinusoidal_features(float(b), p.dim)
    phi, cache = mlp_forward(p.proj, feats)
    return phi, cache


def embed_budget_backward(p: BudgetEmbedParams, cache: MlpCache,
                          grad_phi: np.ndarray) -> MlpGrads:
    grads, _ = mlp_backward(p.proj, cache, grad_phi)
    return grads


def gate_inject(h: np.ndarray, phi_b: np.ndarray,
                gate_vec: np.ndarray) -> np.ndarray:
    """h' = h + sigmoid(gate_vec . h) * phi_b."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != phi_b.shape or h.shape != gate_vec.shape:
        raise ValueError("h, phi_b and gate_vec must share one dimension")
    return h + sigmoid(float(gate_vec @ h)) * phi_b


def gate_inject_backward(h: np.ndarray, phi_b: np.ndarray,
                         gate_vec: np.ndarray, grad_out: np.ndarray,
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dh, dphi_b, dgate_vec) of a loss with dL/dh' = grad_out."""
    u = float(gate_vec @ h)
    g = float(sigmoid(u))
    gprime = g * (1.0 - g)
    t = float(grad_out @ phi_b)
    dh = grad_out + gprime * t * gate_vec
    dphi = g * grad_out
    dgate = gprime * t * h
    return dh, dphi, dgate
