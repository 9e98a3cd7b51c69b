"""Dense linear algebra core: a two-layer perceptron with exact manual
backprop, a finite-difference gradient checker, and flat named-array
checkpoint serialization.

All learnable objects in the package are built from these pieces. Matrices
are 2-D float64 C-order (row-major) ndarrays throughout; vectors are 1-D
float64 ndarrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

ACT_SILU = "silu"
ACT_IDENTITY = "identity"


def sigmoid(x):
    """Numerically stable logistic function (scalar or ndarray)."""
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def silu(x):
    """SiLU activation: x * sigmoid(x)."""
    return x * sigmoid(x)


def silu_grad(x):
    """d/dx [x * sigmoid(x)] = sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over a 1-D logit vector.

    Output is nonnegative, sums to 1 within float rounding, and is
    invariant to adding a constant to every logit.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax of empty logit vector")
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("log_softmax of empty logit vector")
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def xavier_uniform(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class MlpParams:
    """Two-layer perceptron y = w2 @ act(w1 @ x + b1) + b2.

    w1: (hidden, d_in), b1: (hidden,), w2: (d_out, hidden), b2: (d_out,).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = ACT_SILU

    def __post_init__(self):
        if self.activation not in (ACT_SILU, ACT_IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.w1.shape[0] != self.b1.shape[0]:
            raise ValueError("w1/b1 hidden dims differ")
        if self.w2.shape[1] != self.w1.shape[0]:
            raise ValueError("w2 inner dim does not match w1 hidden dim")
        if self.w2.shape[0] != self.b2.shape[0]:
            raise ValueError("w2/b2 output dims differ")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                         self.b2.copy(), self.activation)


@dataclass
class MlpCache:
    """Forward intermediates needed for an exact backward pass."""

    x: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray


@dataclass
class MlpGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def mlp_init(d_in: int, hidden: int, d_out: int, rng: np.random.Generator,
             activation: str = ACT_SILU) -> MlpParams:
    """Xavier-uniform weights, zero biases."""
    return MlpParams(
        w1=xavier_uniform(hidden, d_in, rng),
        b1=np.zeros(hidden),
        w2=xavier_uniform(d_out, hidden, rng),
        b2=np.zeros(d_out),
        activation=activation,
    )


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.d_in,):
        raise ValueError(f"input shape {x.shape} does not match d_in={p.d_in}")
    pre1 = p.w1 @ x + p.b1
    act1 = silu(pre1) if p.activation == ACT_SILU else pre1
    y = p.w2 @ act1 + p.b2
    return y, MlpCache(x=x, pre1=pre1, act1=act1)


def mlp_backward(p: MlpParams, cache: MlpCache,
                 grad_y: np.ndarray) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of a scalar loss L with dL/dy = grad_y.

    Returns (parameter gradients, dL/dx). The cache must come from a
    forward call with the same parameter shapes.
    """
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != (p.d_out,):
        raise ValueError(f"grad_y shape {grad_y.shape} does not match d_out={p.d_out}")
    if cache.x.shape != (p.d_in,) or cache.pre1.shape != (p.w1.shape[0],):
        raise ValueError("cache does not match parameter shapes")
    dw2 = np.outer(grad_y, cache.act1)
    db2 = grad_y.copy()
    dact1 = p.w2.T @ grad_y
    dpre1 = dact1 * silu_grad(cache.pre1) if p.activation == ACT_SILU else dact1
    dw1 = np.outer(dpre1, cache.x)
    db1 = dpre1
    dx = p.w1.T @ dpre1
    return MlpGrads(w1=dw1, b1=db1, w2=dw2, b2=db2), dx


def mlp_named_arrays(p: MlpParams, prefix: str) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}.w1", p.w1), (f"{prefix}.b1", p.b1),
            (f"{prefix}.w2", p.w2), (f"{prefix}.b2", p.b2)]


def mlp_grads_named(g: MlpGrads, prefix: str) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}.w1", g.w1), (f"{prefix}.b1", g.b1),
            (f"{prefix}.w2", g.w2), (f"{prefix}.b2", g.b2)]


# --- gradient checking -------------------------------------------------------

GradFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def _rel_err(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / denom


def grad_check(f: GradFn, params: dict[str, np.ndarray],
               eps: float = 1e-6) -> float:
    """Compare analytic gradients against central finite differences.

    ``f`` maps a name->array parameter dict to ``(scalar, grads)`` where
    ``grads`` mirrors the dict layout. Every entry of every array is
    perturbed by +/- eps; the worst relative error is returned, using
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    return grad_check_best(f, params, steps=(eps,))


def grad_check_best(f: GradFn, params: dict[str, np.ndarray],
                    steps: tuple[float, ...] = (1e-5, 1e-4)) -> float:
    """grad_check with per-entry step selection.

    Central differences in float64 face two error floors: rounding noise
    ~|f|*eps_mach/(2h) (shrinks with larger h) and truncation ~h^2*f'''/6
    (shrinks with smaller h). No single step resolves both small-magnitude,
    low-curvature entries and larger, high-curvature ones, so each entry is
    scored at every step and the best agreement counts.
    """
    base, grads = f(params)
    if not np.isfinite(base):
        raise ValueError("f(params) is not finite")
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        gflat = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            best = np.inf
            for eps in steps:
                flat[i] = orig + eps
                up, _ = f(params)
                flat[i] = orig - eps
                dn, _ = f(params)
                flat[i] = orig
                best = min(best, _rel_err(gflat[i], (up - dn) / (2.0 * eps)))
            worst = max(worst, best)
    return worst


# --- checkpoint serialization ------------------------------------------------
#
# Flat list of named float arrays; shapes recorded explicitly and data laid
# out row-major, so checkpoints are portable across implementations.


def save_named_arrays(path, arrays: list[tuple[str, np.ndarray]],
                      meta: dict | None = None) -> None:
    payload = {"arrays": [
        {"name": name,
         "shape": list(arr.shape),
         "data": np.ascontiguousarray(arr, dtype=np.float64).reshape(-1).tolist()}
        for name, arr in arrays
    ]}
    if meta:
        payload["meta"] = meta
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_named_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        payload = json.load(fh)
    out = {}
    for entry in payload["arrays"]:
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out[entry["name"]] = arr
    return out, payload.get("meta", {})
