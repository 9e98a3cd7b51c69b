"""Advantage estimation in three modes, plus variance instrumentation.

* grpo: group-mean baseline over a task's rollouts at one fixed budget.
* brpo: group-mean baseline within a (task, budget-level) group.
* bcae: learned value baseline V(q, b) conditioned on the task features
  and the budget embedding, trained by mean squared error.

All modes share the same normalization: divide by the per-group standard
deviation floored at a small epsilon (population convention).

``measure_variance`` resamples minibatches from a frozen policy and reports,
per budget level and mode, the raw per-sample advantage variance and the
variance of the minibatch policy-gradient estimate (trace of its covariance
across repetitions). Both quantities are reported without asserting an
ordering between the modes; which one is smaller is an empirical question.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import Task, TaskSet
from .numerics import MlpCache, MlpParams, mlp_backward, mlp_forward, mlp_init, silu, silu_grad
from .policy import GenerationConfig, PolicyParams, compute_phi, finish_phi_backward, sample_trace, trace_backward
from .rewards import reward_profile

NORM_EPS = 1e-6

ESTIMATOR_MODES = ("grpo", "brpo", "bcae")


@dataclass
class ValueNetParams:
    """MLP head mapping [task features (+) phi(b)] to a scalar estimate."""

    head: MlpParams

    @property
    def input_dim(self) -> int:
        return self.head.d_in

    def copy(self) -> "ValueNetParams":
        return ValueNetParams(head=self.head.copy())


def value_init(feat_dim: int, embed_dim: int, rng: np.random.Generator,
               hidden: int | None = None) -> ValueNetParams:
    """Hidden layer Xavier, output layer zero: V starts identically 0, so
    early all-zero-reward batches produce zero advantages instead of
    baseline noise (the group-mean estimators have the same property)."""
    hidden = hidden if hidden is not None else embed_dim
    head = mlp_init(feat_dim + embed_dim, hidden, 1, rng)
    head.w2[:] = 0.0
    return ValueNetParams(head=head)


def value_forward(psi: ValueNetParams, feature_vec: np.ndarray,
                  phi_b: np.ndarray) -> tuple[float, MlpCache]:
    x = np.concatenate([feature_vec, phi_b])
    y, cache = mlp_forward(psi.head, x)
    return float(y[0]), cache


def value_predict(psi: ValueNetParams, feature_vec: np.ndarray,
                  phi_b: np.ndarray) -> float:
    return value_forward(psi, feature_vec, phi_b)[0]


def value_backward(psi: ValueNetParams, cache: MlpCache, dv: float,
                   feat_dim: int) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Named gradients of dv * V plus the gradient flowing into phi(b)."""
    grads, dx = mlp_backward(psi.head, cache, np.array([dv]))
    named = {"value.w1": grads.w1, "value.b1": grads.b1,
             "value.w2": grads.w2, "value.b2": grads.b2}
    return named, dx[feat_dim:]


def value_loss(psi: ValueNetParams,
               batch: list[tuple[np.ndarray, np.ndarray, float]]) -> float:
    """Mean squared error of V against the observed rewards."""
    if not batch:
        raise ValueError("empty value batch")
    errs = [value_predict(psi, feat, phi) - r for feat, phi, r in batch]
    return float(np.mean(np.square(errs)))


def value_named_arrays(psi: ValueNetParams) -> list[tuple[str, np.ndarray]]:
    return [("value.w1", psi.head.w1), ("value.b1", psi.head.b1),
            ("value.w2", psi.head.w2), ("value.b2", psi.head.b2)]


def value_from_arrays(template: ValueNetParams,
                      arrays: dict[str, np.ndarray]) -> ValueNetParams:
    psi = template.copy()
    psi.head.w1[:] = arrays["value.w1"]
    psi.head.b1[:] = arrays["value.b1"]
    psi.head.w2[:] = arrays["value.w2"]
    psi.head.b2[:] = arrays["value.b2"]
    return psi


# --- advantage estimators -----------------------------------------------------


def brpo_advantage(rewards: np.ndarray) -> np.ndarray:
    """Group-mean-centered advantages; exactly mean-zero by construction."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValueError("group baseline undefined for fewer than 2 rollouts")
    return rewards - rewards.mean()


def bcae_advantage(reward: float, value: float) -> float:
    return reward - value


def normalize(advantages: np.ndarray, epsilon: float = NORM_EPS) -> np.ndarray:
    """Divide by the population std floored at epsilon; preserves signs,
    ordering, and scale-invariance of the argmax."""
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size == 0:
        raise ValueError("empty advantage batch")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return advantages / max(float(advantages.std()), epsilon)


@dataclass
class AdvantageBatch:
    """Raw and normalized advantages for one minibatch, with the worst
    per-group mean magnitude kept for the ablation fingerprints."""

    raw: np.ndarray
    normalized: np.ndarray
    mode: str
    max_abs_group_mean: float


def compute_advantages(rewards: np.ndarray, baseline_keys: list,
                       norm_keys: list, mode: str,
                       values: np.ndarray | None = None,
                       epsilon: float = NORM_EPS) -> AdvantageBatch:
    """Advantages for a batch of rollouts.

    ``baseline_keys`` group rollouts for the group-mean baseline (grpo,
    brpo); ``norm_keys`` group them for std normalization. In bcae mode the
    baseline is the supplied per-rollout value estimate instead.

    A norm group whose rewards are all identical carries no ranking signal;
    the group-mean estimators produce exactly zero advantages there, and the
    bcae path does the same (otherwise the epsilon-floored normalization
    would amplify pure value-baseline lag into enormous coherent updates).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    n = rewards.size
    if mode not in ESTIMATOR_MODES:
        raise ValueError(f"unknown estimator mode {mode!r}")
    raw = np.zeros(n)
    if mode == "bcae":
        if values is None or np.asarray(values).size != n:
            raise ValueError("bcae mode needs one value estimate per rollout")
        raw = rewards - np.asarray(values, dtype=np.float64)
    else:
        for idx in _group_indices(baseline_keys):
            raw[idx] = brpo_advantage(rewards[idx])
    normalized = np.zeros(n)
    for idx in _group_indices(norm_keys):
        if mode == "bcae" and rewards[idx].max() == rewards[idx].min():
            continue
        normalized[idx] = normalize(raw[idx], epsilon)
    group_means = [abs(float(raw[idx].mean()))
                   for idx in _group_indices(baseline_keys)]
    return AdvantageBatch(raw=raw, normalized=normalized, mode=mode,
                          max_abs_group_mean=max(group_means))


def _group_indices(keys: list) -> list[np.ndarray]:
    order: dict = {}
    for i, key in enumerate(keys):
        order.setdefault(key, []).append(i)
    return [np.array(ix, dtype=np.int64) for ix in order.values()]


# --- value-net fitting (frozen policy) ----------------------------------------


def collect_value_dataset(p: PolicyParams, taskset: TaskSet,
                          budgets: list[int], samples_per: int,
                          lam: float, m: int, seed: int,
                          temperature: float = 1.0,
                          ) -> tuple[np.ndarray, np.ndarray, list[tuple[Task, int]]]:
    """Rollout dataset for value regression: inputs [feat (+) phi(b)] and
    cumulative dense rewards, ``samples_per`` traces per (task, budget)."""
    xs, ys, meta = [], [], []
    for task in taskset.tasks:
        for b in budgets:
            phi, _ = compute_phi(p, b)
            x = np.concatenate([task.feature_vec, phi])
            for i in range(samples_per):
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=seed,
                                           spawn_key=(hash_key(task.id), b, i)))
                cfg = GenerationConfig(max_think=p.b_max, temperature=temperature)
                trace, _ = sample_trace(p, task, b, cfg, rng)
                prof = reward_profile(task, trace, b, m, lam)
                xs.append(x)
                ys.append(prof.cumulative)
                meta.append((task, b))
    return np.array(xs), np.array(ys), meta


def hash_key(task_id: str) -> int:
    """Stable small integer from a task id (Python's hash is salted)."""
    return sum((i + 1) * ord(c) for i, c in enumerate(task_id)) % (2 ** 31)


def fit_value_net(p: PolicyParams, taskset: TaskSet, budgets: list[int],
                  lam: float, m: int, seed: int, samples_per: int = 16,
                  steps: int = 1500, lr: float = 0.05,
                  temperature: float = 1.0) -> tuple[ValueNetParams, float]:
    """Train a fresh value net to convergence on a frozen policy by
    full-batch gradient descent; returns (params, final MSE)."""
    X, y, _ = collect_value_dataset(p, taskset, budgets, samples_per, lam, m,
                                    seed, temperature)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(12345,)))
    feat_dim = taskset.tasks[0].feature_vec.size
    psi = value_init(feat_dim, p.hidden_dim, rng)
    loss = _fit_batched(psi.head, X, y, steps, lr)
    return psi, loss


def _fit_batched(head: MlpParams, X: np.ndarray, y: np.ndarray,
                 steps: int, lr: float) -> float:
    """Vectorized full-batch MSE descent on a 2-layer scalar-output MLP."""
    n = X.shape[0]
    loss = np.inf
    for _ in range(steps):
        pre1 = X @ head.w1.T + head.b1
        act1 = silu(pre1)
        v = act1 @ head.w2.T + head.b2  # (n, 1)
        err = v[:, 0] - y
        loss = float(np.mean(err ** 2))
        dv = (2.0 / n) * err  # (n,)
        dw2 = dv @ act1
        db2 = dv.sum()
        dact1 = np.outer(dv, head.w2[0])
        dpre1 = dact1 * silu_grad(pre1)
        dw1 = dpre1.T @ X
        db1 = dpre1.sum(axis=0)
        head.w2 -= lr * dw2[None, :]
        head.b2 -= lr * np.array([db2])
        head.w1 -= lr * dw1
        head.b1 -= lr * db1
    return loss


# --- variance instrumentation --------------------------------------------------


def measure_variance(p: PolicyParams, psi: ValueNetParams, taskset: TaskSet,
                     budgets: list[int], n_per_task: int, reps: int,
                     seed: int, lam: float, m: int,
                     temperature: float = 1.0,
                     iteration: int = 0) -> list[dict]:
    """Per-budget variance report for the brpo and bcae estimators.

    For each budget level and repetition, every task gets ``n_per_task``
    fresh rollouts (shared across the two estimators, so the comparison is
    paired). The value net is read-only throughout.
    """
    if n_per_task < 2:
        raise ValueError("need at least 2 rollouts per task")
    rows = []
    for b in budgets:
        phi, _ = compute_phi(p, b)
        raw_adv = {mode: [] for mode in ("brpo", "bcae")}
        grad_stack = {mode: [] for mode in ("brpo", "bcae")}
        for rep in range(reps):
            records = []
            for t_idx, task in enumerate(taskset.tasks):
                value = value_predict(psi, task.feature_vec, phi)
                for i in range(n_per_task):
                    rng = np.random.default_rng(np.random.SeedSequence(
                        entropy=seed, spawn_key=(b, rep, t_idx, i)))
                    cfg = GenerationConfig(max_think=p.b_max,
                                           temperature=temperature)
                    trace, cache = sample_trace(p, task, b, cfg, rng)
                    prof = reward_profile(task, trace, b, m, lam)
                    records.append((t_idx, prof.cumulative, value, cache))
            rewards = np.array([r[1] for r in records])
            keys = [r[0] for r in records]
            values = np.array([r[2] for r in records])
            for mode in ("brpo", "bcae"):
                batch = compute_advantages(
                    rewards, keys, keys, mode,
                    values=values if mode == "bcae" else None)
                raw_adv[mode].append(batch.raw)
                grad_stack[mode].append(_policy_grad_vector(
                    p, [r[3] for r in records], batch.normalized))
        # the value-baseline estimator is unbiased for the normalized
        # gradient, so its across-rep mean serves as the reference point
        # for the bias-inclusive grad_mse column
        ref = np.stack(grad_stack["bcae"]).mean(axis=0)
        for mode in ("brpo", "bcae"):
            pooled = np.concatenate(raw_adv[mode])
            grads = np.stack(grad_stack[mode])
            rows.append({
                "iteration": iteration,
                "budget": int(b),
                "mode": mode,
                "per_sample_var": float(pooled.var()),
                "grad_var": float(grads.var(axis=0).sum()),
                "grad_mse": float(((grads - ref) ** 2).sum(axis=1).mean()),
            })
    return rows


def _policy_grad_vector(p: PolicyParams, caches: list, adv: np.ndarray,
                        ) -> np.ndarray:
    """Flattened gradient of the policy-gradient loss mean(-adv * logpi)."""
    n = len(caches)
    total: dict[str, np.ndarray] = {}
    for sc, a in zip(caches, adv):
        grads, dphi = trace_backward(p, sc, -float(a) / n, 0.0)
        grads.update(finish_phi_backward(p, sc.phi_cache, dphi))
        for name, g in grads.items():
            if name in total:
                total[name] += g
            else:
                total[name] = g.copy()
    return np.concatenate([total[k].reshape(-1) for k in sorted(total)])
