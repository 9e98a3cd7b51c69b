"""Gradient and invariant self-tests.

Builds the loss closures used to finite-difference-check every learnable
path (policy log-prob, budget embedding + gate, value net, and the full
composite loss), plus a handful of cheap algebraic identity checks. The
``bacr check`` verb runs a fast subset; the test suite reuses the same
builders at full strength.
"""

from __future__ import annotations

import numpy as np

from .advantage import (
    ValueNetParams,
    value_backward,
    value_forward,
    value_from_arrays,
    value_init,
    value_named_arrays,
)
from .budget_embed import embed_budget_backward, embed_budget_forward, gate_inject, gate_inject_backward
from .environment import Task, Trace
from .numerics import grad_check_best
from .policy import (
    GenerationConfig,
    PolicyParams,
    finish_phi_backward,
    policy_from_arrays,
    policy_init,
    policy_named_arrays,
    rescore,
    sample_trace,
    trace_backward,
)
from .rewards import reward_profile, truncation_points
from .trainer import BatchItem, batch_loss_and_grads, ppo_loss


def check_tasks(rng: np.random.Generator, n: int = 4,
                feat_dim: int = 5) -> list[Task]:
    """Synthetic tasks with O(1)-magnitude features.

    Finite differences cannot resolve gradient entries tied to near-zero
    inputs (the rounding noise |f|*eps_mach/2h swamps them), so the check
    instances keep every input dimension away from zero.
    """
    signs = lambda size: rng.choice([-1.0, 1.0], size=size)  # noqa: E731
    return [Task(id=f"chk{i}", group=1, required_steps=2,
                 feature_vec=rng.uniform(0.4, 1.4, size=feat_dim) * signs(feat_dim))
            for i in range(n)]


def small_setup(seed: int, hidden: int = 4, pos_dim: int = 2,
                b_min: int = 4, b_max: int = 12, scale: float = 0.3):
    """A tiny non-degenerate task/policy/value instance for fast
    finite-difference checks. ``pos_dim=2`` keeps the single position
    frequency at O(1) angles."""
    rng = np.random.default_rng(seed)
    tasks = check_tasks(rng)
    feat_dim = tasks[0].feature_vec.size
    policy = policy_init(feat_dim, hidden, pos_dim, b_min, b_max, rng)
    # spread the logits away from uniform so entropy gradients are generic
    for _, arr in policy_named_arrays(policy):
        arr += scale * rng.standard_normal(arr.shape)
    value = value_init(feat_dim, hidden, rng)
    for _, arr in value_named_arrays(value):
        arr += scale * rng.standard_normal(arr.shape)
    return tasks, policy, value, rng


def params_dict(pairs) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in pairs}


def logprob_loss_fn(policy: PolicyParams, task: Task, b: int, trace,
                    temperature: float = 1.0):
    """(f, params) for grad-checking log pi(trace | task, b)."""

    def f(arrays):
        p = policy_from_arrays(policy, arrays)
        sc = rescore(p, task, b, trace, temperature)
        grads, dphi = trace_backward(p, sc, 1.0, 0.0)
        grads.update(finish_phi_backward(p, sc.phi_cache, dphi))
        full = {k: grads.get(k, np.zeros_like(v)) for k, v in arrays.items()}
        return sc.logprob, full

    return f, params_dict(policy_named_arrays(policy))


def entropy_loss_fn(policy: PolicyParams, task: Task, b: int, trace,
                    temperature: float = 1.0):
    """(f, params) for grad-checking the mean step entropy of a trace."""

    def f(arrays):
        p = policy_from_arrays(policy, arrays)
        sc = rescore(p, task, b, trace, temperature)
        n = max(sc.events.size, 1)
        grads, dphi = trace_backward(p, sc, 0.0, 1.0 / n)
        grads.update(finish_phi_backward(p, sc.phi_cache, dphi))
        full = {k: grads.get(k, np.zeros_like(v)) for k, v in arrays.items()}
        return sc.mean_entropy, full

    return f, params_dict(policy_named_arrays(policy))


def embed_gate_loss_fn(policy: PolicyParams, b: int, h: np.ndarray,
                       probe: np.ndarray):
    """(f, params) for grad-checking probe . gate_inject(h, phi(b), w_g)."""

    def f(arrays):
        p = policy_from_arrays(policy, arrays)
        phi, cache = embed_budget_forward(p.budget, b, p.b_min, p.b_max)
        out = gate_inject(h, phi, p.budget.gate_vec)
        loss = float(probe @ out)
        _, dphi, dgate = gate_inject_backward(h, phi, p.budget.gate_vec, probe)
        g = embed_budget_backward(p.budget, cache, dphi)
        grads = {"budget.proj.w1": g.w1, "budget.proj.b1": g.b1,
                 "budget.proj.w2": g.w2, "budget.proj.b2": g.b2,
                 "budget.gate_vec": dgate}
        full = {k: grads.get(k, np.zeros_like(v)) for k, v in arrays.items()}
        return loss, full

    return f, params_dict(policy_named_arrays(policy))


def value_mse_fn(value: ValueNetParams,
                 batch: list[tuple[np.ndarray, np.ndarray, float]]):
    """(f, params) for grad-checking the value-net mean squared error."""

    def f(arrays):
        psi = value_from_arrays(value, arrays)
        n = len(batch)
        loss = 0.0
        grads = {k: np.zeros_like(v) for k, v in arrays.items()}
        for feat, phi, target in batch:
            v, cache = value_forward(psi, feat, phi)
            err = v - target
            loss += err * err / n
            named, _ = value_backward(psi, cache, 2.0 * err / n, feat.size)
            for k, g in named.items():
                grads[k] += g
        return loss, grads

    return f, params_dict(value_named_arrays(value))


def total_loss_fn(policy: PolicyParams, value: ValueNetParams,
                  items: list[BatchItem], eps_clip: float, c_v: float,
                  c_h: float):
    """(f, params) for grad-checking the full composite training loss over
    a fixed batch (advantages and reward targets frozen)."""

    def f(arrays):
        p = policy_from_arrays(policy, arrays)
        psi = value_from_arrays(value, arrays)
        loss, grads, _ = batch_loss_and_grads(p, psi, items, eps_clip,
                                              c_v, c_h)
        full = {k: grads.get(k, np.zeros_like(v)) for k, v in arrays.items()}
        return loss, full

    params = params_dict(policy_named_arrays(policy))
    params.update(params_dict(value_named_arrays(value)))
    return f, params


def sample_batch_items(policy: PolicyParams, tasks: list[Task], rng,
                       n_items: int = 4, m: int = 2,
                       lam: float = 0.3) -> list[BatchItem]:
    """Random rollouts frozen into loss-check batch items, with synthetic
    normalized advantages and slightly perturbed old log-probs (so the
    importance ratio is not exactly 1)."""
    items = []
    for _ in range(n_items):
        task = tasks[int(rng.integers(len(tasks)))]
        b = int(rng.integers(max(policy.b_min, m), policy.b_max + 1))
        cfg = GenerationConfig(max_think=policy.b_max,
                               rng_seed=int(rng.integers(2 ** 31)))
        trace, sc = sample_trace(policy, task, b, cfg,
                                 np.random.default_rng(int(rng.integers(2 ** 31))))
        prof = reward_profile(task, trace, b, m, lam)
        items.append(BatchItem(
            task=task, budget=b, trace=trace,
            adv=float(rng.normal()),
            logprob_old=sc.logprob + float(rng.normal(0.0, 0.05)),
            reward=prof.cumulative))
    return items


# --- fast self-test battery ---------------------------------------------------


def run_self_checks(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []

    def add(name, passed, detail):
        results.append((name, bool(passed), detail))

    tasks, policy, value, rng = small_setup(seed)
    task = tasks[0]
    cfg = GenerationConfig(max_think=policy.b_max, rng_seed=seed)
    trace, _ = sample_trace(policy, task, 8, cfg, np.random.default_rng(seed))

    f, params = logprob_loss_fn(policy, task, 8, trace)
    err = grad_check_best(f, params)
    add("log-prob gradient", err < 1e-5, f"max rel err {err:.2e}")

    f, params = embed_gate_loss_fn(policy, 6, rng.standard_normal(policy.hidden_dim),
                                   rng.standard_normal(policy.hidden_dim))
    err = grad_check_best(f, params)
    add("budget embed + gate gradient", err < 1e-5, f"max rel err {err:.2e}")

    phi = rng.standard_normal(policy.hidden_dim)
    batch = [(t.feature_vec, phi, float(rng.normal())) for t in tasks]
    f, params = value_mse_fn(value, batch)
    err = grad_check_best(f, params)
    add("value MSE gradient", err < 1e-5, f"max rel err {err:.2e}")

    items = sample_batch_items(policy, tasks, rng)
    f, params = total_loss_fn(policy, value, items, 0.2, 0.5, 0.01)
    err = grad_check_best(f, params)
    add("composite loss gradient", err < 1e-5, f"max rel err {err:.2e}")

    ok = True
    for _ in range(200):
        b = int(rng.integers(4, 16))
        toks = rng.integers(0, 3, size=int(rng.integers(0, b + 1)))
        tr = Trace(think_tokens=toks, token_logprobs=np.zeros(toks.size + 1))
        prof = reward_profile(task, tr, b, 4, 0.3)
        ok = ok and sum(prof.progress) == prof.outcomes[-1]
    add("telescoping progress rewards", ok, "sum(progress) == final outcome")

    vals = (ppo_loss(1.0, 0.7, 0.2), ppo_loss(2.0, 1.0, 0.2),
            ppo_loss(0.5, -1.0, 0.2))
    ok = vals == (-0.7, -1.2, 0.8)
    add("clipped surrogate hand values", ok, f"{vals}")

    pts = truncation_points(4096, 4)
    add("truncation grid", pts == [1024, 2048, 3072, 4096], f"{pts}")

    total = enumerate_trace_probability(policy, task, budget=2)
    add("trace probabilities sum to 1", abs(total - 1.0) < 1e-10,
        f"sum {total:.12f}")
    return results


def enumerate_trace_probability(policy: PolicyParams, task: Task,
                                budget: int) -> float:
    """Brute-force sum of exp(log_prob) over every think sequence of length
    <= budget; exactly 1 when the policy is properly normalized."""
    import itertools

    from .policy import log_prob

    total = 0.0
    for n_think in range(budget + 1):
        for combo in itertools.product(range(3), repeat=n_think):
            tr = Trace(think_tokens=np.array(combo, dtype=np.int64),
                       token_logprobs=np.zeros(n_think + 1))
            total += float(np.exp(log_prob(policy, task, budget, tr)))
    return total
