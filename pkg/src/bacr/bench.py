"""Benchmark the kernel backends against each other.

Times the three hot operations (sampled rollout, trace re-scoring, trace
backward) on a training-sized policy, and checks that the backends agree
numerically on a scored trace.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .environment import make_taskset
from .policy import PolicyParams, policy_init, position_encoding_table


def _setup(steps: int):
    rng = np.random.default_rng(0)
    taskset = make_taskset(4, 4, (2, 6, 14, 30), rng)
    policy = policy_init(taskset.tasks[0].feature_vec.size, 16, 8, 8,
                         max(steps, 16), rng)
    policy.head[3] -= 8.0  # suppress early stopping so every op runs the
    # full trace length and the timings are comparable
    task = taskset.tasks[-1]
    return policy, task


def _args(policy: PolicyParams, task, budget: int):
    phi = np.zeros(policy.hidden_dim)
    posenc = position_encoding_table(budget, policy.pos_dim)
    ip = policy.input_proj
    return (ip.w1, ip.b1, ip.w2, ip.b2, kernels.ACT_ID_SILU,
            policy.budget.gate_vec, phi, policy.head, task.feature_vec,
            posenc, 1.0 / policy.b_max, budget, 1.0)


def _time(fn, repeats: int) -> float:
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def run_benchmark(steps: int = 64, repeats: int = 200) -> dict:
    policy, task = _setup(steps)
    common = _args(policy, task, steps)
    uniforms = np.random.default_rng(1).random(steps)
    # force a full-length trace so All backends do identical work
    tokens = np.full(steps, 2, dtype=np.int64)

    results: dict = {}
    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}  "
          f"(available: {', '.join(backends)})")
    print(f"trace length {steps}, {repeats} repeats, times per trace")
    header = f"{'op':<12}" + "".join(f"{b:>14}" for b in backends)
    print(header)

    rows = {"sample": {}, "score": {}, "backward": {}}
    agree = {}
    for name in backends:
        mod = kernels.get_backend(name)
        rows["sample"][name] = _time(
            lambda: mod.run_trace(kernels.MODE_SAMPLE, *common, uniforms, None),
            repeats)
        rows["score"][name] = _time(
            lambda: mod.run_trace(kernels.MODE_SCORE, *common, None, tokens),
            repeats)
        _, logps, _, _, caches = mod.run_trace(kernels.MODE_SCORE, *common,
                                               None, tokens)
        agree[name] = float(np.sum(logps))
        rows["backward"][name] = _time(
            lambda: mod.backward_trace(*common[:8], caches, tokens,
                                       1.0, 0.01, 1.0),
            repeats)

    for op, timings in rows.items():
        line = f"{op:<12}"
        for name in backends:
            line += f"{timings[name] * 1e6:>12.1f}us"
        print(line)
    if len(backends) == 2:
        speedup = rows["sample"]["python"] / rows["sample"]["cython"]
        drift = abs(agree["python"] - agree["cython"])
        print(f"sample speedup: {speedup:.1f}x, log-prob drift: {drift:.2e}")
        results["speedup"] = speedup
        results["drift"] = drift
    results["timings"] = rows
    return results


if __name__ == "__main__":
    run_benchmark()
