"""Synthetic verifiable-reasoning environment.

A task in difficulty group k is solved by a trace whose think segment
contains at least s_k WORK tokens and no ERROR token, followed by an answer
token. The verifier is pure token counting, so it is deterministic, depends
only on the inspected prefix, and is trivially brute-forceable in tests.

The four-symbol think vocabulary {WORK, ERROR, FILLER} plus the forced
ANSWER token is the smallest alphabet in which prefix success can improve,
stall, or be destroyed as the budget grows (an ERROR after a once-correct
prefix flips it back to incorrect).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

WORK = 0
ERROR = 1
FILLER = 2
THINK_TOKEN_NAMES = ("WORK", "ERROR", "FILLER")
ANSWER_TOKEN = "ANSWER"

FEATURE_NOISE_STD = 0.01
FEATURE_NOISE_DIM = 4


@dataclass(frozen=True)
class Task:
    """One synthetic question: difficulty group, required WORK count, and a
    feature vector (group one-hot + normalized step requirement + noise)
    consumed by the policy and the value function."""

    id: str
    group: int
    required_steps: int
    feature_vec: np.ndarray

    def __post_init__(self):
        if self.required_steps < 1:
            raise ValueError("required_steps must be >= 1")
        if self.group < 1:
            raise ValueError("group index is 1-based")
        if not np.all(np.isfinite(self.feature_vec)):
            raise ValueError("feature_vec must be finite")


@dataclass
class Trace:
    """A generated sequence: think tokens, then one forced answer token.

    ``token_logprobs`` covers every token slot in order: the sampled think
    tokens, the early-stop event when the think segment ended before the
    budget, and the forced answer (always 0.0, probability one).
    """

    think_tokens: np.ndarray
    token_logprobs: np.ndarray
    answer_token: str = ANSWER_TOKEN
    budget_used: int = field(default=-1)

    def __post_init__(self):
        self.think_tokens = np.asarray(self.think_tokens, dtype=np.int64)
        self.token_logprobs = np.asarray(self.token_logprobs, dtype=np.float64)
        if self.budget_used < 0:
            self.budget_used = int(self.think_tokens.size)
        if self.budget_used != self.think_tokens.size:
            raise ValueError("budget_used must equal think length")

    @property
    def think_len(self) -> int:
        return int(self.think_tokens.size)

    def work_count(self) -> int:
        return int(np.sum(self.think_tokens == WORK))


@dataclass
class TaskSet:
    tasks: list[Task]
    group_index: dict[int, list[str]]

    def __post_init__(self):
        self._by_id = {t.id: t for t in self.tasks}
        seen: set[str] = set()
        for ids in self.group_index.values():
            for tid in ids:
                if tid in seen:
                    raise ValueError(f"task {tid} appears in two group buckets")
                seen.add(tid)
        if seen != set(self._by_id):
            raise ValueError("group_index does not cover the task list exactly")

    def task(self, task_id: str) -> Task:
        return self._by_id[task_id]

    def group_tasks(self, group: int) -> list[Task]:
        return [self._by_id[tid] for tid in self.group_index[group]]

    @property
    def num_groups(self) -> int:
        return len(self.group_index)


def make_taskset(num_groups: int, tasks_per_group: int,
                 step_requirements: tuple[int, ...],
                 rng: np.random.Generator,
                 noise_dim: int = FEATURE_NOISE_DIM) -> TaskSet:
    """Deterministic synthetic task set: ``tasks_per_group`` tasks in each of
    ``num_groups`` difficulty buckets with strictly increasing WORK-step
    requirements."""
    if num_groups < 1:
        raise ValueError("need at least one group")
    if len(step_requirements) != num_groups:
        raise ValueError("one step requirement per group")
    if any(b <= a for a, b in zip(step_requirements, step_requirements[1:])):
        raise ValueError("step requirements must be strictly increasing")
    max_steps = float(step_requirements[-1])
    tasks = []
    group_index: dict[int, list[str]] = {}
    for k in range(1, num_groups + 1):
        s_k = int(step_requirements[k - 1])
        ids = []
        for i in range(tasks_per_group):
            one_hot = np.zeros(num_groups)
            one_hot[k - 1] = 1.0
            noise = rng.normal(0.0, FEATURE_NOISE_STD, size=noise_dim)
            feat = np.concatenate([one_hot, [s_k / max_steps], noise])
            tid = f"g{k}_t{i}"
            tasks.append(Task(id=tid, group=k, required_steps=s_k,
                              feature_vec=feat))
            ids.append(tid)
        group_index[k] = ids
    return TaskSet(tasks=tasks, group_index=group_index)


def truncate(trace: Trace, b: int) -> Trace:
    """Prefix of the think segment under budget b, answer token re-derived.

    The forced answer step always emits ANSWER, so re-derivation just
    reattaches it. Idempotent for b >= think length. The returned
    log-probabilities are sliced for bookkeeping only; a truncated trace is
    meant for verification, not re-scoring.
    """
    if b < 0:
        raise ValueError("budget must be nonnegative")
    keep = min(trace.think_len, int(b))
    if keep == trace.think_len:
        return trace
    logps = np.concatenate([trace.token_logprobs[:keep], [0.0]])
    return Trace(think_tokens=trace.think_tokens[:keep].copy(),
                 token_logprobs=logps)


def verify(task: Task, prefix: Trace) -> int:
    """1 iff the prefix has >= required_steps WORK tokens, no ERROR token,
    and an answer token; 0 otherwise. Pure counting over the prefix."""
    if prefix.answer_token != ANSWER_TOKEN:
        return 0
    if np.any(prefix.think_tokens == ERROR):
        return 0
    return int(prefix.work_count() >= task.required_steps)


# --- serialization -----------------------------------------------------------


def save_taskset(path, taskset: TaskSet) -> None:
    payload = {"tasks": [
        {"id": t.id, "group": t.group, "required_steps": t.required_steps,
         "feature_vec": t.feature_vec.tolist()}
        for t in taskset.tasks
    ]}
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_taskset(path) -> TaskSet:
    with open(path) as fh:
        payload = json.load(fh)
    tasks = [Task(id=e["id"], group=e["group"],
                  required_steps=e["required_steps"],
                  feature_vec=np.array(e["feature_vec"], dtype=np.float64))
             for e in payload["tasks"]]
    group_index: dict[int, list[str]] = {}
    for t in tasks:
        group_index.setdefault(t.group, []).append(t.id)
    return TaskSet(tasks=tasks, group_index=group_index)


__all__ = [
    "WORK", "ERROR", "FILLER", "ANSWER_TOKEN", "THINK_TOKEN_NAMES",
    "Task", "Trace", "TaskSet", "make_taskset", "truncate", "verify",
    "save_taskset", "load_taskset",
]
