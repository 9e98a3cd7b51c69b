"""Synthetic tasks, traces, truncation, and the counting verifier."""

import numpy as np
import pytest

from bacr.environment import (
    ERROR,
    FILLER,
    WORK,
    Task,
    Trace,
    load_taskset,
    make_taskset,
    save_taskset,
    truncate,
    verify,
)


def make_trace(tokens) -> Trace:
    tokens = np.asarray(tokens, dtype=np.int64)
    return Trace(think_tokens=tokens, token_logprobs=np.zeros(tokens.size + 1))


def task_with_steps(s: int) -> Task:
    return Task(id="t", group=1, required_steps=s, feature_vec=np.zeros(3))


class TestMakeTaskset:
    def test_single_task(self):
        ts = make_taskset(1, 1, (3,), np.random.default_rng(0))
        assert len(ts.tasks) == 1
        assert ts.tasks[0].required_steps == 3

    def test_groups_and_requirements(self):
        ts = make_taskset(4, 3, (2, 4, 8, 16), np.random.default_rng(1))
        assert len(ts.tasks) == 12
        for k, s in zip(range(1, 5), (2, 4, 8, 16)):
            group = ts.group_tasks(k)
            assert len(group) == 3
            assert all(t.required_steps == s for t in group)
            assert all(np.argmax(t.feature_vec[:4]) == k - 1 for t in group)

    def test_deterministic_given_seed(self):
        a = make_taskset(3, 2, (1, 2, 3), np.random.default_rng(42))
        b = make_taskset(3, 2, (1, 2, 3), np.random.default_rng(42))
        for ta, tb in zip(a.tasks, b.tasks):
            assert ta.id == tb.id
            np.testing.assert_array_equal(ta.feature_vec, tb.feature_vec)

    def test_nonincreasing_requirements_rejected(self):
        with pytest.raises(ValueError):
            make_taskset(3, 2, (2, 2, 3), np.random.default_rng(0))
        with pytest.raises(ValueError):
            make_taskset(2, 2, (4, 3), np.random.default_rng(0))

    def test_every_task_in_exactly_one_bucket(self):
        ts = make_taskset(3, 4, (1, 2, 3), np.random.default_rng(2))
        seen = [tid for ids in ts.group_index.values() for tid in ids]
        assert sorted(seen) == sorted(t.id for t in ts.tasks)
        assert len(set(seen)) == len(seen)


class TestTruncate:
    def test_zero_budget_empties_think(self):
        tr = truncate(make_trace([WORK, FILLER, WORK]), 0)
        assert tr.think_len == 0
        assert tr.answer_token == "ANSWER"

    def test_budget_beyond_length_is_identity(self):
        t = make_trace([WORK, FILLER])
        assert truncate(t, 10) is t

    def test_half_length(self):
        tr = truncate(make_trace([WORK, ERROR, FILLER, WORK, WORK]), 2)
        np.testing.assert_array_equal(tr.think_tokens, [WORK, ERROR])
        assert tr.budget_used == 2

    def test_idempotent(self):
        t = make_trace([WORK, FILLER, ERROR, WORK])
        once = truncate(t, 3)
        twice = truncate(once, 3)
        np.testing.assert_array_equal(once.think_tokens, twice.think_tokens)

    def test_negative_budget_rejected(self):
        with pytest.raises(ValueError):
            truncate(make_trace([WORK]), -1)


class TestVerify:
    def test_enough_work_and_answer(self):
        assert verify(task_with_steps(2), make_trace([WORK, WORK])) == 1

    def test_insufficient_work(self):
        assert verify(task_with_steps(2), make_trace([WORK, FILLER])) == 0

    def test_error_poisons_even_after_enough_work(self):
        assert verify(task_with_steps(1), make_trace([WORK, ERROR, WORK])) == 0

    def test_depends_only_on_prefix(self):
        task = task_with_steps(2)
        base = [WORK, WORK, FILLER]
        for suffix in ([], [ERROR], [WORK, ERROR, ERROR]):
            tr = truncate(make_trace(base + suffix), 3)
            assert verify(task, tr) == 1

    def test_monotone_in_budget_without_errors(self):
        task = task_with_steps(3)
        trace = make_trace([FILLER, WORK, WORK, FILLER, WORK, WORK])
        results = [verify(task, truncate(trace, b)) for b in range(7)]
        assert results == sorted(results)
        assert results[-1] == 1

    def test_zero_after_first_error_position(self):
        task = task_with_steps(1)
        trace = make_trace([WORK, ERROR, WORK, WORK])
        assert verify(task, truncate(trace, 1)) == 1
        for b in range(2, 5):
            assert verify(task, truncate(trace, b)) == 0

    def test_missing_answer_fails(self):
        tr = make_trace([WORK, WORK])
        tr.answer_token = "nothing"
        assert verify(task_with_steps(1), tr) == 0


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        ts = make_taskset(3, 2, (2, 5, 9), np.random.default_rng(5))
        path = tmp_path / "tasks.json"
        save_taskset(path, ts)
        loaded = load_taskset(path)
        assert len(loaded.tasks) == len(ts.tasks)
        for a, b in zip(ts.tasks, loaded.tasks):
            assert (a.id, a.group, a.required_steps) == (b.id, b.group, b.required_steps)
            np.testing.assert_array_equal(a.feature_vec, b.feature_vec)
        assert loaded.group_index == ts.group_index


class TestTraceInvariants:
    def test_logprob_length_mismatch_is_allowed_only_via_budget_used(self):
        with pytest.raises(ValueError):
            Trace(think_tokens=np.array([WORK]), token_logprobs=np.zeros(2),
                  budget_used=3)

    def test_work_count(self):
        assert make_trace([WORK, FILLER, WORK, ERROR]).work_count() == 2
