"""Budget-conditioned policy: step logits, generation, re-scoring, entropy,
and the trace dump format."""

import math

import numpy as np
import pytest

from bacr.environment import Task, Trace
from bacr.numerics import grad_check_best, softmax
from bacr.policy import (
    VOCAB_SIZE,
    GenerationConfig,
    entropy,
    generate,
    load_traces,
    log_prob,
    dump_traces,
    policy_init,
    rescore_slow,
    sample_trace,
    step_logits,
    trace_dump_row,
)
from bacr.selfcheck import (
    enumerate_trace_probability,
    logprob_loss_fn,
    small_setup,
)


def tiny_policy(seed=0, hidden=6, zero=False, use_embed=True):
    rng = np.random.default_rng(seed)
    task = Task(id="t", group=1, required_steps=2,
                feature_vec=rng.normal(size=4))
    p = policy_init(4, hidden, 4, 2, 32, rng, use_budget_embedding=use_embed)
    if zero:
        for arr in (p.input_proj.w1, p.input_proj.b1, p.input_proj.w2,
                    p.input_proj.b2, p.head, p.budget.proj.w1,
                    p.budget.proj.b1, p.budget.proj.w2, p.budget.proj.b2,
                    p.budget.gate_vec):
            arr[:] = 0.0
    else:
        for arr in (p.input_proj.w1, p.input_proj.w2, p.head):
            arr += 0.2 * rng.standard_normal(arr.shape)
    return p, task


def make_trace(tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    return Trace(think_tokens=tokens, token_logprobs=np.zeros(tokens.size + 1))


class TestStepLogits:
    def test_zero_params_uniform(self):
        p, task = tiny_policy(zero=True)
        probs = softmax(step_logits(p, task, 0, 8, 0))
        np.testing.assert_allclose(probs, np.full(VOCAB_SIZE, 0.25), atol=1e-15)

    def test_deterministic(self):
        p, task = tiny_policy(1)
        a = step_logits(p, task, 3, 10, 1)
        b = step_logits(p, task, 3, 10, 1)
        np.testing.assert_array_equal(a, b)

    def test_budget_conditioning_is_live(self):
        p, task = tiny_policy(2)
        a = step_logits(p, task, 0, 4, 0)
        b = step_logits(p, task, 0, 30, 0)
        assert not np.allclose(a, b)

    def test_budget_invariant_when_embedding_zeroed(self):
        p, task = tiny_policy(3, use_embed=False)
        a = step_logits(p, task, 0, 4, 0)
        b = step_logits(p, task, 0, 30, 0)
        np.testing.assert_array_equal(a, b)


class TestGenerate:
    def test_zero_budget(self):
        p, task = tiny_policy(4)
        trace = generate(p, task, 0, GenerationConfig(max_think=32))
        assert trace.think_len == 0
        assert trace.answer_token == "ANSWER"
        assert trace.token_logprobs.size == 1 and trace.token_logprobs[0] == 0.0

    def test_budget_respected_over_many_samples(self):
        p, task = tiny_policy(5)
        rng = np.random.default_rng(0)
        for _ in range(300):
            trace = generate(p, task, 3, GenerationConfig(max_think=32), rng)
            assert trace.think_len <= 3
            assert trace.budget_used == trace.think_len

    def test_seed_replay_identical(self):
        p, task = tiny_policy(6)
        cfg = GenerationConfig(max_think=32, rng_seed=77)
        a = generate(p, task, 12, cfg)
        b = generate(p, task, 12, cfg)
        np.testing.assert_array_equal(a.think_tokens, b.think_tokens)
        np.testing.assert_array_equal(a.token_logprobs, b.token_logprobs)

    def test_greedy_is_deterministic_argmax(self):
        p, task = tiny_policy(7)
        cfg = GenerationConfig(max_think=32, greedy=True)
        a = generate(p, task, 10, cfg)
        b = generate(p, task, 10, cfg)
        np.testing.assert_array_equal(a.think_tokens, b.think_tokens)
        work = 0
        for s, tok in enumerate(a.think_tokens):
            assert tok == int(np.argmax(step_logits(p, task, s, 10, work)))
            if tok == 0:
                work += 1

    def test_max_think_caps_generation(self):
        p, task = tiny_policy(8)
        trace = generate(p, task, 30, GenerationConfig(max_think=5))
        assert trace.think_len <= 5


class TestLogProb:
    def test_replay_matches_stored_logprobs(self):
        p, task = tiny_policy(9)
        rng = np.random.default_rng(1)
        for b in (0, 1, 5, 20):
            trace, sc = sample_trace(p, task, b, GenerationConfig(max_think=32), rng)
            assert log_prob(p, task, b, trace) == pytest.approx(
                float(trace.token_logprobs.sum()), abs=1e-10)
            assert sc.logprob == pytest.approx(float(trace.token_logprobs.sum()),
                                               abs=1e-12)

    def test_uniform_policy_closed_form(self):
        p, task = tiny_policy(zero=True)
        # full-length trace: b sampled events, no stop event
        trace = make_trace([0, 2, 1])
        assert log_prob(p, task, 3, trace) == pytest.approx(-3 * math.log(4), abs=1e-12)
        # early stop: two think tokens then the stop event, three draws total
        assert log_prob(p, task, 5, make_trace([0, 2])) == pytest.approx(
            -3 * math.log(4), abs=1e-12)

    def test_budget_violation_rejected(self):
        p, task = tiny_policy(10)
        with pytest.raises(ValueError):
            log_prob(p, task, 2, make_trace([0, 0, 0]))

    def test_matches_slow_reference(self):
        p, task = tiny_policy(11)
        rng = np.random.default_rng(2)
        for b in (1, 4, 16):
            trace = generate(p, task, b, GenerationConfig(max_think=32), rng)
            fast = log_prob(p, task, b, trace)
            slow, slow_ent = rescore_slow(p, task, b, trace)
            assert fast == pytest.approx(slow, abs=1e-10)
            assert entropy(p, task, b, trace) == pytest.approx(slow_ent, abs=1e-10)

    def test_trace_probabilities_sum_to_one(self):
        for seed in range(3):
            p, task = tiny_policy(seed)
            total = enumerate_trace_probability(p, task, budget=2)
            assert abs(total - 1.0) < 1e-10


class TestEntropy:
    def test_uniform_policy(self):
        p, task = tiny_policy(zero=True)
        trace = make_trace([0, 1, 2])
        assert entropy(p, task, 3, trace) == pytest.approx(math.log(4), abs=1e-12)

    def test_never_exceeds_log_vocab(self):
        for seed in range(5):
            p, task = tiny_policy(seed)
            trace = generate(p, task, 10, GenerationConfig(max_think=32),
                             np.random.default_rng(seed))
            assert entropy(p, task, 10, trace) <= math.log(4) + 1e-12

    def test_near_deterministic_policy(self):
        p, task = tiny_policy(12, zero=True)
        p.input_proj.b2[:] = 1.0   # constant hidden state of ones
        p.head[0, :] = 20.0        # WORK logit dominates every step
        trace = make_trace([0, 0, 0, 0])
        assert entropy(p, task, 4, trace) < 0.01

    def test_empty_trace(self):
        p, task = tiny_policy(13)
        assert entropy(p, task, 0, make_trace([])) == 0.0


class TestGradients:
    def test_logprob_gradient_matches_finite_differences(self):
        tasks, policy, _, rng = small_setup(21)
        task = tasks[0]
        trace, _ = sample_trace(policy, task, 8,
                                GenerationConfig(max_think=policy.b_max),
                                np.random.default_rng(3))
        f, params = logprob_loss_fn(policy, task, 8, trace)
        assert grad_check_best(f, params) < 1e-5


class TestTraceDump:
    def test_roundtrip(self, tmp_path):
        p, task = tiny_policy(14)
        rng = np.random.default_rng(4)
        rows = []
        for b in (2, 6, 12):
            trace = generate(p, task, b, GenerationConfig(max_think=32), rng)
            rows.append(trace_dump_row(task, b, trace))
        path = tmp_path / "traces.jsonl"
        dump_traces(path, rows)
        loaded = load_traces(path)
        assert loaded == rows
        for row in loaded:
            assert row["tokens"][-1] == "ANSWER"
            assert len(row["tokens"]) == len(row["logprobs"])
            assert row["logprobs"][-1] == 0.0

    def test_replay_oracle_through_dump_format(self, tmp_path):
        """Dumped traces re-score to their stored log-probabilities."""
        from bacr.policy import trace_from_dump_row

        p, task = tiny_policy(15)
        rng = np.random.default_rng(5)
        rows = [trace_dump_row(task, b, generate(
            p, task, b, GenerationConfig(max_think=32), rng))
            for b in (1, 4, 9, 16)]
        path = tmp_path / "traces.jsonl"
        dump_traces(path, rows)
        for row, b_orig in zip(load_traces(path), (1, 4, 9, 16)):
            task_id, b, trace = trace_from_dump_row(row)
            assert (task_id, b) == (task.id, b_orig)
            assert log_prob(p, task, b, trace) == pytest.approx(
                sum(row["logprobs"]), abs=1e-10)
