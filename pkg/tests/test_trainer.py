"""Training loop: losses, minibatch mechanics, estimator modes,
determinism, evaluation, and checkpoints."""

import itertools
import math

import numpy as np
import pytest

import bacr.trainer as trainer_mod
from bacr.environment import Trace, make_taskset
from bacr.numerics import grad_check_best
from bacr.policy import (
    GenerationConfig,
    log_prob,
    policy_init,
    policy_named_arrays,
    rescore,
    finish_phi_backward,
    trace_backward,
    policy_from_arrays,
)
from bacr.rewards import reward_profile
from bacr.selfcheck import sample_batch_items, small_setup, total_loss_fn
from bacr.trainer import (
    DivergenceError,
    IterationMetrics,
    TrainConfig,
    evaluate_anytime,
    load_checkpoint,
    ppo_dlogp,
    ppo_loss,
    probe_pass_rates,
    rng_for,
    run_minibatch,
    save_checkpoint,
    total_loss,
    train,
)


def tiny_cfg(**overrides):
    base = dict(K=2, step_requirements=(1, 3), tasks_per_group=2, G=4,
                epochs=2, iters_per_epoch=3, batch_tasks=2, b_min=4,
                b_max=16, eval_budgets=(4, 16), eval_samples=2,
                embed_dim=8, pos_dim=4, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestPpoLoss:
    def test_unit_ratio(self):
        for adv in (-2.0, -0.3, 0.0, 0.7, 1.5):
            assert ppo_loss(1.0, adv, 0.2) == -adv

    def test_clipped_positive_advantage(self):
        assert ppo_loss(2.0, 1.0, 0.2) == -1.2

    def test_pessimistic_negative_advantage(self):
        assert ppo_loss(0.5, -1.0, 0.2) == 0.8

    def test_nonpositive_ratio_rejected(self):
        with pytest.raises(ValueError):
            ppo_loss(0.0, 1.0, 0.2)

    def test_dlogp_matches_numeric_derivative(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            l_new = rng.uniform(-1.0, 1.0)
            adv = rng.uniform(-2, 2)
            eps_c = 0.2
            ratio = math.exp(l_new)
            if abs(ratio - (1 - eps_c)) < 1e-3 or abs(ratio - (1 + eps_c)) < 1e-3:
                continue  # kink of the clip; derivative undefined there
            h = 1e-7
            num = (ppo_loss(math.exp(l_new + h), adv, eps_c)
                   - ppo_loss(math.exp(l_new - h), adv, eps_c)) / (2 * h)
            assert ppo_dlogp(ratio, adv, eps_c) == pytest.approx(num, abs=1e-6)


class TestTotalLoss:
    def test_policy_only(self):
        assert total_loss(1.7, 5.0, 3.0, 0.0, 0.0) == 1.7

    def test_hand_value(self):
        assert total_loss(1.0, 2.0, 1.0, 0.5, 0.01) == pytest.approx(1.99)

    def test_entropy_lowers_loss(self):
        lo = total_loss(1.0, 1.0, 2.0, 0.5, 0.01)
        hi = total_loss(1.0, 1.0, 1.0, 0.5, 0.01)
        assert lo < hi


class TestBruteForceGradientOracle:
    def test_score_function_gradient_equals_enumerated_gradient(self):
        """The accumulated score-function gradient of J = sum_t P(t) R(t)
        must match finite differences of the enumerated expectation."""
        tasks, policy, _, rng = small_setup(17, b_min=2, b_max=8)
        task = tasks[0]
        budget = 2
        traces = []
        for n in range(budget + 1):
            for combo in itertools.product(range(3), repeat=n):
                traces.append(Trace(think_tokens=np.array(combo, dtype=np.int64),
                                    token_logprobs=np.zeros(n + 1)))
        rewards = [reward_profile(task, t, budget, 2, 0.3).cumulative + 0.2
                   for t in traces]

        def f(arrays):
            p = policy_from_arrays(policy, arrays)
            total = 0.0
            grads = {k: np.zeros_like(v) for k, v in arrays.items()}
            for t, r in zip(traces, rewards):
                sc = rescore(p, task, budget, t)
                weight = math.exp(sc.logprob) * r
                total += weight
                if sc.events.size:
                    g, dphi = trace_backward(p, sc, weight, 0.0)
                    g.update(finish_phi_backward(p, sc.phi_cache, dphi))
                    for k, v in g.items():
                        grads[k] += v
            return total, grads

        params = {k: v.copy() for k, v in policy_named_arrays(policy)}
        assert grad_check_best(f, params) < 1e-5


class TestRunMinibatch:
    def run(self, cfg, workers=1):
        taskset = make_taskset(cfg.K, cfg.tasks_per_group,
                               cfg.step_requirements, rng_for(cfg.seed, 0))
        feat = taskset.tasks[0].feature_vec.size
        policy = policy_init(feat, cfg.embed_dim, cfg.pos_dim, cfg.b_min,
                             cfg.b_max, rng_for(cfg.seed, 1),
                             use_budget_embedding=cfg.bup)
        value = None
        if cfg.estimator == "bcae":
            from bacr.advantage import value_init
            value = value_init(feat, cfg.embed_dim, rng_for(cfg.seed, 2))
        from bacr.curriculum import curriculum_init
        state = curriculum_init(np.array([0.3] * cfg.K), cfg.budget_range, 0.15)
        return run_minibatch(policy, value, state, taskset, cfg, 1, 1,
                             workers=workers)

    def test_deterministic_and_worker_independent(self):
        cfg = tiny_cfg()
        g1, m1, r1 = self.run(cfg, workers=1)
        g2, m2, r2 = self.run(cfg, workers=1)
        g4, m4, r4 = self.run(cfg, workers=4)
        assert m1 == m2 == m4
        assert r1 == r2 == r4
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])
            np.testing.assert_array_equal(g1[k], g4[k])

    def test_grpo_mode_single_budget_outcome_only(self):
        cfg = tiny_cfg(estimator="grpo", bup=False, cas=False, tdr=False,
                       bcae=False)
        _, metrics, rows = self.run(cfg)
        assert metrics.mean_budget == cfg.b_max
        assert metrics.progress_contribution == 0.0
        # outcome-only reward: a single truncation point at the full budget
        assert {row["truncation_budget"] for row in rows} == {cfg.b_max}
        assert all(row["dense"] in (0.0, 1.0) for row in rows)

    def test_brpo_mode_shares_budget_within_task(self):
        cfg = tiny_cfg(estimator="brpo", bcae=False)
        _, metrics, rows = self.run(cfg)
        finals = {}
        for row in rows:
            finals.setdefault(row["task_id"], set()).add(row["truncation_budget"])
        for task_id, points in finals.items():
            assert max(points) >= cfg.b_min  # the shared budget per task
        assert metrics.max_abs_group_adv_mean < 1e-12

    def test_bcae_mode_varies_budgets_within_task(self):
        cfg = tiny_cfg(estimator="bcae", bcae=True, G=8)
        _, metrics, rows = self.run(cfg)
        finals: dict[tuple, int] = {}
        for row in rows:
            key = (row["task_id"], row["rollout"])
            finals[key] = max(finals.get(key, 0), row["truncation_budget"])
        budgets_per_task: dict[str, set] = {}
        for (task_id, _), b in finals.items():
            budgets_per_task.setdefault(task_id, set()).add(b)
        assert any(len(bs) >= 2 for bs in budgets_per_task.values())

    def test_metrics_fields_finite(self):
        _, metrics, _ = self.run(tiny_cfg())
        for v in metrics.row():
            assert np.isfinite(v)


class TestVanillaPolicyGradientEquivalence:
    def test_wide_clip_no_extras_reduces_to_reinforce(self):
        """With the clip range effectively inactive and the value/entropy
        terms off, the batch gradient is exactly the advantage-weighted
        score-function estimator."""
        tasks, policy, value, rng = small_setup(23)
        items = sample_batch_items(policy, tasks, rng, n_items=4)
        for item in items:
            item.logprob_old = log_prob(policy, item.task, item.budget,
                                        item.trace)  # ratio exactly 1
        from bacr.trainer import batch_loss_and_grads
        _, grads, _ = batch_loss_and_grads(policy, None, items,
                                           eps_clip=0.99, c_v=0.0, c_h=0.0)
        manual: dict[str, np.ndarray] = {}
        n = len(items)
        for item in items:
            sc = rescore(policy, item.task, item.budget, item.trace)
            g, dphi = trace_backward(policy, sc, -item.adv / n, 0.0)
            g.update(finish_phi_backward(policy, sc.phi_cache, dphi))
            for k, v in g.items():
                manual[k] = manual.get(k, 0) + v
        assert set(grads) == set(manual)
        for k in grads:
            np.testing.assert_allclose(grads[k], manual[k], atol=1e-12)


class TestCompositeLossGradient:
    def test_full_loss_gradient_matches_finite_differences(self):
        tasks, policy, value, rng = small_setup(29)
        items = sample_batch_items(policy, tasks, rng, n_items=4)
        f, params = total_loss_fn(policy, value, items, 0.2, 0.5, 0.01)
        assert grad_check_best(f, params) < 1e-5


class TestTrain:
    def test_zero_epochs_returns_initialized_policy(self):
        cfg = tiny_cfg(epochs=0)
        res = train(cfg)
        fresh = policy_init(res.policy.feat_dim, cfg.embed_dim, cfg.pos_dim,
                            cfg.b_min, cfg.b_max, rng_for(cfg.seed, 1))
        for (name, a), (_, b) in zip(policy_named_arrays(res.policy),
                                     policy_named_arrays(fresh)):
            np.testing.assert_array_equal(a, b)
        assert res.metrics == []
        assert any(r["epoch"] == 0 for r in res.eval_rows)

    def test_metrics_stream_deterministic(self):
        cfg = tiny_cfg()
        a = train(cfg, workers=1)
        b = train(cfg, workers=3)
        assert a.metrics == b.metrics
        assert a.curriculum_rows == b.curriculum_rows
        assert a.eval_rows == b.eval_rows

    def test_trivial_taskset_reaches_high_reward_within_bound(self):
        cfg = TrainConfig(K=1, step_requirements=(1,), tasks_per_group=2,
                          epochs=25, iters_per_epoch=8, batch_tasks=2,
                          eval_budgets=(8,), eval_samples=1, seed=0)
        res = train(cfg)
        hits = [i for i, m in enumerate(res.metrics) if m.mean_reward >= 0.95]
        assert hits and hits[0] < 200

    def test_cas_off_freezes_curriculum(self):
        cfg = tiny_cfg(cas=False)
        res = train(cfg)
        mus = {}
        for row in res.curriculum_rows:
            mus.setdefault(row["group"], set()).add(row["mu"])
        assert all(len(v) == 1 for v in mus.values())

    def test_divergence_detection(self, monkeypatch):
        cfg = tiny_cfg()

        def poisoned(*args, **kwargs):
            metrics = IterationMetrics(
                epoch=1, iteration=1, mean_reward=float("nan"),
                policy_loss=float("nan"), value_loss=0.0, entropy=0.0,
                adv_variance=0.0, max_abs_group_adv_mean=0.0,
                progress_contribution=0.0, mean_tokens=0.0, mean_budget=0.0,
                train_pass_rate=0.0)
            return {}, metrics, []

        monkeypatch.setattr(trainer_mod, "run_minibatch", poisoned)
        with pytest.raises(DivergenceError) as err:
            train(cfg)
        assert err.value.snapshot


class TestProbeAndEvaluate:
    def setup_policy(self, oracle=False):
        cfg = tiny_cfg()
        taskset = make_taskset(cfg.K, cfg.tasks_per_group,
                               cfg.step_requirements, rng_for(cfg.seed, 0))
        policy = policy_init(taskset.tasks[0].feature_vec.size, cfg.embed_dim,
                             cfg.pos_dim, cfg.b_min, cfg.b_max,
                             rng_for(cfg.seed, 1))
        if oracle:
            for arr in (policy.input_proj.w1, policy.input_proj.w2,
                        policy.budget.proj.w1, policy.budget.proj.w2,
                        policy.head):
                arr[:] = 0.0
            policy.input_proj.b2[:] = 1.0
            policy.head[0, :] = 30.0  # always WORK
        return cfg, taskset, policy

    def test_probe_counts(self):
        cfg, taskset, policy = self.setup_policy()
        probe = probe_pass_rates(policy, taskset, cfg, epoch=0)
        assert len(probe) == cfg.K
        for succ, att in probe:
            assert att == cfg.tasks_per_group * cfg.G
            assert 0 <= succ <= att

    def test_zero_budget_accuracy_zero(self):
        cfg, taskset, policy = self.setup_policy(oracle=True)
        rows = evaluate_anytime(policy, taskset, (0,), seeds=[0, 1])
        assert rows[0]["accuracy"] == 0.0
        assert rows[0]["accuracy_sampled"] == 0.0

    def test_oracle_policy_saturates_at_full_budget(self):
        cfg, taskset, policy = self.setup_policy(oracle=True)
        rows = evaluate_anytime(policy, taskset, (16,), seeds=[0])
        assert rows[0]["accuracy"] == 1.0
        assert rows[0]["accuracy_sampled"] == 1.0

    def test_accuracy_nondecreasing_for_error_free_greedy(self):
        cfg, taskset, policy = self.setup_policy(oracle=True)
        rows = evaluate_anytime(policy, taskset, (1, 2, 4, 8, 16), seeds=[])
        accs = [r["accuracy"] for r in rows]
        assert accs == sorted(accs)


class TestCheckpoints:
    def test_roundtrip_behavioral_identity(self, tmp_path):
        cfg = tiny_cfg(epochs=1)
        res = train(cfg)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, res.policy, res.value)
        policy, value = load_checkpoint(path)
        taskset = make_taskset(cfg.K, cfg.tasks_per_group,
                               cfg.step_requirements, rng_for(cfg.seed, 0))
        task = taskset.tasks[0]
        gen = GenerationConfig(max_think=cfg.b_max, greedy=True)
        from bacr.policy import sample_trace
        a, _ = sample_trace(res.policy, task, 12, gen)
        b, _ = sample_trace(policy, task, 12, gen)
        np.testing.assert_array_equal(a.think_tokens, b.think_tokens)
        assert value is not None
        from bacr.advantage import value_named_arrays
        for (n1, w1), (n2, w2) in zip(value_named_arrays(res.value),
                                      value_named_arrays(value)):
            np.testing.assert_array_equal(w1, w2)
