"""End-to-end training loop.

Per iteration: sample tasks (frontier-weighted under the curriculum),
draw budgets per estimator mode, generate rollouts under those budgets,
build truncation reward profiles, compute advantages, and take one plain
gradient-descent step on the clipped policy loss + value loss - entropy
bonus. Pass rates are re-probed at every epoch boundary and drive the
budget/weight schedule.

Estimator modes:

* ``grpo``  - fixed budget b_max, outcome-only reward, per-task group mean.
* ``brpo``  - one budget per task per iteration shared by its G rollouts
  (so each budget-level group has G members), group mean within the group.
* ``bcae``  - G independent budgets per task, learned value baseline,
  normalization across the task's rollouts (cross-budget).

Component flags: ``bup`` off zeroes (and freezes) the budget embedding;
``cas`` off freezes the curriculum and samples budgets uniformly; ``tdr``
off sets the progress coefficient to zero.

Determinism: every rollout draws from its own generator seeded by
(seed, epoch, iteration, task slot, rollout index), and reductions run in
a fixed order, so results are independent of the worker count. Parameters
are only mutated between fan-outs, never while workers are running.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .advantage import (
    ValueNetParams,
    compute_advantages,
    measure_variance,
    value_backward,
    value_forward,
    value_init,
    value_named_arrays,
    value_predict,
)
from .curriculum import (
    BudgetRange,
    CurriculumState,
    curriculum_init,
    sample_budget,
    update_pass_rates,
)
from .environment import Task, TaskSet, Trace, make_taskset, verify
from .policy import (
    GenerationConfig,
    PolicyParams,
    ScoreCache,
    compute_phi,
    finish_phi_backward,
    policy_init,
    policy_named_arrays,
    rescore,
    sample_trace,
    trace_backward,
    trace_of,
)
from .rewards import RewardProfile, reward_profile

log = logging.getLogger(__name__)

ESTIMATORS = ("grpo", "brpo", "bcae")


class DivergenceError(RuntimeError):
    """Raised when the loss or the parameters stop being finite."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainConfig:
    """All hyperparameters. Field names double as config-file keys
    (``lam`` is spelled ``lambda`` in files)."""

    alpha: float = 0.6
    beta: float = 0.3
    lam: float = 0.3
    eps_clip: float = 0.2
    c_v: float = 0.5
    c_h: float = 0.01
    G: int = 8
    M: int = 4
    K: int = 4
    b_min: int = 8
    b_max: int = 128
    epochs: int = 12
    iters_per_epoch: int = 8
    batch_tasks: int = 4
    lr: float = 0.02
    seed: int = 0
    bup: bool = True
    cas: bool = True
    tdr: bool = True
    bcae: bool = True
    estimator: str = "bcae"
    tasks_per_group: int = 4
    step_requirements: tuple[int, ...] = (2, 6, 14, 30)
    embed_dim: int = 16
    pos_dim: int = 8
    sigma_scale: float = 0.15
    ema_eta: float = 0.1
    mu0: float = 0.0
    temperature: float = 1.0
    max_think: int = 0
    eval_budgets: tuple[int, ...] = (8, 16, 32, 64, 128)
    eval_samples: int = 3
    max_grad_norm: float = 25.0
    variance_reps: int = 0

    def validate(self) -> None:
        if not (0.0 < self.alpha < 1.0 and 0.0 < self.beta < 1.0):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 < self.eps_clip < 1.0:
            raise ValueError("eps_clip must lie in (0, 1)")
        if self.c_v < 0 or self.c_h < 0:
            raise ValueError("loss coefficients must be nonnegative")
        if self.G < 2:
            raise ValueError("need at least 2 rollouts per task")
        if self.M < 1:
            raise ValueError("need at least one truncation point")
        if not 0 < self.b_min < self.b_max:
            raise ValueError("need 0 < b_min < b_max")
        if self.b_min < self.M:
            raise ValueError("b_min must be >= M so every budget has M points")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if (self.estimator == "bcae") != self.bcae:
            raise ValueError("bcae flag must match the estimator mode")
        if self.K != len(self.step_requirements):
            raise ValueError("one step requirement per group")
        if any(b <= a for a, b in zip(self.step_requirements,
                                      self.step_requirements[1:])):
            raise ValueError("step requirements must be strictly increasing")
        if self.embed_dim % 2 or self.pos_dim % 2:
            raise ValueError("embed_dim and pos_dim must be even")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0 or self.iters_per_epoch < 1 or self.batch_tasks < 1:
            raise ValueError("bad schedule sizes")
        if self.max_grad_norm < 0:
            raise ValueError("max_grad_norm must be nonnegative (0 disables)")
        if self.variance_reps < 0:
            raise ValueError("variance_reps must be nonnegative (0 disables)")
        if any(b < self.b_min or b > self.b_max for b in self.eval_budgets):
            raise ValueError("eval budgets must lie within the budget range")

    @property
    def budget_range(self) -> BudgetRange:
        return BudgetRange(self.b_min, self.b_max)

    @property
    def max_think_effective(self) -> int:
        return self.max_think if self.max_think > 0 else self.b_max

    @property
    def lam_effective(self) -> float:
        if self.estimator == "grpo" or not self.tdr:
            return 0.0
        return self.lam

    @property
    def m_effective(self) -> int:
        return 1 if self.estimator == "grpo" else self.M

    def flag_string(self) -> str:
        on = [name.upper() for name in ("bup", "cas", "tdr", "bcae")
              if getattr(self, name)]
        return "+".join(on) if on else "none"


@dataclass
class IterationMetrics:
    epoch: int
    iteration: int
    mean_reward: float
    policy_loss: float
    value_loss: float
    entropy: float
    adv_variance: float
    max_abs_group_adv_mean: float
    progress_contribution: float
    mean_tokens: float
    mean_budget: float
    train_pass_rate: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, name) for name in self.columns()]


@dataclass
class RolloutRecord:
    slot: int
    g: int
    task: Task
    budget: int
    trace: Trace
    profile: RewardProfile
    reward: float
    logprob_old: float
    think_len: int
    passed: int


@dataclass
class TrainResult:
    policy: PolicyParams
    value: ValueNetParams | None
    metrics: list[IterationMetrics]
    curriculum_rows: list[dict]
    eval_rows: list[dict]
    summary: dict


# --- losses -------------------------------------------------------------------


def ppo_loss(ratio: float, adv: float, eps_clip: float) -> float:
    """Clipped surrogate: -min(ratio*adv, clip(ratio)*adv)."""
    if ratio <= 0:
        raise ValueError("importance ratio must be positive")
    clipped = min(max(ratio, 1.0 - eps_clip), 1.0 + eps_clip)
    return -min(ratio * adv, clipped * adv)


def ppo_dlogp(ratio: float, adv: float, eps_clip: float) -> float:
    """d(ppo_loss)/d(log pi_new); zero where the active branch is clipped."""
    unclipped = ratio * adv
    clipped_ratio = min(max(ratio, 1.0 - eps_clip), 1.0 + eps_clip)
    if unclipped <= clipped_ratio * adv:
        return -adv * ratio
    if 1.0 - eps_clip < ratio < 1.0 + eps_clip:
        return -adv * ratio
    return 0.0


def total_loss(policy_loss: float, value_loss: float, entropy: float,
               c_v: float, c_h: float) -> float:
    return policy_loss + c_v * value_loss - c_h * entropy


# --- seeding -----------------------------------------------------------------


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Independent stream derived from the run seed and a structural key;
    identical regardless of worker count or execution order."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


_K_TASKSET = 0
_K_INIT = 1
_K_VALUE_INIT = 2
_K_BATCH = 3
_K_ROLLOUT = 4
_K_PROBE = 5
_K_EVAL = 6


# --- rollout fan-out ----------------------------------------------------------


def _pmap(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _rollout(p: PolicyParams, task: Task, b: int, cfg: TrainConfig,
             rng: np.random.Generator) -> tuple[ScoreCache, RewardProfile]:
    gen = GenerationConfig(max_think=cfg.max_think_effective,
                           temperature=cfg.temperature)
    trace, cache = sample_trace(p, task, b, gen, rng)
    profile = reward_profile(task, trace, b, cfg.m_effective,
                             cfg.lam_effective)
    return cache, profile


def _draw_budgets(cfg: TrainConfig, state: CurriculumState, group: int,
                  rng: np.random.Generator) -> list[int]:
    """G training budgets for one task, per the estimator mode."""
    if cfg.estimator == "grpo":
        return [cfg.b_max] * cfg.G
    brange = cfg.budget_range
    if cfg.estimator == "brpo":
        if cfg.cas:
            b = sample_budget(state.mu[group - 1], state.sigma[group - 1],
                              brange, rng)
        else:
            b = int(rng.integers(cfg.b_min, cfg.b_max + 1))
        return [b] * cfg.G
    if cfg.cas:
        return [sample_budget(state.mu[group - 1], state.sigma[group - 1],
                              brange, rng) for _ in range(cfg.G)]
    return [int(rng.integers(cfg.b_min, cfg.b_max + 1)) for _ in range(cfg.G)]


@dataclass
class BatchItem:
    """One rollout as consumed by the loss: the stored trace, its frozen
    normalized advantage, the behavior log-prob, and the reward target."""

    task: Task
    budget: int
    trace: Trace
    adv: float
    logprob_old: float
    reward: float


def batch_loss_and_grads(policy: PolicyParams, value: ValueNetParams | None,
                         items: list[BatchItem], eps_clip: float, c_v: float,
                         c_h: float, temperature: float = 1.0,
                         ) -> tuple[float, dict[str, np.ndarray], dict]:
    """Total loss (clipped policy term + c_v * value MSE - c_h * entropy)
    and its exact gradients for a fixed batch.

    Advantages, old log-probs, and reward targets are data here; each trace
    is re-scored under the current parameters, so this same function serves
    the training step (where the ratio is 1) and the finite-difference
    checks (where parameters are perturbed).
    """
    if not items:
        raise ValueError("empty batch")
    n = len(items)
    grads: dict[str, np.ndarray] = {}

    def accumulate(named: dict[str, np.ndarray]) -> None:
        for name, g in named.items():
            if name in grads:
                grads[name] += g
            else:
                grads[name] = np.array(g, dtype=np.float64)

    policy_losses = []
    entropies = []
    value_sq_errs = []
    for item in items:
        sc = rescore(policy, item.task, item.budget, item.trace, temperature)
        ratio = float(np.exp(sc.logprob - item.logprob_old))
        policy_losses.append(ppo_loss(ratio, item.adv, eps_clip))
        entropies.append(sc.mean_entropy)
        dphi = np.zeros(policy.hidden_dim)
        n_events = sc.events.size
        if n_events > 0:
            dlogp = ppo_dlogp(ratio, item.adv, eps_clip) / n
            dent = -c_h / (n * n_events)
            g_policy, dphi_tr = trace_backward(policy, sc, dlogp, dent)
            accumulate(g_policy)
            dphi += dphi_tr
        if value is not None:
            feat_dim = item.task.feature_vec.size
            v, vcache = value_forward(value, item.task.feature_vec, sc.phi)
            err = v - item.reward
            value_sq_errs.append(err * err)
            g_value, dphi_v = value_backward(value, vcache,
                                             c_v * 2.0 * err / n, feat_dim)
            accumulate(g_value)
            dphi += dphi_v
        accumulate(finish_phi_backward(policy, sc.phi_cache, dphi))

    diag = {
        "policy_loss": float(np.mean(policy_losses)),
        "value_loss": float(np.mean(value_sq_errs)) if value_sq_errs else 0.0,
        "entropy": float(np.mean(entropies)),
    }
    loss = total_loss(diag["policy_loss"], diag["value_loss"],
                      diag["entropy"], c_v if value is not None else 0.0, c_h)
    return loss, grads, diag


def run_minibatch(policy: PolicyParams, value: ValueNetParams | None,
                  state: CurriculumState, taskset: TaskSet, cfg: TrainConfig,
                  epoch: int, iteration: int, workers: int = 1,
                  ) -> tuple[dict[str, np.ndarray], IterationMetrics, list[dict]]:
    """One sampled minibatch: returns (gradients of the total loss,
    iteration metrics, reward-profile rows). Individual rollout failures
    are logged and skipped, never fatal."""
    rng = rng_for(cfg.seed, _K_BATCH, epoch, iteration)

    slots = []
    for slot in range(cfg.batch_tasks):
        weights = state.weights if cfg.cas else np.full(cfg.K, 1.0 / cfg.K)
        group = int(rng.choice(cfg.K, p=weights)) + 1
        ids = taskset.group_index[group]
        task = taskset.task(ids[int(rng.integers(len(ids)))])
        budgets = _draw_budgets(cfg, state, group, rng)
        slots.append((slot, task, budgets))

    jobs = [(slot, g, task, b)
            for slot, task, budgets in slots
            for g, b in enumerate(budgets)]

    def worker(job):
        slot, g, task, b = job
        try:
            r = rng_for(cfg.seed, _K_ROLLOUT, epoch, iteration, slot, g)
            cache, profile = _rollout(policy, task, b, cfg, r)
            trace = trace_of(cache)
            return RolloutRecord(
                slot=slot, g=g, task=task, budget=b, trace=trace,
                profile=profile, reward=profile.cumulative,
                logprob_old=cache.logprob, think_len=trace.think_len,
                passed=profile.final_outcome)
        except Exception:  # noqa: BLE001 - skip-and-log policy
            log.warning("rollout failed (task=%s budget=%s)", job[2].id,
                        job[3], exc_info=True)
            return None

    records = [r for r in _pmap(worker, jobs, workers) if r is not None]
    if not records:
        raise DivergenceError("every rollout in the minibatch failed")

    if cfg.estimator in ("grpo", "brpo"):
        counts: dict[tuple, int] = {}
        for r in records:
            counts[(r.slot, r.budget)] = counts.get((r.slot, r.budget), 0) + 1
        kept = [r for r in records if counts[(r.slot, r.budget)] >= 2]
        if len(kept) < len(records):
            log.warning("dropped %d rollouts in singleton budget groups",
                        len(records) - len(kept))
        records = kept
        if not records:
            raise DivergenceError("no usable advantage groups in minibatch")

    rewards = np.array([r.reward for r in records])
    baseline_keys = [(r.slot, r.budget) if cfg.estimator == "brpo" else r.slot
                     for r in records]
    norm_keys = [r.slot for r in records]

    values = None
    if cfg.estimator == "bcae":
        values = np.array([
            value_predict(value, r.task.feature_vec,
                          compute_phi(policy, r.budget)[0]) for r in records])

    batch = compute_advantages(rewards, baseline_keys, norm_keys,
                               cfg.estimator, values=values)

    items = [BatchItem(task=r.task, budget=r.budget, trace=r.trace,
                       adv=float(batch.normalized[i]),
                       logprob_old=r.logprob_old, reward=r.reward)
             for i, r in enumerate(records)]
    _, grads, diag = batch_loss_and_grads(
        policy, value if cfg.estimator == "bcae" else None, items,
        cfg.eps_clip, cfg.c_v, cfg.c_h, cfg.temperature)

    metrics = IterationMetrics(
        epoch=epoch,
        iteration=iteration,
        mean_reward=float(rewards.mean()),
        policy_loss=diag["policy_loss"],
        value_loss=diag["value_loss"],
        entropy=diag["entropy"],
        adv_variance=float(batch.normalized.var()),
        max_abs_group_adv_mean=batch.max_abs_group_mean,
        progress_contribution=float(np.mean(
            [r.profile.progress_contribution for r in records])),
        mean_tokens=float(np.mean([r.think_len for r in records])),
        mean_budget=float(np.mean([r.budget for r in records])),
        train_pass_rate=float(np.mean([r.passed for r in records])),
    )

    reward_rows = []
    for rec in records:
        for bj, rj, dj, rhoj in zip(rec.profile.budgets, rec.profile.outcomes,
                                    rec.profile.progress, rec.profile.dense):
            reward_rows.append({
                "epoch": epoch, "iteration": iteration, "task_id": rec.task.id,
                "rollout": rec.g, "truncation_budget": bj, "outcome": rj,
                "progress": dj, "dense": rhoj,
            })
    return grads, metrics, reward_rows


# --- pass-rate probing and evaluation ------------------------------------------


def probe_pass_rates(policy: PolicyParams, taskset: TaskSet, cfg: TrainConfig,
                     epoch: int, workers: int = 1) -> list[tuple[int, int]]:
    """Per-group (successes, attempts) from G sampled rollouts per task at
    the full budget; drives pass-rate initialization and epoch updates."""
    jobs = [(t_idx, g, task)
            for t_idx, task in enumerate(taskset.tasks)
            for g in range(cfg.G)]

    def worker(job):
        t_idx, g, task = job
        rng = rng_for(cfg.seed, _K_PROBE, epoch, t_idx, g)
        gen = GenerationConfig(max_think=cfg.max_think_effective,
                               temperature=cfg.temperature)
        trace, _ = sample_trace(policy, task, cfg.b_max, gen, rng)
        return task.group, verify(task, trace)

    results = _pmap(worker, jobs, workers)
    succ = dict.fromkeys(range(1, cfg.K + 1), 0)
    att = dict.fromkeys(range(1, cfg.K + 1), 0)
    for group, ok in results:
        succ[group] += ok
        att[group] += 1
    return [(succ[k], att[k]) for k in range(1, cfg.K + 1)]


def evaluate_anytime(policy: PolicyParams, taskset: TaskSet,
                     budgets: tuple[int, ...], seeds: list[int],
                     master_seed: int = 0, temperature: float = 1.0,
                     max_think: int | None = None, workers: int = 1,
                     ) -> list[dict]:
    """Per-budget accuracy table.

    ``accuracy`` uses greedy decoding (one deterministic trace per task);
    ``accuracy_sampled`` averages verifier outcomes over ``seeds`` sampled
    rollouts per task, a direct estimate of the expected-reward objective.
    ``mean_tokens`` is the average think length of the sampled rollouts
    (falling back to greedy when no seeds are given).
    """
    cap = max_think if max_think else max(max(budgets), 1)
    rows = []
    for b in budgets:
        greedy_cfg = GenerationConfig(max_think=cap, temperature=temperature,
                                      greedy=True)
        greedy_ok = []
        greedy_tokens = []
        for task in taskset.tasks:
            trace, _ = sample_trace(policy, task, b, greedy_cfg)
            greedy_ok.append(verify(task, trace))
            greedy_tokens.append(trace.think_len)

        jobs = [(s_idx, t_idx, task)
                for s_idx in range(len(seeds))
                for t_idx, task in enumerate(taskset.tasks)]

        def worker(job, b=b):
            s_idx, t_idx, task = job
            rng = rng_for(master_seed, _K_EVAL, seeds[s_idx], b, t_idx)
            gen = GenerationConfig(max_think=cap, temperature=temperature)
            trace, _ = sample_trace(policy, task, b, gen, rng)
            return verify(task, trace), trace.think_len

        sampled = _pmap(worker, jobs, workers) if jobs else []
        acc_sampled = (float(np.mean([ok for ok, _ in sampled]))
                       if sampled else float(np.mean(greedy_ok)))
        mean_tokens = (float(np.mean([tl for _, tl in sampled]))
                       if sampled else float(np.mean(greedy_tokens)))
        rows.append({
            "budget": int(b),
            "accuracy": float(np.mean(greedy_ok)),
            "accuracy_sampled": acc_sampled,
            "mean_tokens": mean_tokens,
            "mean_tokens_greedy": float(np.mean(greedy_tokens)),
        })
    return rows


# --- the training loop ----------------------------------------------------------


class RunSink:
    """Receiver for streamed training output; the CLI subclasses this to
    write CSV files. The default collects rows in memory."""

    def on_iteration(self, metrics: IterationMetrics) -> None:
        pass

    def on_reward_rows(self, rows: list[dict]) -> None:
        pass

    def on_curriculum(self, rows: list[dict]) -> None:
        pass

    def on_eval(self, rows: list[dict]) -> None:
        pass


def _curriculum_rows(epoch: int, state: CurriculumState,
                     probe: list[tuple[int, int]] | None) -> list[dict]:
    rows = []
    for k in range(state.num_groups):
        probe_rate = ""
        if probe is not None and probe[k][1] > 0:
            probe_rate = probe[k][0] / probe[k][1]
        rows.append({"epoch": epoch, "group": k + 1,
                     "pass_rate": float(state.pass_rates[k]),
                     "mu": float(state.mu[k]),
                     "weight": float(state.weights[k]),
                     "probe_rate": probe_rate})
    return rows


def train(cfg: TrainConfig, workers: int = 1,
          sink: RunSink | None = None) -> TrainResult:
    """Run the full schedule; returns the trained parameters plus all
    metrics. Raises DivergenceError (with a parameter snapshot) if the
    loss or parameters stop being finite."""
    cfg.validate()
    sink = sink or RunSink()

    taskset = make_taskset(cfg.K, cfg.tasks_per_group, cfg.step_requirements,
                           rng_for(cfg.seed, _K_TASKSET))
    feat_dim = taskset.tasks[0].feature_vec.size
    policy = policy_init(feat_dim, cfg.embed_dim, cfg.pos_dim, cfg.b_min,
                         cfg.b_max, rng_for(cfg.seed, _K_INIT),
                         use_budget_embedding=cfg.bup)
    value = None
    if cfg.estimator == "bcae":
        value = value_init(feat_dim, cfg.embed_dim,
                           rng_for(cfg.seed, _K_VALUE_INIT))

    probe0 = probe_pass_rates(policy, taskset, cfg, epoch=0, workers=workers)
    rho0 = np.array([s / a if a else 0.0 for s, a in probe0])
    state = curriculum_init(rho0, cfg.budget_range, cfg.sigma_scale,
                            cfg.mu0 if cfg.mu0 > 0 else None)

    param_arrays = dict(policy_named_arrays(policy))
    if value is not None:
        param_arrays.update(dict(value_named_arrays(value)))

    metrics_hist: list[IterationMetrics] = []
    curriculum_hist: list[dict] = []
    eval_hist: list[dict] = []

    def record_curriculum(epoch, probe):
        rows = _curriculum_rows(epoch, state, probe)
        curriculum_hist.extend(rows)
        sink.on_curriculum(rows)

    def record_eval(epoch):
        rows = evaluate_anytime(policy, taskset, cfg.eval_budgets,
                                list(range(cfg.eval_samples)),
                                master_seed=cfg.seed,
                                temperature=cfg.temperature,
                                max_think=cfg.max_think_effective,
                                workers=workers)
        for row in rows:
            row = dict(row)
            row["epoch"] = epoch
            eval_hist.append(row)
        sink.on_eval(eval_hist[-len(rows):])

    record_curriculum(0, probe0)
    record_eval(0)

    diverged = False
    for epoch in range(1, cfg.epochs + 1):
        for it in range(1, cfg.iters_per_epoch + 1):
            grads, metrics, reward_rows = run_minibatch(
                policy, value, state, taskset, cfg, epoch, it, workers)
            loss = total_loss(metrics.policy_loss, metrics.value_loss,
                              metrics.entropy, cfg.c_v, cfg.c_h)
            if not np.isfinite(loss):
                diverged = True
            if cfg.max_grad_norm > 0:
                gnorm = np.sqrt(sum(float(np.sum(g * g))
                                    for g in grads.values()))
                if gnorm > cfg.max_grad_norm:
                    scale = cfg.max_grad_norm / gnorm
                    grads = {name: g * scale for name, g in grads.items()}
            for name, g in grads.items():
                param_arrays[name] -= cfg.lr * g
            if any(not np.all(np.isfinite(a)) for a in param_arrays.values()):
                diverged = True
            metrics_hist.append(metrics)
            sink.on_iteration(metrics)
            sink.on_reward_rows(reward_rows)
            if diverged:
                snapshot = {name: a.copy() for name, a in param_arrays.items()}
                raise DivergenceError(
                    f"non-finite loss or parameters at epoch {epoch} "
                    f"iteration {it}", snapshot=snapshot)

        probe = probe_pass_rates(policy, taskset, cfg, epoch, workers=workers)
        if cfg.cas:
            state = update_pass_rates(state, probe, cfg.alpha, cfg.beta,
                                      cfg.budget_range, cfg.ema_eta)
        record_curriculum(epoch, probe)
        record_eval(epoch)

    summary = build_summary(cfg, metrics_hist, curriculum_hist, eval_hist)
    return TrainResult(policy=policy, value=value, metrics=metrics_hist,
                       curriculum_rows=curriculum_hist, eval_rows=eval_hist,
                       summary=summary)


def build_summary(cfg: TrainConfig, metrics: list[IterationMetrics],
                  curriculum_rows: list[dict], eval_rows: list[dict]) -> dict:
    from . import kernels

    last_epoch = max((r["epoch"] for r in eval_rows), default=0)
    final_eval = [r for r in eval_rows if r["epoch"] == last_epoch]
    return {
        "flags": cfg.flag_string(),
        "estimator": cfg.estimator,
        "seed": cfg.seed,
        "kernel_backend": kernels.BACKEND,
        "iterations": len(metrics),
        "final_mean_reward": metrics[-1].mean_reward if metrics else None,
        "final_eval": [{k: r[k] for k in
                        ("budget", "accuracy", "accuracy_sampled",
                         "mean_tokens")} for r in final_eval],
        "anytime_accuracy_sampled": (
            float(np.mean([r["accuracy_sampled"] for r in final_eval]))
            if final_eval else None),
        "accuracy_at_min_budget_sampled": (
            min(final_eval, key=lambda r: r["budget"])["accuracy_sampled"]
            if final_eval else None),
    }


def run_variance_report(policy: PolicyParams, value: ValueNetParams,
                        taskset: TaskSet, cfg: TrainConfig,
                        budgets: list[int], reps: int, seed: int,
                        iteration: int = 0) -> list[dict]:
    return measure_variance(policy, value, taskset, budgets,
                            n_per_task=cfg.G, reps=reps, seed=seed,
                            lam=cfg.lam_effective, m=cfg.m_effective,
                            temperature=cfg.temperature, iteration=iteration)


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, policy: PolicyParams,
                    value: ValueNetParams | None = None) -> None:
    from .numerics import save_named_arrays

    arrays = policy_named_arrays(policy)
    if value is not None:
        arrays = arrays + value_named_arrays(value)
    meta = {
        "pos_dim": policy.pos_dim,
        "b_min": policy.b_min,
        "b_max": policy.b_max,
        "use_budget_embedding": policy.use_budget_embedding,
        "has_value": value is not None,
    }
    save_named_arrays(path, arrays, meta=meta)


def load_checkpoint(path) -> tuple[PolicyParams, ValueNetParams | None]:
    from .budget_embed import BudgetEmbedParams
    from .numerics import ACT_SILU, MlpParams, load_named_arrays

    arrays, meta = load_named_arrays(path)
    proj = MlpParams(arrays["budget.proj.w1"], arrays["budget.proj.b1"],
                     arrays["budget.proj.w2"], arrays["budget.proj.b2"],
                     ACT_SILU)
    policy = PolicyParams(
        input_proj=MlpParams(arrays["input_proj.w1"], arrays["input_proj.b1"],
                             arrays["input_proj.w2"], arrays["input_proj.b2"],
                             ACT_SILU),
        head=arrays["head"],
        budget=BudgetEmbedParams(proj, arrays["budget.gate_vec"],
                                 arrays["budget.gate_vec"].size),
        pos_dim=int(meta["pos_dim"]),
        b_min=int(meta["b_min"]),
        b_max=int(meta["b_max"]),
        use_budget_embedding=bool(meta["use_budget_embedding"]),
    )
    value = None
    if meta.get("has_value"):
        value = ValueNetParams(head=MlpParams(
            arrays["value.w1"], arrays["value.b1"],
            arrays["value.w2"], arrays["value.b2"], ACT_SILU))
    return policy, value
