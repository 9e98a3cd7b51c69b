"""Budget-conditioned autoregressive policy over the toy vocabulary.

Each step consumes the task features, a sinusoidal encoding of the current
position, and the running WORK count (the Markov summary that replaces a
recurrent hidden state), passes them through one hidden layer, injects the
budget embedding phi(b) through a sigmoid gate, and projects to logits over
{WORK, ERROR, FILLER, STOP}. Emitting STOP ends the think segment early;
reaching the budget ends it forcibly. Either way a single forced ANSWER
token follows with probability one, contributing nothing to log-probs or
entropy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .budget_embed import (
    BudgetEmbedParams,
    budget_embed_init,
    embed_budget_backward,
    embed_budget_forward,
    gate_inject,
    sinusoidal_features,
)
from .environment import THINK_TOKEN_NAMES, Task, Trace
from .numerics import (
    ACT_SILU,
    MlpCache,
    MlpParams,
    log_softmax,
    mlp_forward,
    mlp_init,
    xavier_uniform,
)

STOP = 3
VOCAB_SIZE = 4
EVENT_NAMES = THINK_TOKEN_NAMES + ("STOP",)


@dataclass
class GenerationConfig:
    max_think: int
    temperature: float = 1.0
    rng_seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.max_think < 1:
            raise ValueError("max_think must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class PolicyParams:
    """input_proj maps [feature_vec (+) position encoding (+) work count]
    to the hidden state; head maps the gated hidden state to vocab logits."""

    input_proj: MlpParams
    head: np.ndarray
    budget: BudgetEmbedParams
    pos_dim: int
    b_min: int
    b_max: int
    use_budget_embedding: bool = True

    def __post_init__(self):
        d = self.budget.dim
        if self.head.shape != (VOCAB_SIZE, d):
            raise ValueError("head must map hidden dim to vocab size")
        if self.input_proj.d_out != d:
            raise ValueError("input_proj output dim must equal embedding dim")
        if not 0 < self.b_min < self.b_max:
            raise ValueError("need 0 < b_min < b_max")

    @property
    def hidden_dim(self) -> int:
        return self.budget.dim

    @property
    def feat_dim(self) -> int:
        return self.input_proj.d_in - self.pos_dim - 1

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.input_proj.copy(), self.head.copy(),
                            self.budget.copy(), self.pos_dim,
                            self.b_min, self.b_max, self.use_budget_embedding)


def policy_init(feat_dim: int, hidden_dim: int, pos_dim: int,
                b_min: int, b_max: int, rng: np.random.Generator,
                use_budget_embedding: bool = True) -> PolicyParams:
    d_in = feat_dim + pos_dim + 1
    return PolicyParams(
        input_proj=mlp_init(d_in, hidden_dim, hidden_dim, rng, ACT_SILU),
        head=xavier_uniform(VOCAB_SIZE, hidden_dim, rng),
        budget=budget_embed_init(hidden_dim, rng),
        pos_dim=pos_dim,
        b_min=b_min,
        b_max=b_max,
        use_budget_embedding=use_budget_embedding,
    )


def position_encoding_table(n: int, dim: int) -> np.ndarray:
    """Rows 0..n-1 of the sinusoidal position encoding, shape (n, dim)."""
    if dim % 2 != 0:
        raise ValueError("position encoding dim must be even")
    out = np.zeros((n, dim))
    i = np.arange(dim // 2, dtype=np.float64)
    denom = np.power(10000.0, 2.0 * i / dim)
    pos = np.arange(n, dtype=np.float64)[:, None]
    out[:, 0::2] = np.sin(pos / denom)
    out[:, 1::2] = np.cos(pos / denom)
    return out


def compute_phi(p: PolicyParams, b: int) -> tuple[np.ndarray, MlpCache | None]:
    """Budget embedding used at budget b, or zeros when conditioning is off."""
    if not p.use_budget_embedding:
        return np.zeros(p.hidden_dim), None
    clamped = min(max(int(b), p.b_min), p.b_max)
    return embed_budget_forward(p.budget, clamped, p.b_min, p.b_max)


def step_logits(p: PolicyParams, task: Task, position: int, b: int,
                work_count_so_far: int) -> np.ndarray:
    """Deterministic vocab logits for one step (slow reference path)."""
    if position < 0:
        raise ValueError("position must be nonnegative")
    phi, _ = compute_phi(p, b)
    x = np.concatenate([task.feature_vec,
                        sinusoidal_features(float(position), p.pos_dim),
                        [work_count_so_far / float(p.b_max)]])
    h, _ = mlp_forward(p.input_proj, x)
    hp = gate_inject(h, phi, p.budget.gate_vec)
    return p.head @ hp


@dataclass
class ScoreCache:
    """Everything needed to backprop through one trace without re-running it."""

    events: np.ndarray
    logps: np.ndarray
    ents: np.ndarray
    caches: tuple
    phi: np.ndarray
    phi_cache: MlpCache | None
    temperature: float
    logprob: float = field(init=False)
    mean_entropy: float = field(init=False)

    def __post_init__(self):
        self.logprob = float(self.logps.sum())
        self.mean_entropy = float(self.ents.mean()) if self.ents.size else 0.0


def _events_of(trace: Trace, b: int) -> np.ndarray:
    if trace.think_len > b:
        raise ValueError(f"trace think length {trace.think_len} exceeds budget {b}")
    events = trace.think_tokens
    if trace.think_len < b:
        # ended early, so a STOP event was sampled after the think tokens
        events = np.concatenate([events, [STOP]])
    return events.astype(np.int64)


def _run(p: PolicyParams, task: Task, b: int, mode: int,
         temperature: float, uniforms=None, tokens=None,
         max_think: int | None = None) -> ScoreCache:
    limit = int(b) if max_think is None else min(int(b), int(max_think))
    phi, phi_cache = compute_phi(p, b)
    posenc = position_encoding_table(limit, p.pos_dim)
    ip = p.input_proj
    events, logps, ents, stopped, caches = kernels.run_trace(
        mode, ip.w1, ip.b1, ip.w2, ip.b2, kernels.ACT_ID_SILU,
        p.budget.gate_vec, phi, p.head, task.feature_vec, posenc,
        1.0 / float(p.b_max), limit, temperature, uniforms, tokens)
    return ScoreCache(events=np.asarray(events), logps=np.asarray(logps),
                      ents=np.asarray(ents), caches=caches, phi=phi,
                      phi_cache=phi_cache, temperature=temperature)


def trace_of(sc: ScoreCache) -> Trace:
    """Materialize the Trace described by a score cache."""
    stopped = sc.events.size > 0 and sc.events[-1] == STOP
    think = sc.events[:-1] if stopped else sc.events
    logps = np.concatenate([sc.logps, [0.0]])
    return Trace(think_tokens=think.copy(), token_logprobs=logps)


def sample_trace(p: PolicyParams, task: Task, b: int, cfg: GenerationConfig,
                 rng: np.random.Generator | None = None,
                 ) -> tuple[Trace, ScoreCache]:
    """Sample one trace and keep its forward caches for a later backward."""
    if b < 0:
        raise ValueError("budget must be nonnegative")
    if cfg.greedy:
        sc = _run(p, task, b, kernels.MODE_GREEDY, cfg.temperature,
                  max_think=cfg.max_think)
    else:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        uniforms = rng.random(min(int(b), cfg.max_think))
        sc = _run(p, task, b, kernels.MODE_SAMPLE, cfg.temperature,
                  uniforms=uniforms, max_think=cfg.max_think)
    return trace_of(sc), sc


def generate(p: PolicyParams, task: Task, b: int, cfg: GenerationConfig,
             rng: np.random.Generator | None = None) -> Trace:
    trace, _ = sample_trace(p, task, b, cfg, rng)
    return trace


def rescore(p: PolicyParams, task: Task, b: int, trace: Trace,
            temperature: float = 1.0) -> ScoreCache:
    """Exact re-scoring of a stored trace under the current parameters."""
    events = _events_of(trace, b)
    return _run(p, task, b, kernels.MODE_SCORE, temperature, tokens=events)


def log_prob(p: PolicyParams, task: Task, b: int, trace: Trace,
             temperature: float = 1.0) -> float:
    """Sum of log-probabilities of the sampled (non-forced) tokens,
    including the early-stop event when the think segment ended before b."""
    return rescore(p, task, b, trace, temperature).logprob


def entropy(p: PolicyParams, task: Task, b: int, trace: Trace,
            temperature: float = 1.0) -> float:
    """Mean per-step entropy of the step distributions along the trace."""
    return rescore(p, task, b, trace, temperature).mean_entropy


def trace_backward(p: PolicyParams, sc: ScoreCache, dlogp_coeff: float,
                   dent_coeff: float) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of dlogp_coeff * logprob + dent_coeff * sum of step
    entropies. Returns (named grads without the embedding projection, dphi)
    so callers can merge further dphi contributions before the embedding
    backward (see ``finish_phi_backward``)."""
    ip = p.input_proj
    dw1, db1, dw2, db2, dgate, dphi, dhead = kernels.backward_trace(
        ip.w1, ip.b1, ip.w2, ip.b2, kernels.ACT_ID_SILU,
        p.budget.gate_vec, sc.phi, p.head, sc.caches, sc.events,
        dlogp_coeff, dent_coeff, sc.temperature)
    grads = {
        "input_proj.w1": np.asarray(dw1), "input_proj.b1": np.asarray(db1),
        "input_proj.w2": np.asarray(dw2), "input_proj.b2": np.asarray(db2),
        "head": np.asarray(dhead), "budget.gate_vec": np.asarray(dgate),
    }
    return grads, np.asarray(dphi)


def finish_phi_backward(p: PolicyParams, phi_cache: MlpCache | None,
                        dphi: np.ndarray) -> dict[str, np.ndarray]:
    """Backprop an accumulated dphi through the embedding projection.
    Returns empty grads when budget conditioning is off (phi frozen at 0)."""
    if not p.use_budget_embedding or phi_cache is None:
        return {}
    g = embed_budget_backward(p.budget, phi_cache, dphi)
    return {"budget.proj.w1": g.w1, "budget.proj.b1": g.b1,
            "budget.proj.w2": g.w2, "budget.proj.b2": g.b2}


def policy_named_arrays(p: PolicyParams) -> list[tuple[str, np.ndarray]]:
    return [
        ("input_proj.w1", p.input_proj.w1), ("input_proj.b1", p.input_proj.b1),
        ("input_proj.w2", p.input_proj.w2), ("input_proj.b2", p.input_proj.b2),
        ("head", p.head),
        ("budget.proj.w1", p.budget.proj.w1), ("budget.proj.b1", p.budget.proj.b1),
        ("budget.proj.w2", p.budget.proj.w2), ("budget.proj.b2", p.budget.proj.b2),
        ("budget.gate_vec", p.budget.gate_vec),
    ]


def policy_from_arrays(template: PolicyParams,
                       arrays: dict[str, np.ndarray]) -> PolicyParams:
    p = template.copy()
    p.input_proj.w1[:] = arrays["input_proj.w1"]
    p.input_proj.b1[:] = arrays["input_proj.b1"]
    p.input_proj.w2[:] = arrays["input_proj.w2"]
    p.input_proj.b2[:] = arrays["input_proj.b2"]
    p.head[:] = arrays["head"]
    p.budget.proj.w1[:] = arrays["budget.proj.w1"]
    p.budget.proj.b1[:] = arrays["budget.proj.b1"]
    p.budget.proj.w2[:] = arrays["budget.proj.w2"]
    p.budget.proj.b2[:] = arrays["budget.proj.b2"]
    p.budget.gate_vec[:] = arrays["budget.gate_vec"]
    return p


# --- slow reference scorer (kept independent of the kernel path) -------------


def rescore_slow(p: PolicyParams, task: Task, b: int, trace: Trace,
                 temperature: float = 1.0) -> tuple[float, float]:
    """(log-prob, mean entropy) computed step by step via ``step_logits``.

    Deliberately bypasses the kernel backends; tests use it to cross-check
    them.
    """
    events = _events_of(trace, b)
    work = 0
    total = 0.0
    ents = []
    for s, tok in enumerate(events):
        logp = log_softmax(step_logits(p, task, s, b, work) / temperature)
        total += logp[tok]
        ents.append(-float(np.exp(logp) @ logp))
        if tok == 0:
            work += 1
    mean_ent = float(np.mean(ents)) if ents else 0.0
    return total, mean_ent


# --- trace dump (debugging + replay oracle) ----------------------------------


def dump_traces(path, rows: list[dict]) -> None:
    """JSON-lines dump: task id, budget, tokens (names, including STOP and
    ANSWER), and per-token log-probs."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def trace_dump_row(task: Task, b: int, trace: Trace) -> dict:
    stopped = trace.token_logprobs.size == trace.think_len + 2
    names = [EVENT_NAMES[t] for t in trace.think_tokens]
    if stopped:
        names.append("STOP")
    names.append(trace.answer_token)
    return {"task_id": task.id, "budget": int(b), "tokens": names,
            "logprobs": [float(v) for v in trace.token_logprobs]}


def load_traces(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def trace_from_dump_row(row: dict) -> tuple[str, int, Trace]:
    """Rebuild (task id, budget, Trace) from a dump row; the inverse of
    ``trace_dump_row`` for replay re-scoring."""
    names = row["tokens"]
    if not names or names[-1] != "ANSWER":
        raise ValueError("dump row must end with the answer token")
    think_names = names[:-1]
    if think_names and think_names[-1] == "STOP":
        think_names = think_names[:-1]
    index = {name: i for i, name in enumerate(THINK_TOKEN_NAMES)}
    tokens = np.array([index[n] for n in think_names], dtype=np.int64)
    trace = Trace(think_tokens=tokens,
                  token_logprobs=np.array(row["logprobs"], dtype=np.float64))
    return row["task_id"], int(row["budget"]), trace
