"""Pure-NumPy rollout kernels.

Reference implementation of the per-token hot loop: budget-gated MLP policy
steps for sampling / greedy decoding / re-scoring, and the matching exact
backward pass over a whole trace. The compiled extension in ``_core.pyx``
mirrors this module function-for-function; equivalence is covered by tests
and the ``bacr bench`` benchmark.

Shapes: w1 (h1, dx), b1 (h1,), w2 (d, h1), b2 (d,), gate_vec (d,), phi (d,),
head (V, d), feat (F,), posenc (budget, P) with dx = F + P + 1. The final
input slot is the running WORK count times ``work_scale``.
"""

from __future__ import annotations

import numpy as np

MODE_SAMPLE = 0
MODE_GREEDY = 1
MODE_SCORE = 2

ACT_ID_SILU = 0
ACT_ID_IDENTITY = 1

STOP_INDEX = 3
WORK_INDEX = 0


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def run_trace(mode, w1, b1, w2, b2, act_id, gate_vec, phi, head, feat,
              posenc, work_scale, budget, temperature, uniforms, tokens_in):
    """Run the policy step loop for up to ``budget`` positions.

    Returns (events, logps, ents, stopped, caches) where caches is the tuple
    (X, PRE1, ACT1, H, U, LOGP) of per-event forward intermediates. Events
    include the trailing stop token when the think segment ended early.
    """
    h1 = w1.shape[0]
    d = w2.shape[0]
    vocab = head.shape[0]
    dx = feat.size + posenc.shape[1] + 1

    X = np.zeros((budget, dx))
    PRE1 = np.zeros((budget, h1))
    ACT1 = np.zeros((budget, h1))
    H = np.zeros((budget, d))
    U = np.zeros(budget)
    LOGP = np.zeros((budget, vocab))
    events = np.zeros(budget, dtype=np.int64)
    logps = np.zeros(budget)
    ents = np.zeros(budget)

    work_count = 0
    n = 0
    stopped = False
    for s in range(budget):
        x = np.concatenate([feat, posenc[s], [work_count * work_scale]])
        pre1 = w1 @ x + b1
        if act_id == ACT_ID_SILU:
            sig = np.where(pre1 >= 0, 1.0 / (1.0 + np.exp(-np.abs(pre1))),
                           np.exp(-np.abs(pre1)) / (1.0 + np.exp(-np.abs(pre1))))
            act1 = pre1 * sig
        else:
            act1 = pre1
        h = w2 @ act1 + b2
        u = float(gate_vec @ h)
        hp = h + _sigmoid(u) * phi
        z = (head @ hp) / temperature
        m = z.max()
        lse = m + np.log(np.exp(z - m).sum())
        logp = z - lse

        if mode == MODE_SCORE:
            tok = int(tokens_in[s])
        elif mode == MODE_GREEDY:
            tok = int(np.argmax(z))
        else:
            p = np.exp(logp)
            uni = uniforms[s]
            tok = vocab - 1
            c = 0.0
            for j in range(vocab):
                c += p[j]
                if uni < c:
                    tok = j
                    break

        X[s] = x
        PRE1[s] = pre1
        ACT1[s] = act1
        H[s] = h
        U[s] = u
        LOGP[s] = logp
        events[s] = tok
        logps[s] = logp[tok]
        ents[s] = -float(np.exp(logp) @ logp)
        n = s + 1
        if tok == STOP_INDEX:
            stopped = True
            break
        if tok == WORK_INDEX:
            work_count += 1

    caches = (X[:n], PRE1[:n], ACT1[:n], H[:n], U[:n], LOGP[:n])
    return events[:n], logps[:n], ents[:n], stopped, caches


def backward_trace(w1, b1, w2, b2, act_id, gate_vec, phi, head, caches,
                   events, dlogp_coeff, dent_coeff, temperature):
    """Accumulate exact gradients over one trace.

    The scalar loss is dlogp_coeff * sum_s logp(event_s) plus
    dent_coeff * sum_s H_s; returns gradients in the order
    (dw1, db1, dw2, db2, dgate, dphi, dhead).
    """
    X, PRE1, ACT1, H, U, LOGP = caches
    n = events.size
    vocab = head.shape[0]

    dw1 = np.zeros_like(w1)
    db1 = np.zeros_like(b1)
    dw2 = np.zeros_like(w2)
    db2 = np.zeros_like(b2)
    dgate = np.zeros_like(gate_vec)
    dphi = np.zeros_like(phi)
    dhead = np.zeros_like(head)

    for s in range(n):
        logp = LOGP[s]
        p = np.exp(logp)
        ent = -float(p @ logp)
        dz = -dlogp_coeff * p - dent_coeff * p * (logp + ent)
        dz[events[s]] += dlogp_coeff
        dz /= temperature

        g = _sigmoid(U[s])
        hp = H[s] + g * phi
        dhead += np.outer(dz, hp)
        dhp = head.T @ dz

        gp = g * (1.0 - g)
        t = float(dhp @ phi)
        dphi += g * dhp
        dgate += gp * t * H[s]
        dh = dhp + gp * t * gate_vec

        dw2 += np.outer(dh, ACT1[s])
        db2 += dh
        dact1 = w2.T @ dh
        if act_id == ACT_ID_SILU:
            pre1 = PRE1[s]
            sig = np.where(pre1 >= 0, 1.0 / (1.0 + np.exp(-np.abs(pre1))),
                           np.exp(-np.abs(pre1)) / (1.0 + np.exp(-np.abs(pre1))))
            dpre1 = dact1 * (sig * (1.0 + pre1 * (1.0 - sig)))
        else:
            dpre1 = dact1
        dw1 += np.outer(dpre1, X[s])
        db1 += dpre1

    return dw1, db1, dw2, db2, dgate, dphi, dhead
