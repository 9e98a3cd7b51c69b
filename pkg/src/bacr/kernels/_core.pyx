# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled rollout kernels.

Mirrors ``pyref`` function-for-function; see that module for the API
contract. Plain C loops over small float64 buffers — no BLAS, no threads —
so results match the NumPy path to float rounding.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

MODE_SAMPLE = 0
MODE_GREEDY = 1
MODE_SCORE = 2
ACT_ID_SILU = 0
ACT_ID_IDENTITY = 1

cdef int _STOP = 3
cdef int _WORK = 0


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def run_trace(int mode,
              double[:, ::1] w1, double[::1] b1,
              double[:, ::1] w2, double[::1] b2,
              int act_id,
              double[::1] gate_vec, double[::1] phi,
              double[:, ::1] head,
              double[::1] feat, double[:, ::1] posenc,
              double work_scale, int budget, double temperature,
              uniforms, tokens_in):
    cdef int h1 = w1.shape[0]
    cdef int dx = w1.shape[1]
    cdef int d = w2.shape[0]
    cdef int vocab = head.shape[0]
    cdef int fdim = feat.shape[0]
    cdef int pdim = posenc.shape[1]

    X_arr = np.zeros((budget, dx))
    PRE1_arr = np.zeros((budget, h1))
    ACT1_arr = np.zeros((budget, h1))
    H_arr = np.zeros((budget, d))
    U_arr = np.zeros(budget)
    LOGP_arr = np.zeros((budget, vocab))
    events_arr = np.zeros(budget, dtype=np.int64)
    logps_arr = np.zeros(budget)
    ents_arr = np.zeros(budget)

    cdef double[:, ::1] X = X_arr
    cdef double[:, ::1] PRE1 = PRE1_arr
    cdef double[:, ::1] ACT1 = ACT1_arr
    cdef double[:, ::1] H = H_arr
    cdef double[::1] U = U_arr
    cdef double[:, ::1] LOGP = LOGP_arr
    cdef long long[::1] events = events_arr
    cdef double[::1] logps = logps_arr
    cdef double[::1] ents = ents_arr

    cdef double[::1] uni
    cdef long long[::1] toks
    if mode == 0:
        uni = np.ascontiguousarray(uniforms, dtype=np.float64)
    else:
        uni = np.zeros(0)
    if mode == 2:
        toks = np.ascontiguousarray(tokens_in, dtype=np.int64)
    else:
        toks = np.zeros(0, dtype=np.int64)

    cdef int work_count = 0
    cdef int n = 0
    cdef bint stopped = False
    cdef int s, i, j, tok
    cdef double acc, sig, u, g, m, lse, c, ent, zj

    for s in range(budget):
        # x = feat (+) posenc[s] (+) [work_count * work_scale]
        for i in range(fdim):
            X[s, i] = feat[i]
        for i in range(pdim):
            X[s, fdim + i] = posenc[s, i]
        X[s, fdim + pdim] = work_count * work_scale

        for i in range(h1):
            acc = b1[i]
            for j in range(dx):
                acc += w1[i, j] * X[s, j]
            PRE1[s, i] = acc
            if act_id == 0:
                sig = _sigmoid(acc)
                ACT1[s, i] = acc * sig
            else:
                ACT1[s, i] = acc

        u = 0.0
        for i in range(d):
            acc = b2[i]
            for j in range(h1):
                acc += w2[i, j] * ACT1[s, j]
            H[s, i] = acc
            u += gate_vec[i] * acc
        U[s] = u
        g = _sigmoid(u)

        m = -1e300
        for i in range(vocab):
            acc = 0.0
            for j in range(d):
                acc += head[i, j] * (H[s, j] + g * phi[j])
            acc /= temperature
            LOGP[s, i] = acc
            if acc > m:
                m = acc
        lse = 0.0
        for i in range(vocab):
            lse += exp(LOGP[s, i] - m)
        lse = m + log(lse)
        for i in range(vocab):
            LOGP[s, i] -= lse

        if mode == 2:
            tok = <int>toks[s]
        elif mode == 1:
            tok = 0
            m = LOGP[s, 0]
            for i in range(1, vocab):
                if LOGP[s, i] > m:
                    m = LOGP[s, i]
                    tok = i
        else:
            tok = vocab - 1
            c = 0.0
            for i in range(vocab):
                c += exp(LOGP[s, i])
                if uni[s] < c:
                    tok = i
                    break

        ent = 0.0
        for i in range(vocab):
            ent -= exp(LOGP[s, i]) * LOGP[s, i]

        events[s] = tok
        logps[s] = LOGP[s, tok]
        ents[s] = ent
        n = s + 1
        if tok == _STOP:
            stopped = True
            break
        if tok == _WORK:
            work_count += 1

    caches = (X_arr[:n], PRE1_arr[:n], ACT1_arr[:n], H_arr[:n],
              U_arr[:n], LOGP_arr[:n])
    return events_arr[:n], logps_arr[:n], ents_arr[:n], bool(stopped), caches


def backward_trace(double[:, ::1] w1, double[::1] b1,
                   double[:, ::1] w2, double[::1] b2,
                   int act_id,
                   double[::1] gate_vec, double[::1] phi,
                   double[:, ::1] head,
                   caches, tokens,
                   double dlogp_coeff, double dent_coeff,
                   double temperature):
    cdef double[:, ::1] X = np.ascontiguousarray(caches[0])
    cdef double[:, ::1] PRE1 = np.ascontiguousarray(caches[1])
    cdef double[:, ::1] ACT1 = np.ascontiguousarray(caches[2])
    cdef double[:, ::1] H = np.ascontiguousarray(caches[3])
    cdef double[::1] U = np.ascontiguousarray(caches[4])
    cdef double[:, ::1] LOGP = np.ascontiguousarray(caches[5])
    cdef long long[::1] events = np.ascontiguousarray(tokens, dtype=np.int64)

    cdef int n = events.shape[0]
    cdef int h1 = w1.shape[0]
    cdef int dx = w1.shape[1]
    cdef int d = w2.shape[0]
    cdef int vocab = head.shape[0]

    dw1_arr = np.zeros((h1, dx))
    db1_arr = np.zeros(h1)
    dw2_arr = np.zeros((d, h1))
    db2_arr = np.zeros(d)
    dgate_arr = np.zeros(d)
    dphi_arr = np.zeros(d)
    dhead_arr = np.zeros((vocab, d))

    cdef double[:, ::1] dw1 = dw1_arr
    cdef double[::1] db1 = db1_arr
    cdef double[:, ::1] dw2 = dw2_arr
    cdef double[::1] db2 = db2_arr
    cdef double[::1] dgate = dgate_arr
    cdef double[::1] dphi = dphi_arr
    cdef double[:, ::1] dhead = dhead_arr

    dz_arr = np.zeros(vocab)
    dhp_arr = np.zeros(d)
    dh_arr = np.zeros(d)
    dact1_arr = np.zeros(h1)
    cdef double[::1] dz = dz_arr
    cdef double[::1] dhp = dhp_arr
    cdef double[::1] dh = dh_arr
    cdef double[::1] dact1 = dact1_arr

    cdef int s, i, j
    cdef double ent, p, g, gp, t, u, sig, pre, dpre, acc

    for s in range(n):
        ent = 0.0
        for i in range(vocab):
            ent -= exp(LOGP[s, i]) * LOGP[s, i]
        for i in range(vocab):
            p = exp(LOGP[s, i])
            dz[i] = -dlogp_coeff * p - dent_coeff * p * (LOGP[s, i] + ent)
        dz[events[s]] += dlogp_coeff
        for i in range(vocab):
            dz[i] /= temperature

        g = _sigmoid(U[s])
        for i in range(vocab):
            for j in range(d):
                dhead[i, j] += dz[i] * (H[s, j] + g * phi[j])
        for j in range(d):
            acc = 0.0
            for i in range(vocab):
                acc += head[i, j] * dz[i]
            dhp[j] = acc

        gp = g * (1.0 - g)
        t = 0.0
        for j in range(d):
            t += dhp[j] * phi[j]
        for j in range(d):
            dphi[j] += g * dhp[j]
            dgate[j] += gp * t * H[s, j]
            dh[j] = dhp[j] + gp * t * gate_vec[j]

        for i in range(d):
            for j in range(h1):
                dw2[i, j] += dh[i] * ACT1[s, j]
            db2[i] += dh[i]
        for j in range(h1):
            acc = 0.0
            for i in range(d):
                acc += w2[i, j] * dh[i]
            dact1[j] = acc

        for i in range(h1):
            if act_id == 0:
                pre = PRE1[s, i]
                sig = _sigmoid(pre)
                dpre = dact1[i] * (sig * (1.0 + pre * (1.0 - sig)))
            else:
                dpre = dact1[i]
            for j in range(dx):
                dw1[i, j] += dpre * X[s, j]
            db1[i] += dpre

    return dw1_arr, db1_arr, dw2_arr, db2_arr, dgate_arr, dphi_arr, dhead_arr
