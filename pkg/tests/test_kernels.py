"""Backend equivalence: the compiled core must reproduce the NumPy
reference on every mode, and both must agree with the slow per-step path."""

import numpy as np
import pytest

from bacr import kernels
from bacr.environment import make_taskset
from bacr.policy import policy_init, position_encoding_table

HAVE_CORE = "cython" in kernels.available_backends()

needs_core = pytest.mark.skipif(not HAVE_CORE,
                                reason="compiled kernel core not built")


def setup_args(seed=0, budget=24, suppress_stop=False):
    rng = np.random.default_rng(seed)
    ts = make_taskset(4, 2, (2, 6, 14, 30), rng)
    p = policy_init(ts.tasks[0].feature_vec.size, 16, 8, 8, 64, rng)
    if suppress_stop:
        p.head[3] -= 8.0
    task = ts.tasks[int(rng.integers(len(ts.tasks)))]
    phi = 0.3 * rng.standard_normal(16)
    posenc = position_encoding_table(budget, p.pos_dim)
    ip = p.input_proj
    args = (ip.w1, ip.b1, ip.w2, ip.b2, kernels.ACT_ID_SILU,
            p.budget.gate_vec, phi, p.head, task.feature_vec, posenc,
            1.0 / 64, budget, 1.0)
    return args, rng


@needs_core
class TestBackendEquivalence:
    def test_sampling_paths_agree(self):
        py = kernels.get_backend("python")
        cy = kernels.get_backend("cython")
        for seed in range(6):
            args, rng = setup_args(seed)
            uni = rng.random(args[11])
            out_py = py.run_trace(kernels.MODE_SAMPLE, *args, uni, None)
            out_cy = cy.run_trace(kernels.MODE_SAMPLE, *args, uni, None)
            np.testing.assert_array_equal(out_py[0], out_cy[0])
            np.testing.assert_allclose(out_py[1], out_cy[1], atol=1e-12)
            np.testing.assert_allclose(out_py[2], out_cy[2], atol=1e-12)
            assert out_py[3] == out_cy[3]
            for a, b in zip(out_py[4], out_cy[4]):
                np.testing.assert_allclose(a, b, atol=1e-12)

    def test_scoring_and_greedy_agree(self):
        py = kernels.get_backend("python")
        cy = kernels.get_backend("cython")
        for seed in range(4):
            args, rng = setup_args(seed, suppress_stop=True)
            tokens = rng.integers(0, 3, size=args[11]).astype(np.int64)
            s_py = py.run_trace(kernels.MODE_SCORE, *args, None, tokens)
            s_cy = cy.run_trace(kernels.MODE_SCORE, *args, None, tokens)
            np.testing.assert_allclose(s_py[1], s_cy[1], atol=1e-12)
            g_py = py.run_trace(kernels.MODE_GREEDY, *args, None, None)
            g_cy = cy.run_trace(kernels.MODE_GREEDY, *args, None, None)
            np.testing.assert_array_equal(g_py[0], g_cy[0])

    def test_backward_agrees(self):
        py = kernels.get_backend("python")
        cy = kernels.get_backend("cython")
        for seed in range(4):
            args, rng = setup_args(seed, suppress_stop=True)
            tokens = rng.integers(0, 3, size=args[11]).astype(np.int64)
            *_, caches_py = py.run_trace(kernels.MODE_SCORE, *args, None, tokens)
            *_, caches_cy = cy.run_trace(kernels.MODE_SCORE, *args, None, tokens)
            g_py = py.backward_trace(*args[:8], caches_py, tokens, 0.7, 0.013, 1.0)
            g_cy = cy.backward_trace(*args[:8], caches_cy, tokens, 0.7, 0.013, 1.0)
            for a, b in zip(g_py, g_cy):
                np.testing.assert_allclose(a, b, atol=1e-11)


class TestBackendSelection:
    def test_active_backend_valid(self):
        assert kernels.BACKEND in ("python", "cython")
        assert kernels.BACKEND in kernels.available_backends()

    def test_get_backend_rejects_unknown(self):
        with pytest.raises(ValueError):
            kernels.get_backend("fortran")

    def test_env_var_forces_python_backend(self):
        import subprocess
        import sys

        out = subprocess.run(
            [sys.executable, "-c",
             "import bacr.kernels as k; print(k.BACKEND)"],
            env={"BACR_KERNELS": "py", "PATH": "/usr/bin:/bin"},
            capture_output=True, text=True)
        assert out.stdout.strip() == "python"

    def test_python_backend_always_available(self):
        mod = kernels.get_backend("python")
        args, rng = setup_args(3, budget=6)
        uni = rng.random(6)
        events, logps, ents, stopped, caches = mod.run_trace(
            kernels.MODE_SAMPLE, *args, uni, None)
        assert events.size <= 6
        assert logps.size == events.size == ents.size


class TestKernelSemantics:
    def test_zero_budget_trace(self):
        mod = kernels.get_backend("python")
        args, _ = setup_args(4, budget=0)
        events, logps, ents, stopped, caches = mod.run_trace(
            kernels.MODE_SAMPLE, *args, np.zeros(0), None)
        assert events.size == 0 and not stopped

    def test_stop_token_ends_trace(self):
        mod = kernels.get_backend("python")
        args, _ = setup_args(5, budget=10)
        tokens = np.array([0, 1, 3, 2, 2, 2, 2, 2, 2, 2], dtype=np.int64)
        events, *_rest = mod.run_trace(kernels.MODE_SCORE, *args, None, tokens)
        np.testing.assert_array_equal(events, [0, 1, 3])
        assert _rest[2] is True

    def test_work_count_feeds_the_input(self):
        mod = kernels.get_backend("python")
        args, _ = setup_args(6, budget=4)
        tokens = np.array([0, 0, 2, 2], dtype=np.int64)
        *_, caches = mod.run_trace(kernels.MODE_SCORE, *args, None, tokens)
        X = caches[0]
        np.testing.assert_allclose(X[:, -1] * 64, [0, 1, 2, 2], atol=1e-12)
