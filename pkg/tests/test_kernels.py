import os
import subprocess
import sys

import numpy as np
import pytest

from r2mdp import _fallback, kernels
from r2mdp.envs import make_env
from r2mdp.learning import Batch, LearningConfig, R2, Robust, Vanilla, q_learning
from r2mdp.robust import Iterative, UncertaintySpec

try:
    from r2mdp import _kernels as compiled
except ImportError:
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


@needs_compiled
class TestParity:
    def test_simplex_projection(self, rng):
        for _ in range(500):
            y = rng.normal(size=int(rng.integers(1, 8))) * rng.choice([0.1, 1, 10])
            assert np.array_equal(compiled.simplex_projection(y), _fallback.simplex_projection(y))

    def test_pga_l2_argmax(self, rng):
        for _ in range(100):
            q = rng.normal(size=5)
            w = float(rng.uniform(0, 2))
            a, b = compiled.pga_l2_argmax(q, w, 1e-12, 5000), _fallback.pga_l2_argmax(q, w, 1e-12,
                                                                                     5000)
            assert np.array_equal(a[0], b[0]) and a[1:] == b[1:]

    @pytest.mark.parametrize("p", [1, 2, kernels.P_INF])
    def test_ball_min_pgd(self, p, rng):
        for _ in range(100):
            y = rng.normal(size=6)
            r = float(rng.uniform(0, 0.5))
            a = compiled.ball_min_pgd(y, r, p, 0.1, 1e-10, 10_000)
            b = _fallback.ball_min_pgd(y, r, p, 0.1, 1e-10, 10_000)
            assert a[0] == b[0] and np.array_equal(a[1], b[1]) and a[2:] == b[2:]

    @pytest.mark.parametrize("variant", ["vanilla", "r2", "r2-batch", "robust-iterative"])
    def test_qlearning(self, variant, monkeypatch):
        env = make_env("mars_rover", slip=0.1)
        spec = UncertaintySpec.uniform(env.n_states, env.n_actions, "sa", 0.01, 0.01)
        var = {"vanilla": Vanilla(), "r2": R2(spec), "r2-batch": R2(spec),
               "robust-iterative": Robust(spec, Iterative())}[variant]
        mode = Batch(batch_size=32) if variant == "r2-batch" else LearningConfig().norm_mode
        cfg = LearningConfig(max_steps=3000, seed=5, norm_mode=mode, log_every=500)
        monkeypatch.setattr(kernels, "qlearn_block", compiled.qlearn_block)
        q_c, rec_c = q_learning(env, cfg, var)
        monkeypatch.setattr(kernels, "qlearn_block", _fallback.qlearn_block)
        q_p, rec_p = q_learning(env, cfg, var)
        assert np.array_equal(q_c, q_p)
        assert rec_c.value_streams() == rec_p.value_streams()


class TestSelection:
    def test_norm_codes(self):
        assert kernels.norm_code(float("inf")) == kernels.P_INF
        assert kernels.norm_code(1.0) == 1 and kernels.norm_code(2.0) == 2

    def test_env_var_forces_fallback(self):
        env = dict(os.environ, R2MDP_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "import r2mdp; print(r2mdp.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"

    @needs_compiled
    def test_compiled_is_default(self):
        if os.environ.get("R2MDP_PURE_PYTHON"):
            pytest.skip("fallback forced by environment")
        assert kernels.BACKEND == "cython"
