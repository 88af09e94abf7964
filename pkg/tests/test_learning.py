import numpy as np
import pytest

from r2mdp.envs import make_env
from r2mdp.errors import DomainError, StateError, UnsupportedError
from r2mdp.learning import (Batch, Exact, LearningConfig, NormEstimator, R2, ReplayBuffer, Robust,
                            Vanilla, batch_norm_sq, batch_norm_update, epsilon_at,
                            evaluate_policy_rollouts, exact_v_norm, q_learning, r2_optimal_q,
                            r2_td, step_size)
from r2mdp.mdp import policy_evaluation, value_iteration
from r2mdp.regularizers import L1, L2, LINF
from r2mdp.robust import ClosedForm, Iterative, UncertaintySpec


def sa_spec(env, alpha_r, alpha_p):
    return UncertaintySpec.uniform(env.n_states, env.n_actions, "sa", alpha_r, alpha_p)


class TestTd:
    def test_examples(self):
        q = np.array([[0.0, 0.0], [2.0, 1.0]])
        assert r2_td(q, (0, 0, 1.0, 1, False), 0, 0, 0.9, 0) == pytest.approx(2.8)
        assert r2_td(q, (0, 0, 1.0, 1, False), 0.1, 0.01, 0.9, 3) == pytest.approx(2.673)
        q[0, 0] = 1.0
        assert r2_td(q, (0, 0, 1.0, 1, True), 0, 0, 0.9, 0) == 0

    def test_terminal_keeps_penalty(self):
        q = np.zeros((2, 1))
        assert r2_td(q, (0, 0, 1.0, 1, True), 0.1, 0.01, 0.9, 3) == pytest.approx(0.873)


class TestSchedules:
    def test_step_size(self):
        assert step_size(0) == 1.0
        assert step_size(15) == pytest.approx(16 ** -0.75)

    def test_robbins_monro_partial_sums(self):
        n = np.arange(10 ** 6)
        b = step_size(n)
        assert b.sum() > 100 and (b ** 2).sum() < 4

    def test_epsilon(self):
        cfg = LearningConfig()
        assert epsilon_at(cfg, 0) == 1.0
        assert epsilon_at(cfg, 100) == pytest.approx(0.995 ** 100)
        assert epsilon_at(cfg, 10 ** 4) == 0.05

    def test_config_checks(self):
        with pytest.raises(DomainError):
            LearningConfig(lr_power=0.4)
        with pytest.raises(DomainError):
            Batch(batch_size=0)
        with pytest.raises(DomainError):
            Batch(beta=1.5)


class TestNorms:
    def test_exact(self):
        assert exact_v_norm(np.zeros((3, 2))) == 0
        assert exact_v_norm(np.array([[3.0, 1.0], [0.0, 4.0]]), L2) == pytest.approx(5)
        # dual of the transition norm
        assert exact_v_norm(np.array([[3.0], [-4.0]]), L1) == 4
        assert exact_v_norm(np.array([[3.0], [-4.0]]), LINF) == 7

    def test_batch_each_state_once_is_exact(self):
        v = np.array([1.0, -2.0, 3.0])
        states = np.arange(3)
        assert batch_norm_sq(v, states, states) == pytest.approx(14)

    def test_batch_unbiased_over_buffer(self, rng):
        v = rng.normal(size=6)
        buffer_states = np.repeat(np.arange(6), [1, 2, 5, 10, 20, 40])
        draws = [batch_norm_sq(v, rng.choice(buffer_states, 64), buffer_states)
                 for _ in range(4000)]
        assert np.mean(draws) == pytest.approx(np.sum(v ** 2), rel=0.05)


class TestEstimator:
    def buffer_once(self, n):
        buf = ReplayBuffer(n)
        for s in range(n):
            buf.push(s, 0, 0.0, s, False)
        return buf

    def test_full_weight_on_batch(self, rng):
        buf = self.buffer_once(1)
        q = np.array([[2.0, -1.0]])
        est = batch_norm_update(NormEstimator(1.0, 9.0, 3), buf, q, 4, rng)
        assert est.current_estimate_sq == pytest.approx(4.0) and est.n_updates == 4

    def test_zero_weight_keeps_estimate(self, rng):
        buf = self.buffer_once(3)
        est = batch_norm_update(NormEstimator(0.0, 9.0, 3), buf, rng.normal(size=(3, 2)), 8, rng)
        assert est.current_estimate_sq == 9.0

    def test_first_update_initialises(self, rng):
        buf = self.buffer_once(1)
        est = batch_norm_update(NormEstimator(0.1), buf, np.array([[3.0]]), 5, rng)
        assert est.estimate == pytest.approx(3.0)

    def test_empty_buffer(self, rng):
        with pytest.raises(StateError):
            batch_norm_update(NormEstimator(0.1), ReplayBuffer(4), np.zeros((2, 2)), 4, rng)

    def test_converges_on_frozen_table(self, rng):
        env = make_env("mars_rover")
        q = r2_optimal_q(env, sa_spec(env, 0.01, 0.01))
        buf = ReplayBuffer(10_000)
        states = rng.choice(np.flatnonzero(~env.terminal_mask), 10_000)
        buf.push_many(states, np.zeros_like(states), np.zeros(states.size), states,
                      np.zeros(states.size, dtype=bool))
        target = np.linalg.norm(q.max(axis=1)[np.unique(states)])
        est = NormEstimator(0.1)
        for _ in range(500):
            est = batch_norm_update(est, buf, q, 128, rng)
        assert abs(est.estimate - target) <= 0.05 * target


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(3)
        for i in range(5):
            buf.push(i, 0, float(i), i + 1, False)
        s, _, r, s2, _ = buf.records()
        assert len(buf) == 3
        assert s.tolist() == [2, 3, 4] and r.tolist() == [2.0, 3.0, 4.0]
        assert s2.tolist() == [3, 4, 5]

    def test_push_many_larger_than_capacity(self):
        buf = ReplayBuffer(2)
        buf.push_many([0, 1, 2], [0, 0, 0], [0.0, 1.0, 2.0], [1, 2, 3], [False] * 3)
        assert buf.records()[0].tolist() == [1, 2]

    def test_capacity_checked(self):
        with pytest.raises(DomainError):
            ReplayBuffer(0)


class TestQLearning:
    def test_zero_radii_r2_is_vanilla(self):
        env = make_env("mars_rover")
        cfg = LearningConfig(max_steps=5000, seed=3)
        qv, rv = q_learning(env, cfg, Vanilla())
        qr, rr = q_learning(env, cfg, R2(sa_spec(env, 0, 0)))
        assert np.array_equal(qv, qr)
        assert rv.value_streams() == rr.value_streams()

    def test_seed_determinism(self):
        env = make_env("mars_rover")
        for mode in (Exact(), Batch(batch_size=16)):
            cfg = LearningConfig(max_steps=3000, seed=7, norm_mode=mode, log_every=500)
            variant = R2(sa_spec(env, 0.01, 0.01))
            q1, r1 = q_learning(env, cfg, variant)
            q2, r2 = q_learning(env, cfg, variant)
            assert np.array_equal(q1, q2) and r1.value_streams() == r2.value_streams()
        q3, _ = q_learning(env, LearningConfig(max_steps=3000, seed=8), variant)
        assert not np.array_equal(q1, q3)

    def test_closed_form_robust_matches_r2(self):
        env = make_env("mars_rover")
        cfg = LearningConfig(max_steps=4000, seed=1)
        spec = sa_spec(env, 0.01, 0.01)
        q_r2, _ = q_learning(env, cfg, R2(spec))
        q_rob, _ = q_learning(env, cfg, Robust(spec, ClosedForm()))
        assert np.array_equal(q_r2, q_rob)

    def test_iterative_robust_close_to_closed_form(self):
        env = make_env("mars_rover")
        cfg = LearningConfig(max_steps=2000, seed=1)
        spec = sa_spec(env, 0.01, 0.01)
        q_c, _ = q_learning(env, cfg, Robust(spec, ClosedForm()))
        q_i, rec = q_learning(env, cfg, Robust(spec, Iterative(tol=1e-10)))
        assert np.max(np.abs(q_c - q_i)) <= 1e-4
        assert rec.solver_failures == 0

    def test_run_record(self):
        env = make_env("mars_rover")
        _, rec = q_learning(env, LearningConfig(max_steps=2500, log_every=1000), Vanilla())
        assert rec.steps == [1000, 2000, 2500]
        assert rec.wall_time_ns == sorted(rec.wall_time_ns)
        rows = list(rec.rows())
        assert rows[0]["variant"] == "vanilla" and rows[0]["schema_version"] == 1

    def test_s_rect_rejected(self):
        env = make_env("mars_rover")
        spec = UncertaintySpec.uniform(env.n_states, env.n_actions, "s", 0.01, 0.01)
        with pytest.raises(UnsupportedError):
            q_learning(env, LearningConfig(max_steps=10), R2(spec))

    def test_batch_mode_estimate_is_sane(self):
        # the buffer only holds recently visited states, so the estimate sits below the full norm
        env = make_env("mars_rover")
        q, rec = q_learning(env, LearningConfig(max_steps=50_000, seed=2, norm_mode=Batch()),
                            R2(sa_spec(env, 0.01, 0.01)))
        assert np.all(np.isfinite(rec.norm_estimates))
        assert 0.6 * exact_v_norm(q) <= rec.norm_estimates[-1] <= 1.05 * exact_v_norm(q)

    def test_exploring_starts_converge_to_r2_optimum(self):
        env = make_env("mars_rover")
        spec = sa_spec(env, 0.01, 0.01)
        cfg = LearningConfig(max_steps=300_000, seed=0, exploring_starts=True)
        q, _ = q_learning(env, cfg, R2(spec))
        mdp = env.to_tabular_mdp()
        _, v_star = value_iteration(mdp, 1e-12)
        v = policy_evaluation(mdp, np.eye(4)[q.argmax(1)], method="linear")
        assert v[0] == pytest.approx(v_star[0], abs=1e-9)
        assert np.max(np.abs(q - r2_optimal_q(env, spec))) <= 0.25


class TestReference:
    def test_zero_radii_is_value_iteration(self):
        env = make_env("maze")
        q = r2_optimal_q(env, sa_spec(env, 0, 0))
        _, v = value_iteration(env.to_tabular_mdp(), 1e-12)
        assert np.allclose(q.max(1), v, atol=1e-9)

    def test_radii_lower_the_optimum(self):
        env = make_env("mars_rover")
        assert np.all(r2_optimal_q(env, sa_spec(env, 0.01, 0.01))
                      <= r2_optimal_q(env, sa_spec(env, 0, 0)) + 1e-12)


class TestRollouts:
    def test_deterministic_env_zero_std(self):
        env = make_env("mars_rover")
        pol, _ = value_iteration(env.to_tabular_mdp(), 1e-12)
        stats = evaluate_policy_rollouts(env, pol, 50, seed=0)
        assert stats.std <= 1e-12 and stats.std_discounted <= 1e-12 and stats.truncated == 0

    def test_matches_model_value(self):
        mdp = make_env("mars_rover").to_tabular_mdp()
        pol, v = value_iteration(mdp, 1e-12)
        stats = evaluate_policy_rollouts(make_env("mars_rover"), pol, 10, seed=0)
        assert stats.mean_discounted == pytest.approx(v[0], abs=1e-9)

    def test_slippery_within_three_sigma(self):
        env = make_env("mars_rover", slip=0.3)
        mdp = env.to_tabular_mdp()
        pol, _ = value_iteration(mdp, 1e-12)
        v = policy_evaluation(mdp, pol, method="linear")
        n = 4000
        stats = evaluate_policy_rollouts(env, pol, n, seed=1)
        assert abs(stats.mean_discounted - v[0]) <= 3 * stats.std_discounted / np.sqrt(n)

    def test_common_noise_across_policies(self):
        env = make_env("mars_rover", slip=0.5)
        pol = np.zeros(env.n_states, dtype=int)
        a = evaluate_policy_rollouts(env, pol, 100, seed=4)
        b = evaluate_policy_rollouts(env, pol, 100, seed=4)
        assert a == b

    def test_checks(self):
        env = make_env("maze")
        with pytest.raises(DomainError):
            evaluate_policy_rollouts(env, np.zeros(env.n_states, dtype=int), 0, seed=0)
        with pytest.raises(DomainError):
            evaluate_policy_rollouts(env, np.zeros(3, dtype=int), 5, seed=0)
