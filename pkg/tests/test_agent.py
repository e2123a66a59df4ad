"""Tests for the replay buffer, actor/critic heads, losses and training loop."""

import json
import math

import numpy as np
import pytest
from scipy import stats

from cramer_rl import agent as ag
from cramer_rl import envs, nn


def small_actor(obs_dim=3, act_dim=2, bound=(1.5, 0.7), seed=42, hidden=(8, 7)):
    return ag.ActorNet.create(obs_dim, act_dim, hidden, bound, np.random.default_rng(seed))


def small_critic(obs_dim=3, act_dim=2, seed=43, hidden=(8, 7), distributional=True):
    return ag.CriticNet.create(
        obs_dim, act_dim, hidden, np.random.default_rng(seed), distributional=distributional
    )


class TestReplayBuffer:
    def record(self, i):
        return ag.TransitionRecord(
            np.array([float(i)]), np.array([0.0]), float(i), np.array([float(i + 1)]), False
        )

    def test_push_grows_to_one(self):
        buf = ag.ReplayBuffer(10, 1, 1)
        buf.push(self.record(0))
        assert len(buf) == 1

    def test_fifo_overwrite(self):
        buf = ag.ReplayBuffer(3, 1, 1)
        for i in range(4):
            buf.push(self.record(i))
        assert len(buf) == 3
        kept = sorted(buf._reward[: len(buf)])
        assert kept == [1.0, 2.0, 3.0]

    def test_sample_requires_enough_data(self):
        buf = ag.ReplayBuffer(10, 1, 1)
        buf.push(self.record(0))
        with pytest.raises(ValueError):
            buf.sample(2, np.random.default_rng(0))

    def test_single_record_sample(self):
        buf = ag.ReplayBuffer(10, 1, 1)
        buf.push(self.record(5))
        batch = buf.sample(1, np.random.default_rng(0))
        assert batch.reward[0] == 5.0

    def test_sample_deterministic_under_seed(self):
        buf = ag.ReplayBuffer(100, 1, 1)
        for i in range(50):
            buf.push(self.record(i))
        a = buf.sample(16, np.random.default_rng(9)).reward
        b = buf.sample(16, np.random.default_rng(9)).reward
        np.testing.assert_array_equal(a, b)

    def test_uniform_sampling_chi_square(self):
        n_records = 1000
        buf = ag.ReplayBuffer(n_records, 1, 1)
        for i in range(n_records):
            buf.push(self.record(i))
        rng = np.random.default_rng(10)
        draws = 200_000
        counts = np.zeros(n_records)
        for _ in range(draws // n_records):
            batch = buf.sample(n_records, rng)
            counts += np.bincount(batch.reward.astype(int), minlength=n_records)
        expected = draws / n_records
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        p = stats.chi2.sf(chi2, df=n_records - 1)
        assert p > 0.001

    def test_sample_mean_clt(self):
        buf = ag.ReplayBuffer(500, 1, 1)
        for i in range(500):
            buf.push(self.record(i))
        rng = np.random.default_rng(11)
        rewards = np.concatenate([buf.sample(500, rng).reward for _ in range(20)])
        true_mean = buf._reward[:500].mean()
        true_std = buf._reward[:500].std()
        assert abs(rewards.mean() - true_mean) < 5 * true_std / math.sqrt(10_000)


class TestActorSampling:
    def test_actions_strictly_inside_bounds(self):
        actor = small_actor()
        rng = np.random.default_rng(0)
        for _ in range(200):
            action, _ = ag.actor_sample(actor, rng.normal(size=3), rng)
            assert np.all(np.abs(action) < np.asarray(actor.action_bound))

    def test_vanishing_std_limit_is_squashed_mean(self):
        actor = small_actor()
        # drive the log-std head to the clamp floor
        w, b = actor.params.layer(actor.spec.n_layers - 1)
        w[actor.action_dim:, :] = 0.0
        b[actor.action_dim:] = -50.0
        obs = np.array([0.3, -0.2, 1.0])
        expected = ag.deterministic_action(actor, obs)
        action, _ = ag.actor_sample(actor, obs, np.random.default_rng(1))
        np.testing.assert_allclose(action, expected, atol=1e-7)

    def test_log_prob_matches_numeric_cdf_derivative_1d(self):
        actor = small_actor(obs_dim=2, act_dim=1, bound=(1.3,))
        obs = np.array([0.4, -1.1])
        rng = np.random.default_rng(2)
        action, logp = ag.actor_sample(actor, obs, rng)
        mu, _, logstd, _ = ag._actor_heads(actor, obs[None, :])
        mu, std = float(mu[0, 0]), float(np.exp(logstd[0, 0]))
        bound = actor.action_bound[0]

        def action_cdf(a):
            return stats.norm.cdf((np.arctanh(a / bound) - mu) / std)

        h = 1e-6
        density = (action_cdf(action[0] + h) - action_cdf(action[0] - h)) / (2 * h)
        assert logp == pytest.approx(math.log(density), abs=1e-4)

    def test_actor_action_matches_actor_sample_draws(self):
        actor = small_actor()
        obs = np.array([0.1, 0.2, 0.3])
        a1, _ = ag.actor_sample(actor, obs, np.random.default_rng(3))
        a2 = ag.actor_action(actor, obs, np.random.default_rng(3))
        np.testing.assert_allclose(a1, a2, atol=0.0)


class TestCriticHeads:
    def test_sigma_clamped_for_arbitrary_params(self):
        critic = small_critic()
        for fill in (-1e6, -5.0, 0.0, 5.0, 1e6):
            critic.params.values[:] = fill
            _, sigma, _, _ = ag.critic_heads(critic, np.ones((4, 3)), np.ones((4, 2)))
            assert np.all(sigma >= critic.sigma_min)
            assert np.all(sigma <= critic.sigma_max)

    def test_initial_sigma_near_one(self):
        critic = small_critic(seed=7)
        rng = np.random.default_rng(8)
        _, sigma, _, _ = ag.critic_heads(
            critic, rng.normal(size=(64, 3)), rng.uniform(-1, 1, (64, 2))
        )
        assert 0.3 < float(np.median(sigma)) < 3.0


class TestCriticTarget:
    def batch(self, reward, terminal, n=4):
        rng = np.random.default_rng(20)
        return ag.Batch(
            obs=rng.normal(size=(n, 3)),
            action=rng.uniform(-1, 1, (n, 2)),
            reward=np.full(n, reward),
            next_obs=rng.normal(size=(n, 3)),
            terminal=np.full(n, terminal),
        )

    def test_terminal_rows_are_dirac_at_reward(self):
        actor, critic = small_actor(), small_critic()
        mean, std = ag.critic_target(
            self.batch(2.0, True), critic, actor, 0.2, 0.99, np.random.default_rng(0)
        )
        np.testing.assert_array_equal(mean, 2.0)
        np.testing.assert_array_equal(std, 0.0)

    def test_gamma_zero_collapses(self):
        actor, critic = small_actor(), small_critic()
        mean, std = ag.critic_target(
            self.batch(1.5, False), critic, actor, 0.2, 0.0, np.random.default_rng(0)
        )
        np.testing.assert_array_equal(mean, 1.5)
        np.testing.assert_array_equal(std, 0.0)

    def test_target_std_scales_with_gamma(self):
        actor, critic = small_actor(), small_critic()
        # freeze the critic to emit sigma == 1 everywhere
        critic.params.values[:] = 0.0
        _, bias = critic.params.layer(critic.spec.n_layers - 1)
        bias[1] = ag._SOFTPLUS_INV_1
        mean, std = ag.critic_target(
            self.batch(0.0, False), critic, actor, 0.0, 0.9, np.random.default_rng(0)
        )
        np.testing.assert_allclose(std, 0.9, rtol=1e-12)

    def test_targets_isolated_from_online_critic(self):
        actor = small_actor()
        online, target = small_critic(seed=1), small_critic(seed=2)
        batch = self.batch(0.3, False)
        before = ag.critic_target(batch, target, actor, 0.2, 0.99, np.random.default_rng(5))
        online.params.values += 123.0  # online update must not touch targets
        after = ag.critic_target(batch, target, actor, 0.2, 0.99, np.random.default_rng(5))
        np.testing.assert_array_equal(before[0], after[0])
        np.testing.assert_array_equal(before[1], after[1])


class TestCriticLoss:
    def test_zero_loss_and_gradient_at_perfect_fit(self):
        critic = small_critic()
        rng = np.random.default_rng(30)
        obs, act = rng.normal(size=(5, 3)), rng.uniform(-1, 1, (5, 2))
        q, sigma, _, _ = ag.critic_heads(critic, obs, act)
        loss, grad, _ = ag.critic_loss_and_grads(critic, obs, act, q.copy(), sigma.copy())
        assert loss <= 1e-12
        assert np.max(np.abs(grad.values)) <= 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        critic = small_critic(seed=44)
        obs, act = rng.normal(size=(4, 3)), rng.uniform(-1, 1, (4, 2))
        tmean = rng.normal(size=4)
        tstd = np.array([0.7, 0.0, 1.3, 0.2])
        _, grad, _ = ag.critic_loss_and_grads(critic, obs, act, tmean, tstd)
        base = critic.params.values.copy()
        h = 1e-5
        fd = np.zeros_like(base)
        for i in range(base.size):
            critic.params.values[i] = base[i] + h
            up, _, _ = ag.critic_loss_and_grads(critic, obs, act, tmean, tstd)
            critic.params.values[i] = base[i] - h
            down, _, _ = ag.critic_loss_and_grads(critic, obs, act, tmean, tstd)
            critic.params.values[i] = base[i]
            fd[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(grad.values, fd, rtol=1e-5, atol=1e-8)

    def test_mean_head_gradient_damped_at_sigma_ceiling(self):
        critic = small_critic()
        # push the sigma head to the 1000 clamp
        w, b = critic.params.layer(critic.spec.n_layers - 1)
        w[1, :] = 0.0
        b[1] = 5000.0
        rng = np.random.default_rng(32)
        obs, act = rng.normal(size=(8, 3)), rng.uniform(-1, 1, (8, 2))
        q, sigma, _, _ = ag.critic_heads(critic, obs, act)
        assert np.all(sigma == 1000.0)
        tmean = q + rng.uniform(-1, 1, 8)  # unit-scale targets
        _, d_q, _ = __import__("cramer_rl.gauss", fromlist=["gauss"]).distance_and_grads_arrays(
            q, sigma, tmean, np.zeros(8)
        )
        assert np.max(np.abs(d_q)) <= 0.002

    def test_nonfinite_loss_aborts(self):
        critic = small_critic()
        with pytest.raises((ag.NonFiniteLossError, ValueError)):
            ag.critic_loss_and_grads(
                critic, np.full((1, 3), np.nan), np.zeros((1, 2)), np.zeros(1), np.ones(1)
            )


class TestActorLoss:
    def test_zero_pathwise_gradient_when_critic_flat_and_alpha_zero(self):
        actor = small_actor()
        critic = small_critic()
        critic.params.values[:] = 0.0  # constant critic
        rng = np.random.default_rng(40)
        obs = rng.normal(size=(4, 3))
        noise = rng.standard_normal((4, 2))
        _, grad = ag.actor_loss_and_grads(actor, critic, obs, 0.0, noise)
        assert np.max(np.abs(grad.values)) == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(41)
        actor = small_actor(seed=45)
        critic = small_critic(seed=46)
        obs = rng.normal(size=(4, 3))
        noise = rng.standard_normal((4, 2))
        _, grad = ag.actor_loss_and_grads(actor, critic, obs, 0.2, noise)
        base = actor.params.values.copy()
        h = 1e-6
        fd = np.zeros_like(base)
        for i in range(base.size):
            actor.params.values[i] = base[i] + h
            up, _ = ag.actor_loss_and_grads(actor, critic, obs, 0.2, noise)
            actor.params.values[i] = base[i] - h
            down, _ = ag.actor_loss_and_grads(actor, critic, obs, 0.2, noise)
            actor.params.values[i] = base[i]
            fd[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(grad.values, fd, rtol=1e-4, atol=1e-8)

    def test_loss_is_affine_in_alpha(self):
        actor, critic = small_actor(), small_critic()
        rng = np.random.default_rng(42)
        obs = rng.normal(size=(6, 3))
        noise = rng.standard_normal((6, 2))
        l0, _ = ag.actor_loss_and_grads(actor, critic, obs, 0.0, noise)
        l1, _ = ag.actor_loss_and_grads(actor, critic, obs, 0.5, noise)
        l2, _ = ag.actor_loss_and_grads(actor, critic, obs, 1.0, noise)
        assert l2 - l1 == pytest.approx(l1 - l0, rel=1e-9)

    def test_no_gradient_reaches_critic(self):
        # the critic tape is consumed input-only; its parameters never move
        actor, critic = small_actor(), small_critic()
        before = critic.params.values.copy()
        rng = np.random.default_rng(43)
        ag.actor_loss_and_grads(actor, critic, rng.normal(size=(4, 3)), 0.2,
                                rng.standard_normal((4, 2)))
        np.testing.assert_array_equal(critic.params.values, before)


class TestSacBaseline:
    def test_perfect_critic_zero_loss(self):
        critic = small_critic(distributional=False)
        rng = np.random.default_rng(50)
        obs, act = rng.normal(size=(1, 3)), rng.uniform(-1, 1, (1, 2))
        q, _, _, _ = ag.critic_heads(critic, obs, act)
        loss, grad = ag.sac_critic_loss_and_grads(critic, obs, act, q.copy())
        assert loss == 0.0
        assert np.max(np.abs(grad.values)) == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(51)
        critic = small_critic(seed=47, distributional=False)
        obs, act = rng.normal(size=(4, 3)), rng.uniform(-1, 1, (4, 2))
        tmean = rng.normal(size=4)
        _, grad = ag.sac_critic_loss_and_grads(critic, obs, act, tmean)
        base = critic.params.values.copy()
        h = 1e-5
        fd = np.zeros_like(base)
        for i in range(base.size):
            critic.params.values[i] = base[i] + h
            up, _ = ag.sac_critic_loss_and_grads(critic, obs, act, tmean)
            critic.params.values[i] = base[i] - h
            down, _ = ag.sac_critic_loss_and_grads(critic, obs, act, tmean)
            critic.params.values[i] = base[i]
            fd[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(grad.values, fd, rtol=1e-5, atol=1e-9)

    def test_identical_streams_until_first_gradient_step(self):
        # same seed, both algorithms: the environment/noise stream only
        # diverges once parameter updates begin
        env_a, env_b = envs.noisy_chain_env(), envs.noisy_chain_env()
        kwargs = dict(total_steps=63, batch_size=64, eval_interval=10**9,
                      actor_hidden=(8, 8), critic_hidden=(8, 8), seed=3)
        res_a = ag.train(env_a, ag.AgentConfig(algo="cdsac", **kwargs))
        res_b = ag.train(env_b, ag.AgentConfig(algo="sac", **kwargs))
        assert res_a.stream_state == res_b.stream_state


class TestTrainLoop:
    def test_zero_steps_returns_initialization(self):
        env = envs.noisy_chain_env()
        cfg = ag.AgentConfig(total_steps=0, actor_hidden=(8, 8), critic_hidden=(8, 8), seed=5)
        res = ag.train(env, cfg)
        assert res.records == []
        assert res.summary["evaluations"] == 0
        assert res.adam_actor.t == 0 and res.adam_critic.t == 0
        fresh = ag.train(envs.noisy_chain_env(), cfg)
        np.testing.assert_array_equal(res.actor.params.values, fresh.actor.params.values)

    def test_same_seed_identical_records(self):
        cfg = ag.AgentConfig(total_steps=300, batch_size=32, eval_interval=100,
                             actor_hidden=(8, 8), critic_hidden=(8, 8), seed=6,
                             eval_episodes=2)
        r1 = ag.train(envs.noisy_chain_env(), cfg)
        r2 = ag.train(envs.noisy_chain_env(), cfg)
        assert json.dumps(r1.records) == json.dumps(r2.records)

    def test_record_schema(self):
        cfg = ag.AgentConfig(total_steps=80, batch_size=32, eval_interval=40,
                             actor_hidden=(8, 8), critic_hidden=(8, 8), seed=7,
                             eval_episodes=2)
        res = ag.train(envs.noisy_chain_env(), cfg)
        train_recs = [r for r in res.records if "critic_loss" in r]
        eval_recs = [r for r in res.records if "eval_mean" in r]
        assert train_recs and eval_recs
        assert set(train_recs[0]) == {"step", "critic_loss", "actor_loss", "mean_sigma", "buffer_size"}
        assert set(eval_recs[0]) == {"step", "eval_mean", "eval_std"}

    def test_sac_mode_runs_and_logs_null_sigma(self):
        cfg = ag.AgentConfig(algo="sac", total_steps=80, batch_size=32, eval_interval=10**9,
                             actor_hidden=(8, 8), critic_hidden=(8, 8), seed=8)
        res = ag.train(envs.noisy_chain_env(), cfg)
        train_recs = [r for r in res.records if "critic_loss" in r]
        assert all(r["mean_sigma"] is None for r in train_recs)


class TestEvaluate:
    def test_deterministic_env_zero_std(self):
        actor = small_actor(obs_dim=1, act_dim=1, bound=(1.0,))
        env = envs.noisy_chain_env(noise_std=0.0)
        mean, std = ag.evaluate(actor, env, 5, np.random.default_rng(60))
        assert std == 0.0

    def test_single_episode_mean(self):
        actor = small_actor(obs_dim=1, act_dim=1, bound=(1.0,))
        env = envs.noisy_chain_env(noise_std=0.0)
        mean, std = ag.evaluate(actor, env, 1, np.random.default_rng(61))
        assert std == 0.0
        env2 = envs.noisy_chain_env(noise_std=0.0)
        rng = np.random.default_rng(61)
        obs = env2.reset(rng)
        total = 0.0
        while True:
            res = env2.step(ag.deterministic_action(actor, obs), rng)
            total += res.reward
            obs = res.obs
            if res.terminal or res.truncated:
                break
        assert mean == total


class TestOverestimationProbe:
    def test_zero_critic_on_negative_env_overestimates(self):
        # reading 0 when every true return is negative is overestimation:
        # Q - MC comes out positive
        env = envs.pendulum_env(horizon=30)
        rng = np.random.default_rng(70)
        bias = ag.overestimation_probe(
            env,
            policy_fn=lambda obs: np.array([0.0]),
            q_fn=lambda obs, a: 0.0,
            gamma=0.99,
            n_rollouts=3,
            rng=rng,
            n_episodes=1,
            max_pairs=5,
        )
        assert bias > 0.0

    def test_exact_critic_has_zero_bias_on_deterministic_chain(self):
        length, gamma = 4, 0.9
        env = envs.noisy_chain_env(noise_std=0.0, length=length, safe_mean=0.5)

        def policy_fn(obs):
            return np.array([1.0])

        def q_fn(obs, action):
            pos = int(round(obs[0] * length))
            mix = (1.0 - float(action[0])) / 2.0
            first = 0.5 * (1 - mix) + 0.0 * mix
            rest = sum(0.5 * gamma**k for k in range(1, length - pos))
            return first + rest

        rng = np.random.default_rng(71)
        bias = ag.overestimation_probe(env, policy_fn, q_fn, gamma, 10, rng,
                                       n_episodes=2, max_pairs=8)
        assert abs(bias) < 1e-9

    def test_sign_test_pvalues(self):
        assert ag.paired_sign_test_greater([1.0] * 10) == pytest.approx(2.0**-10)
        assert ag.paired_sign_test_greater([]) == 1.0
        assert ag.paired_sign_test_greater([1.0, -1.0]) == pytest.approx(0.75)
        assert ag.paired_sign_test_greater([-1.0] * 5) == 1.0
