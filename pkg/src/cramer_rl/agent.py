"""Off-policy training loop for the energy-distance distributional critic.

Implements the full pipeline: FIFO replay buffer, tanh-squashed reparameterized
Gaussian actor, a dual-head critic emitting (Q, sigma) trained by the
closed-form energy distance to one-sample soft targets, Polyak-averaged target
network, plus a scalar squared-error critic baseline ("sac" mode) sharing the
same pipeline.  Everything is driven by explicit numpy Generators so full runs
are bit-reproducible from the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from . import gauss, nn

_LOG_2 = math.log(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class NonFiniteLossError(RuntimeError):
    """A loss went non-finite; training aborts rather than clipping."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class AgentConfig:
    gamma: float = 0.99
    alpha: float = 0.2
    tau: float = 0.005
    batch_size: int = 256
    lr: float = 3e-4
    grad_steps_per_env_step: int = 1
    target_update_interval: int = 1
    eval_interval: int = 1000
    eval_episodes: int = 10
    total_steps: int = 200_000
    seed: int = 0
    algo: str = "cdsac"
    actor_hidden: tuple = (256, 256)
    critic_hidden: tuple = (256, 255)
    buffer_capacity: int = 1_000_000
    sigma_min: float = 0.01
    sigma_max: float = 1000.0
    logstd_min: float = -20.0
    logstd_max: float = 2.0

    def __post_init__(self):
        if self.algo not in ("cdsac", "sac"):
            raise ValueError(f"algo must be 'cdsac' or 'sac', got {self.algo!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        positives = {
            "batch_size": self.batch_size,
            "lr": self.lr,
            "grad_steps_per_env_step": self.grad_steps_per_env_step,
            "target_update_interval": self.target_update_interval,
            "eval_interval": self.eval_interval,
            "eval_episodes": self.eval_episodes,
            "buffer_capacity": self.buffer_capacity,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)


@dataclass
class TransitionRecord:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    terminal: bool


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray


class ReplayBuffer:
    """Ring buffer over transitions; uniform sampling with replacement."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._obs = np.zeros((capacity, obs_dim))
        self._action = np.zeros((capacity, action_dim))
        self._reward = np.zeros(capacity)
        self._next_obs = np.zeros((capacity, obs_dim))
        self._terminal = np.zeros(capacity, dtype=bool)
        self._cursor = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, record: TransitionRecord):
        i = self._cursor
        self._obs[i] = record.obs
        self._action[i] = record.action
        self._reward[i] = record.reward
        self._next_obs[i] = record.next_obs
        self._terminal[i] = record.terminal
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self._size < n:
            raise ValueError(f"buffer holds {self._size} transitions, need {n}")
        idx = rng.integers(0, self._size, size=n)
        return Batch(
            self._obs[idx],
            self._action[idx],
            self._reward[idx],
            self._next_obs[idx],
            self._terminal[idx],
        )


# --- networks -------------------------------------------------------------------


@dataclass
class ActorNet:
    """Trunk over obs with mean and raw-log-std heads per action dimension."""

    spec: nn.MlpSpec
    params: nn.ParameterVector
    action_bound: np.ndarray
    logstd_min: float
    logstd_max: float

    @classmethod
    def create(cls, obs_dim, action_dim, hidden, action_bound, rng,
               logstd_min=-20.0, logstd_max=2.0):
        spec = nn.MlpSpec((obs_dim, *hidden, 2 * action_dim))
        return cls(
            spec,
            nn.init_params(spec, rng),
            np.asarray(action_bound, dtype=np.float64).reshape(action_dim),
            logstd_min,
            logstd_max,
        )

    @property
    def action_dim(self):
        return self.action_bound.size


def _softplus(x):
    return np.logaddexp(0.0, x)


_SOFTPLUS_INV_1 = math.log(math.e - 1.0)  # raw value giving softplus(raw) = 1


@dataclass
class CriticNet:
    """Trunk over (obs, action).  Distributional mode emits a mean head and a
    std head (softplus then clamp to [sigma_min, sigma_max]); scalar mode is a
    single Q head."""

    spec: nn.MlpSpec
    params: nn.ParameterVector
    distributional: bool
    sigma_min: float = 0.01
    sigma_max: float = 1000.0

    @classmethod
    def create(cls, obs_dim, action_dim, hidden, rng, distributional=True,
               sigma_min=0.01, sigma_max=1000.0):
        out_dim = 2 if distributional else 1
        spec = nn.MlpSpec((obs_dim + action_dim, *hidden, out_dim))
        params = nn.init_params(spec, rng)
        if distributional:
            # start the std head near sigma = 1
            _, bias = params.layer(spec.n_layers - 1)
            bias[1] = _SOFTPLUS_INV_1
        return cls(spec, params, distributional, sigma_min, sigma_max)


def critic_heads(critic: CriticNet, obs: np.ndarray, action: np.ndarray, need_tape=True):
    """Forward pass; returns (q, sigma, raw_sigma, tape).  sigma is None in
    scalar mode; otherwise it is clamped into [sigma_min, sigma_max]."""
    x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(action)], axis=1)
    if need_tape:
        out, tape = nn.forward(critic.spec, critic.params, x)
    else:
        out, tape = nn.forward_only(critic.spec, critic.params, x), None
    q = out[:, 0]
    if not critic.distributional:
        return q, None, None, tape
    raw = out[:, 1]
    sigma = np.clip(_softplus(raw), critic.sigma_min, critic.sigma_max)
    return q, sigma, raw, tape


def _actor_heads(actor: ActorNet, obs: np.ndarray, need_tape=True):
    obs = np.atleast_2d(obs)
    if need_tape:
        out, tape = nn.forward(actor.spec, actor.params, obs)
    else:
        out, tape = nn.forward_only(actor.spec, actor.params, obs), None
    d = actor.action_dim
    mu, raw = out[:, :d], out[:, d:]
    logstd = np.clip(raw, actor.logstd_min, actor.logstd_max)
    return mu, raw, logstd, tape


def _squashed_log_prob(u, mu, std, tanh_u, bound):
    """log-density of action = bound * tanh(u) with u ~ N(mu, std^2).

    Uses log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)) for stability.
    """
    z = (u - mu) / std
    gauss_term = -0.5 * z * z - np.log(std) - _LOG_SQRT_2PI
    jac_term = np.log(bound) + 2.0 * (_LOG_2 - u - _softplus(-2.0 * u))
    return (gauss_term - jac_term).sum(axis=1)


def _actor_sample_parts(actor: ActorNet, obs: np.ndarray, noise: np.ndarray, need_tape=True):
    mu, raw, logstd, tape = _actor_heads(actor, obs, need_tape)
    std = np.exp(logstd)
    u = mu + std * noise
    tanh_u = np.tanh(u)
    action = actor.action_bound * tanh_u
    log_prob = _squashed_log_prob(u, mu, std, tanh_u, actor.action_bound)
    return action, log_prob, mu, raw, logstd, std, u, tanh_u, tape


def actor_sample_batch(actor: ActorNet, obs: np.ndarray, noise: np.ndarray):
    action, log_prob, *_ = _actor_sample_parts(actor, np.atleast_2d(obs), noise, need_tape=False)
    return action, log_prob


def actor_sample(actor: ActorNet, obs: np.ndarray, rng: np.random.Generator):
    """Draw one squashed action and its log-density."""
    noise = rng.standard_normal((1, actor.action_dim))
    action, log_prob = actor_sample_batch(actor, obs[None, :], noise)
    return action[0], float(log_prob[0])


def actor_action(actor: ActorNet, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sampled action only (log-density skipped); same draws as `actor_sample`."""
    out = nn.forward_only(actor.spec, actor.params, obs)
    d = actor.action_dim
    logstd = np.clip(out[d:], actor.logstd_min, actor.logstd_max)
    u = out[:d] + np.exp(logstd) * rng.standard_normal(d)
    return actor.action_bound * np.tanh(u)


def deterministic_action(actor: ActorNet, obs: np.ndarray) -> np.ndarray:
    out = nn.forward_only(actor.spec, actor.params, obs)
    return actor.action_bound * np.tanh(out[: actor.action_dim])


# --- losses ---------------------------------------------------------------------


def critic_target(
    batch: Batch,
    target_critic: CriticNet,
    actor: ActorNet,
    alpha: float,
    gamma: float,
    rng: np.random.Generator,
):
    """One-sample soft distributional targets.

    Non-terminal rows: mean = r + gamma * (Qbar(s', a') - alpha * log pi(a'|s'))
    with a' sampled once from the actor, std = gamma * sigmabar(s', a') (the
    discount rescales the whole target distribution).  Terminal rows collapse
    to (r, 0).  Nothing here tracks gradients, so target parameters stay frozen.
    """
    n = batch.obs.shape[0]
    noise = rng.standard_normal((n, actor.action_dim))
    next_action, next_logp = actor_sample_batch(actor, batch.next_obs, noise)
    q_bar, sigma_bar, _, _ = critic_heads(
        target_critic, batch.next_obs, next_action, need_tape=False
    )
    mean = batch.reward + gamma * (q_bar - alpha * next_logp)
    mean = np.where(batch.terminal, batch.reward, mean)
    if target_critic.distributional:
        std = np.where(batch.terminal, 0.0, gamma * sigma_bar)
    else:
        std = np.zeros(n)
    return mean, std


def critic_loss_and_grads(
    critic: CriticNet, obs: np.ndarray, action: np.ndarray,
    target_mean: np.ndarray, target_std: np.ndarray,
):
    """Mean energy distance to the per-sample targets, with exact gradients.

    The mean-head gradient is the closed-form derivative of the distance (the
    confidence-scaled weight discussed in `gauss.grad_mean`); the std head
    chains the analytic std derivative through softplus, with zero derivative
    in the clamped regions.
    """
    q, sigma, raw, tape = critic_heads(critic, obs, action)
    n = q.size
    dists, d_q, d_sigma = gauss.distance_and_grads_arrays(q, sigma, target_mean, target_std)
    loss = float(dists.mean())
    if not math.isfinite(loss):
        raise NonFiniteLossError("critic loss is non-finite")
    softplus_raw = _softplus(raw)
    inside = (softplus_raw > critic.sigma_min) & (softplus_raw < critic.sigma_max)
    d_raw = d_sigma * expit(raw) * inside
    grad, _ = nn.backward(tape, np.stack([d_q, d_raw], axis=1) / n)
    return loss, grad, float(sigma.mean())


def sac_critic_loss_and_grads(
    critic: CriticNet, obs: np.ndarray, action: np.ndarray, target_mean: np.ndarray
):
    """Scalar baseline: mean squared error to the soft scalar target."""
    q, _, _, tape = critic_heads(critic, obs, action)
    n = q.size
    err = q - target_mean
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        raise NonFiniteLossError("critic loss is non-finite")
    grad, _ = nn.backward(tape, (2.0 * err / n)[:, None])
    return loss, grad


def actor_loss_and_grads(
    actor: ActorNet, critic: CriticNet, obs: np.ndarray, alpha: float, noise: np.ndarray
):
    """Reparameterized policy loss mean(alpha * log pi(a|s) - Q(s, a)).

    The returned gradient combines the direct log-density term with the
    pathwise term through the sampled action; the critic only contributes its
    action-input gradient (mean head), never a parameter gradient.
    """
    obs = np.atleast_2d(obs)
    n = obs.shape[0]
    action, log_prob, mu, raw, logstd, std, u, tanh_u, tape = _actor_sample_parts(
        actor, obs, noise
    )
    q, _, _, critic_tape = critic_heads(critic, obs, action)
    loss = float(np.mean(alpha * log_prob - q))
    if not math.isfinite(loss):
        raise NonFiniteLossError("actor loss is non-finite")
    # dL/da from the -Q(s, a) term, via the critic's input gradient (mean head)
    gout_c = np.zeros((n, critic.spec.layer_sizes[-1]))
    gout_c[:, 0] = -1.0 / n
    input_grad = nn.backward_input_only(critic_tape, gout_c)
    grad_a = input_grad[:, obs.shape[1]:]
    w_alpha = alpha / n
    one_minus_t2 = 1.0 - tanh_u * tanh_u
    grad_u = grad_a * actor.action_bound * one_minus_t2 \
        + 2.0 * w_alpha * tanh_u - w_alpha * noise / std
    grad_mu = grad_u + w_alpha * noise / std
    grad_std = grad_u * noise + w_alpha * (noise * noise - 1.0) / std
    inside = (raw >= actor.logstd_min) & (raw <= actor.logstd_max)
    grad_raw = grad_std * std * inside
    grad, _ = nn.backward(tape, np.concatenate([grad_mu, grad_raw], axis=1))
    return loss, grad


# --- training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    actor: ActorNet
    critic: CriticNet
    target_params: nn.ParameterVector
    adam_critic: nn.AdamState
    adam_actor: nn.AdamState
    config: AgentConfig
    records: list | None
    summary: dict
    stream_state: dict = field(default_factory=dict)


def evaluate(actor: ActorNet, env, n_episodes: int, rng: np.random.Generator):
    """Deterministic-mean rollouts; returns (mean, std) of undiscounted returns."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    totals = np.zeros(n_episodes)
    for ep in range(n_episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            res = env.step(deterministic_action(actor, obs), rng)
            total += res.reward
            obs = res.obs
            if res.terminal or res.truncated:
                break
        totals[ep] = total
    return float(totals.mean()), float(totals.std())


def evaluate_random_policy(env, n_episodes: int, rng: np.random.Generator):
    """Uniform-in-bounds action baseline under the same protocol as `evaluate`."""
    bound = np.asarray(env.spec.action_bound)
    totals = np.zeros(n_episodes)
    for ep in range(n_episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            action = rng.uniform(-bound, bound)
            res = env.step(action, rng)
            total += res.reward
            if res.terminal or res.truncated:
                break
            obs = res.obs
        totals[ep] = total
    return float(totals.mean()), float(totals.std())


def train(env, config: AgentConfig, rng: np.random.Generator | None = None,
          record_sink=None, keep_records: bool | None = None) -> TrainResult:
    """Run the full off-policy loop on `env`.

    Per environment step: act with the stochastic policy, store the transition,
    then do `grad_steps_per_env_step` updates (critic, actor, Polyak).  Every
    `eval_interval` steps a deterministic evaluation runs on a saved/restored
    copy of the environment state.  One log record is emitted per gradient-step
    group and one per evaluation, through `record_sink` and/or the returned
    `records` list.  Fully deterministic given `config.seed`.
    """
    root = np.random.SeedSequence(config.seed)
    init_ss, stream_ss, eval_ss = root.spawn(3)
    init_rng = np.random.default_rng(init_ss)
    stream = rng if rng is not None else np.random.default_rng(stream_ss)

    keep = keep_records if keep_records is not None else (record_sink is None)
    records = [] if keep else None

    def emit(rec):
        if records is not None:
            records.append(rec)
        if record_sink is not None:
            record_sink(rec)

    obs_dim, action_dim = env.spec.obs_dim, env.spec.action_dim
    actor = ActorNet.create(
        obs_dim, action_dim, config.actor_hidden, env.spec.action_bound, init_rng,
        config.logstd_min, config.logstd_max,
    )
    critic = CriticNet.create(
        obs_dim, action_dim, config.critic_hidden, init_rng,
        distributional=(config.algo == "cdsac"),
        sigma_min=config.sigma_min, sigma_max=config.sigma_max,
    )
    target_params = critic.params.copy()
    target_critic = replace(critic, params=target_params)
    adam_critic = nn.AdamState.for_params(critic.params, config.lr)
    adam_actor = nn.AdamState.for_params(actor.params, config.lr)
    buffer = ReplayBuffer(config.buffer_capacity, obs_dim, action_dim)

    evals = []

    def run_eval(step):
        saved = env.get_state()
        eval_rng = np.random.default_rng(eval_ss.spawn(1)[0])
        mean, std = evaluate(actor, env, config.eval_episodes, eval_rng)
        env.set_state(saved)
        evals.append((step, mean, std))
        emit({"step": step, "eval_mean": mean, "eval_std": std})

    obs = env.reset(stream)
    grad_steps_done = 0
    # the networks are small; multi-threaded BLAS only adds dispatch overhead
    limiter = threadpool_limits(limits=1)
    try:
        for step in range(1, config.total_steps + 1):
            action = actor_action(actor, obs, stream)
            res = env.step(action, stream)
            buffer.push(TransitionRecord(obs, action, res.reward, res.obs, res.terminal))
            obs = env.reset(stream) if (res.terminal or res.truncated) else res.obs

            if len(buffer) >= config.batch_size:
                c_losses, a_losses, sigmas = [], [], []
                for _ in range(config.grad_steps_per_env_step):
                    batch = buffer.sample(config.batch_size, stream)
                    t_mean, t_std = critic_target(
                        batch, target_critic, actor, config.alpha, config.gamma, stream
                    )
                    if critic.distributional:
                        c_loss, c_grad, mean_sigma = critic_loss_and_grads(
                            critic, batch.obs, batch.action, t_mean, t_std
                        )
                    else:
                        c_loss, c_grad = sac_critic_loss_and_grads(
                            critic, batch.obs, batch.action, t_mean
                        )
                        mean_sigma = None
                    nn.adam_step(adam_critic, critic.params, c_grad)
                    noise = stream.standard_normal((config.batch_size, action_dim))
                    a_loss, a_grad = actor_loss_and_grads(
                        actor, critic, batch.obs, config.alpha, noise
                    )
                    nn.adam_step(adam_actor, actor.params, a_grad)
                    grad_steps_done += 1
                    if grad_steps_done % config.target_update_interval == 0:
                        nn.polyak_update(target_params, critic.params, config.tau)
                    c_losses.append(c_loss)
                    a_losses.append(a_loss)
                    if mean_sigma is not None:
                        sigmas.append(mean_sigma)
                emit({
                    "step": step,
                    "critic_loss": float(np.mean(c_losses)),
                    "actor_loss": float(np.mean(a_losses)),
                    "mean_sigma": float(np.mean(sigmas)) if sigmas else None,
                    "buffer_size": len(buffer),
                })

            if step % config.eval_interval == 0:
                run_eval(step)
        if config.total_steps > 0 and (not evals or evals[-1][0] != config.total_steps):
            run_eval(config.total_steps)
    except NonFiniteLossError as exc:
        raise NonFiniteLossError(f"{exc} at env step {step}", step=step) from exc
    finally:
        limiter.unregister()

    if evals:
        best = max(evals, key=lambda e: e[1])
        summary = {
            "evaluations": len(evals),
            "best_eval_mean": best[1],
            "best_eval_std": best[2],
            "best_step": best[0],
            "final_eval_mean": evals[-1][1],
            "final_eval_std": evals[-1][2],
        }
    else:
        summary = {"evaluations": 0}
    summary["clipped_actions"] = env.clipped_actions
    return TrainResult(
        actor=actor,
        critic=critic,
        target_params=target_params,
        adam_critic=adam_critic,
        adam_actor=adam_actor,
        config=config,
        records=records,
        summary=summary,
        stream_state=stream.bit_generator.state,
    )


# --- overestimation probe ---------------------------------------------------------


def overestimation_probe(env, policy_fn, q_fn, gamma: float, n_rollouts: int,
                         rng: np.random.Generator, n_episodes: int = 4,
                         max_pairs: int = 40, visit_fn=None) -> float:
    """Mean (Q-estimate - Monte Carlo return) over visited state-action pairs.

    Pairs are collected along `visit_fn` rollouts (defaults to `policy_fn`;
    pass the stochastic behavior policy to probe the pairs the agent actually
    visits).  For each pair the true discounted return of taking that action
    and then following `policy_fn` is estimated from `n_rollouts` restarts of
    the saved environment state.  Positive output means the critic
    overestimates.
    """
    visit_fn = visit_fn or policy_fn
    pairs = []
    for _ in range(n_episodes):
        obs = env.reset(rng)
        while True:
            action = visit_fn(obs)
            if len(pairs) < max_pairs:
                pairs.append((env.get_state(), obs.copy(), action))
            res = env.step(action, rng)
            obs = res.obs
            if res.terminal or res.truncated:
                break
        if len(pairs) >= max_pairs:
            break
    biases = []
    for state, obs0, action0 in pairs:
        returns = np.zeros(n_rollouts)
        for k in range(n_rollouts):
            env.set_state(state)
            res = env.step(action0, rng)
            total = res.reward
            disc = gamma
            obs = res.obs
            while not (res.terminal or res.truncated):
                res = env.step(policy_fn(obs), rng)
                total += disc * res.reward
                disc *= gamma
                obs = res.obs
            returns[k] = total
        biases.append(q_fn(obs0, action0) - returns.mean())
    return float(np.mean(biases))


def critic_bias_of_result(result: TrainResult, env, n_rollouts: int,
                          rng: np.random.Generator, **probe_kwargs) -> float:
    """Overestimation probe wired to a trained agent.

    Pairs come from the stochastic behavior policy (what the agent visits);
    the Monte Carlo reference follows the deterministic-mean policy.
    """
    actor, critic = result.actor, result.critic

    def policy_fn(obs):
        return deterministic_action(actor, obs)

    def visit_fn(obs):
        return actor_action(actor, obs, rng)

    def q_fn(obs, action):
        q, _, _, _ = critic_heads(critic, obs[None, :], action[None, :], need_tape=False)
        return float(q[0])

    return overestimation_probe(
        env, policy_fn, q_fn, result.config.gamma, n_rollouts, rng,
        visit_fn=visit_fn, **probe_kwargs
    )


def paired_sign_test_greater(diffs) -> float:
    """Exact one-sided sign test p-value for median(diffs) > 0.

    Ties are dropped, successes are strictly positive differences; the p-value
    is P[Binomial(n, 1/2) >= k].
    """
    diffs = [d for d in diffs if d != 0.0]
    n = len(diffs)
    if n == 0:
        return 1.0
    k = sum(1 for d in diffs if d > 0.0)
    return sum(math.comb(n, i) for i in range(k, n + 1)) / 2.0**n
