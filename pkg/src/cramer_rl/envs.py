"""Seedable analytic continuous-control environments.

Three desk-scale tasks: a torque-limited pendulum swing-up (dense costs, no
true terminals), a 2-D double-integrator point mass (sparse terminal on goal
capture), and a noisy-reward chain built to expose value overestimation.

Episode ends distinguish true termination from horizon truncation: a truncated
step is NOT terminal, so critics keep bootstrapping through it.  Out-of-bound
actions are clipped and counted on the instance (`clipped_actions`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class EpisodeFinishedError(RuntimeError):
    """step() was called after the episode already ended."""


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    action_bound: tuple  # per-dimension positive bounds
    horizon: int
    reward_range: tuple  # (r_min, r_max)

    def __post_init__(self):
        if self.obs_dim < 1 or self.action_dim < 1 or self.horizon < 1:
            raise ValueError("dims and horizon must be >= 1")
        if len(self.action_bound) != self.action_dim:
            raise ValueError("action_bound must have one entry per action dim")
        if any(b <= 0 for b in self.action_bound):
            raise ValueError("action bounds must be positive")
        if self.reward_range[0] > self.reward_range[1]:
            raise ValueError("reward_range must satisfy r_min <= r_max")


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


class _BaseEnv:
    spec: EnvSpec

    def __init__(self):
        self._t = 0
        self._done = True
        self.clipped_actions = 0

    def _clip_action(self, action):
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        bound = np.asarray(self.spec.action_bound)
        if np.any(np.abs(action) > bound):
            self.clipped_actions += 1
            action = np.clip(action, -bound, bound)
        return action

    def _start_step(self):
        if self._done:
            raise EpisodeFinishedError("reset() the environment before stepping")
        self._t += 1

    def _finish(self, obs, reward, terminal):
        truncated = (not terminal) and self._t >= self.spec.horizon
        self._done = terminal or truncated
        r_min, r_max = self.spec.reward_range
        if not (r_min - 1e-9 <= reward <= r_max + 1e-9):
            raise AssertionError(f"reward {reward} escaped reward_range {self.spec.reward_range}")
        return StepResult(obs, float(reward), terminal, truncated)


class PendulumEnv(_BaseEnv):
    """Torque-limited swing-up.  obs = (cos th, sin th, thdot), reward is the
    negative quadratic cost in angle, velocity and torque; never terminal."""

    def __init__(self, max_torque=2.0, dt=0.05, gravity=10.0, mass=1.0, length=1.0,
                 max_speed=8.0, horizon=200):
        super().__init__()
        self._max_torque = float(max_torque)
        self._dt = float(dt)
        self._g = float(gravity)
        self._m = float(mass)
        self._l = float(length)
        self._max_speed = float(max_speed)
        cost_max = math.pi**2 + 0.1 * max_speed**2 + 0.001 * max_torque**2
        self.spec = EnvSpec(
            obs_dim=3,
            action_dim=1,
            action_bound=(self._max_torque,),
            horizon=int(horizon),
            reward_range=(-cost_max, 0.0),
        )
        self._theta = 0.0
        self._thetadot = 0.0

    def _obs(self):
        return np.array([math.cos(self._theta), math.sin(self._theta), self._thetadot])

    def reset(self, rng: np.random.Generator):
        self._theta = rng.uniform(-math.pi, math.pi)
        self._thetadot = rng.uniform(-1.0, 1.0)
        self._t = 0
        self._done = False
        return self._obs()

    def step(self, action, rng: np.random.Generator):
        self._start_step()
        u = float(self._clip_action(action)[0])
        th, thdot = self._theta, self._thetadot
        angle = math.atan2(math.sin(th), math.cos(th))  # wrap to (-pi, pi]
        cost = angle * angle + 0.1 * thdot * thdot + 0.001 * u * u
        accel = 3.0 * self._g / (2.0 * self._l) * math.sin(th) + 3.0 / (
            self._m * self._l * self._l
        ) * u
        thdot = thdot + accel * self._dt
        thdot = min(max(thdot, -self._max_speed), self._max_speed)
        self._theta = th + thdot * self._dt
        self._thetadot = thdot
        return self._finish(self._obs(), -cost, terminal=False)

    def get_state(self):
        return (self._theta, self._thetadot, self._t, self._done)

    def set_state(self, state):
        self._theta, self._thetadot, self._t, self._done = state


class PointMassEnv(_BaseEnv):
    """2-D double integrator steering toward the origin; terminal on capture."""

    def __init__(self, dt=0.1, horizon=100, goal_radius=0.2, start_box=1.0,
                 pos_limit=4.0, vel_limit=2.0):
        super().__init__()
        self._dt = float(dt)
        self._goal_radius = float(goal_radius)
        self._start_box = float(start_box)
        self._pos_limit = float(pos_limit)
        self._vel_limit = float(vel_limit)
        dist_max = math.hypot(pos_limit, pos_limit)
        self.spec = EnvSpec(
            obs_dim=4,
            action_dim=2,
            action_bound=(1.0, 1.0),
            horizon=int(horizon),
            reward_range=(-dist_max - 0.02, 0.0),
        )
        self._pos = np.zeros(2)
        self._vel = np.zeros(2)

    def _obs(self):
        return np.concatenate([self._pos, self._vel])

    def reset(self, rng: np.random.Generator):
        self._pos = rng.uniform(-self._start_box, self._start_box, size=2)
        self._vel = np.zeros(2)
        self._t = 0
        self._done = False
        return self._obs()

    def step(self, action, rng: np.random.Generator):
        self._start_step()
        a = self._clip_action(action)
        self._vel = np.clip(self._vel + a * self._dt, -self._vel_limit, self._vel_limit)
        self._pos = np.clip(self._pos + self._vel * self._dt, -self._pos_limit, self._pos_limit)
        dist = float(np.linalg.norm(self._pos))
        reward = -dist - 0.01 * float(a @ a)
        terminal = dist < self._goal_radius
        return self._finish(self._obs(), reward, terminal)

    def get_state(self):
        return (self._pos.copy(), self._vel.copy(), self._t, self._done)

    def set_state(self, state):
        pos, vel, t, done = state
        self._pos = pos.copy()
        self._vel = vel.copy()
        self._t = t
        self._done = done


class NoisyChainEnv(_BaseEnv):
    """Fixed-length chain where one end of the action range is a noise trap.

    The action a in [-1, 1] mixes two reward arms: m(a) = (1 - a)/2 is the
    weight on the noisy arm, which has strictly lower true mean
    (`noisy_mean` < `safe_mean`) and zero-mean Gaussian noise of standard
    deviation `noise_std * m(a)` (clipped at 5 sigma, so the clip is symmetric
    and the mean is unchanged).  a = +1 is the deterministic safe arm.  The
    chain terminates after `length` steps.
    """

    def __init__(self, length=5, safe_mean=0.5, noisy_mean=0.0, noise_std=1.0):
        super().__init__()
        if noisy_mean >= safe_mean:
            raise ValueError("noisy arm must have strictly lower mean")
        self._length = int(length)
        self._safe_mean = float(safe_mean)
        self._noisy_mean = float(noisy_mean)
        self._noise_std = float(noise_std)
        slack = 5.0 * self._noise_std
        self.spec = EnvSpec(
            obs_dim=1,
            action_dim=1,
            action_bound=(1.0,),
            horizon=self._length,
            reward_range=(self._noisy_mean - slack, self._safe_mean + slack),
        )
        self._pos = 0

    def _obs(self):
        return np.array([self._pos / self._length])

    def arm_means(self):
        """(noisy_mean, safe_mean) per-step rewards at a = -1 and a = +1."""
        return self._noisy_mean, self._safe_mean

    def reset(self, rng: np.random.Generator):
        self._pos = 0
        self._t = 0
        self._done = False
        return self._obs()

    def step(self, action, rng: np.random.Generator):
        self._start_step()
        a = float(self._clip_action(action)[0])
        mix = (1.0 - a) / 2.0  # weight on the noisy arm
        mean = (1.0 - mix) * self._safe_mean + mix * self._noisy_mean
        scale = self._noise_std * mix
        noise = 0.0
        if scale > 0.0:
            noise = float(np.clip(rng.normal(0.0, scale), -5.0 * scale, 5.0 * scale))
        self._pos += 1
        terminal = self._pos >= self._length
        return self._finish(self._obs(), mean + noise, terminal)

    def get_state(self):
        return (self._pos, self._t, self._done)

    def set_state(self, state):
        self._pos, self._t, self._done = state


_ENV_FACTORIES = {
    "pendulum": PendulumEnv,
    "pointmass": PointMassEnv,
    "noisy_chain": NoisyChainEnv,
}


def make_env(name: str, params: dict | None = None):
    if name not in _ENV_FACTORIES:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(_ENV_FACTORIES)}")
    return _ENV_FACTORIES[name](**(params or {}))


def pendulum_env(**params):
    return PendulumEnv(**params)


def pointmass_env(**params):
    return PointMassEnv(**params)


def noisy_chain_env(**params):
    return NoisyChainEnv(**params)
