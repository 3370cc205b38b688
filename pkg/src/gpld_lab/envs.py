"""Synthetic control environments: a smooth pendulum and a bouncing ball.

Both integrate with semi-implicit Euler at ``dt = 0.05``: velocity is updated
first, then position with the new velocity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRAVITY = 9.81
DT = 0.05

DATASET_FORMAT = "gpld-lab-dataset"
DATASET_VERSION = 1


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2 * math.pi)
    if w <= 0:
        w += 2 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class PendulumParams:
    length: float = 1.0
    max_torque: float = 2.0
    friction: float = 0.05
    dt: float = DT


@dataclass(frozen=True)
class BallParams:
    max_thrust: float = 15.0
    restitution: float = 0.8
    dt: float = DT


def pendulum_step(state, action: float, params: PendulumParams = PendulumParams()):
    """One step of ``theta'' = -(g/l) sin(theta) + torque * tau_max - friction * omega``.

    Returns ``((theta, omega), reward)`` with ``reward = cos(theta')``.
    """
    theta, omega = state
    a = min(max(float(action), -1.0), 1.0)
    alpha = -(GRAVITY / params.length) * math.sin(theta) + a * params.max_torque - params.friction * omega
    omega = omega + params.dt * alpha
    theta = wrap_angle(theta + params.dt * omega)
    return (theta, omega), math.cos(theta)


def pendulum_energy(state, params: PendulumParams = PendulumParams()) -> float:
    theta, omega = state
    return 0.5 * omega * omega + (GRAVITY / params.length) * (1.0 - math.cos(theta))


def bouncing_ball_step(state, action: float, params: BallParams = BallParams()):
    """Vertical ball under gravity and thrust; ground impact reflects with restitution.

    ``state = (y, v, x_target)``. When the position update would cross ``y = 0``
    the position is mirrored and the velocity flipped, both scaled by the
    restitution coefficient. Reward is ``-|y' - x_target|``.
    """
    y, v, target = state
    a = min(max(float(action), -1.0), 1.0)
    v = v + params.dt * (-GRAVITY + a * params.max_thrust)
    y = y + params.dt * v
    if y < 0.0:
        y = -params.restitution * y
        v = -params.restitution * v
    return (y, v, target), -abs(y - target)


@dataclass
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int

    def reset(self, rng: np.random.Generator):
        if self.name == "pendulum":
            return (wrap_angle(math.pi + rng.uniform(-0.1, 0.1)), 0.0)
        return (rng.uniform(1.0, 3.0), 0.0, rng.uniform(0.5, 2.5))

    def step(self, state, action: float):
        if self.name == "pendulum":
            return pendulum_step(state, action)
        return bouncing_ball_step(state, action)

    def observe(self, state) -> np.ndarray:
        if self.name == "pendulum":
            theta, omega = state
            # (cos, sin) instead of the wrapped angle keeps the observation map smooth
            return np.array([math.cos(theta), math.sin(theta), omega])
        return np.array(state, dtype=np.float64)


ENVS = {
    "pendulum": EnvSpec("pendulum", obs_dim=3, act_dim=1),
    "bouncing_ball": EnvSpec("bouncing_ball", obs_dim=3, act_dim=1),
}


def make_env(name: str) -> EnvSpec:
    try:
        return ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


@dataclass
class PolicyParams:
    gain: float = 1.0
    # pendulum small-angle natural frequency sqrt(g/l) in rad/s, i.e. resonant pumping
    frequency: float = math.sqrt(GRAVITY)


def scripted_action(t: int, rng: np.random.Generator, policy: str, params: PolicyParams = PolicyParams()) -> float:
    if policy == "uniform-random":
        return float(rng.uniform(-1.0, 1.0))
    if policy == "scripted-sinusoid":
        return params.gain * math.sin(params.frequency * t * DT)
    raise ValueError(f"unknown policy {policy!r}")


@dataclass
class EpisodeData:
    """Episodes of equal length. Record ``t`` holds the observation before the
    action, the action taken, the reward received and the continuation flag
    (0 on the final record of each episode)."""

    env: str
    observations: np.ndarray  # (E, L, obs_dim)
    actions: np.ndarray  # (E, L, act_dim)
    rewards: np.ndarray  # (E, L)
    continuations: np.ndarray  # (E, L)

    @property
    def n_episodes(self) -> int:
        return self.observations.shape[0]

    @property
    def episode_len(self) -> int:
        return self.observations.shape[1]

    @property
    def n_transitions(self) -> int:
        return self.n_episodes * self.episode_len

    def subset(self, episodes) -> EpisodeData:
        idx = np.asarray(episodes)
        return EpisodeData(
            self.env, self.observations[idx], self.actions[idx], self.rewards[idx], self.continuations[idx]
        )


def collect_episodes(
    env: EnvSpec | str,
    policy: str,
    n_episodes: int,
    episode_len: int,
    rng: np.random.Generator,
    obs_noise: float = 0.0,
    mix_random: float = 0.0,
) -> EpisodeData:
    """Roll out ``n_episodes`` episodes of ``episode_len`` steps.

    ``mix_random`` adds uniform action noise of that amplitude on top of a
    scripted policy so data covers more of the state space.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    env = make_env(env) if isinstance(env, str) else env
    obs = np.zeros((n_episodes, episode_len, env.obs_dim))
    act = np.zeros((n_episodes, episode_len, env.act_dim))
    rew = np.zeros((n_episodes, episode_len))
    cont = np.ones((n_episodes, episode_len))
    for ep in range(n_episodes):
        state = env.reset(rng)
        phase = int(rng.integers(0, 64))
        for t in range(episode_len):
            a = scripted_action(t + phase, rng, policy)
            if mix_random:
                a = a + float(rng.uniform(-mix_random, mix_random))
            a = min(max(a, -1.0), 1.0)
            obs[ep, t] = env.observe(state)
            act[ep, t, 0] = a
            state, r = env.step(state, a)
            rew[ep, t] = r
        cont[ep, -1] = 0.0
    if obs_noise > 0:
        obs = obs + rng.normal(0.0, obs_noise, size=obs.shape)
    return EpisodeData(env.name, obs, act, rew, cont)


def save_dataset(data: EpisodeData, path: str | Path) -> None:
    """Newline-delimited JSON: a header record, then one record per transition."""
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "env": data.env,
        "n_episodes": data.n_episodes,
        "episode_len": data.episode_len,
        "obs_dim": data.observations.shape[2],
        "act_dim": data.actions.shape[2],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ep in range(data.n_episodes):
            for t in range(data.episode_len):
                rec = {
                    "episode": ep,
                    "t": t,
                    "obs": data.observations[ep, t].tolist(),
                    "action": data.actions[ep, t].tolist(),
                    "reward": float(data.rewards[ep, t]),
                    "continuation": int(data.continuations[ep, t]),
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> EpisodeData:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: not a {DATASET_FORMAT} v{DATASET_VERSION} file")
        E, L = header["n_episodes"], header["episode_len"]
        obs = np.zeros((E, L, header["obs_dim"]))
        act = np.zeros((E, L, header["act_dim"]))
        rew = np.zeros((E, L))
        cont = np.zeros((E, L))
        seen = 0
        for line in fh:
            rec = json.loads(line)
            ep, t = rec["episode"], rec["t"]
            obs[ep, t] = rec["obs"]
            act[ep, t] = rec["action"]
            rew[ep, t] = rec["reward"]
            cont[ep, t] = rec["continuation"]
            seen += 1
    if seen != E * L:
        raise ValueError(f"{path}: expected {E * L} records, found {seen}")
    return EpisodeData(header["env"], obs, act, rew, cont)


def numerical_jacobian(step_fn, x: np.ndarray, action: float, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``x -> step_fn(x, action)[0]`` (state part only)."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp = np.asarray(step_fn(tuple(xp), action)[0])
        fm = np.asarray(step_fn(tuple(xm), action)[0])
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)
