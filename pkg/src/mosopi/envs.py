"""Desk-scale environments: Garnet-style random MDPs, a chain walk,
cart-pole balancing (discrete actions), and a torque-limited pendulum
swing-up (continuous actions).

Common environment protocol:

    env.spec                        static EnvSpec
    env.reset(rng) -> obs           rng is an int seed or a Generator
    env.step(action) -> (obs, reward, done, truncated)
    env.clone() -> fresh instance with the same construction parameters

done marks physical termination (bootstrapping must stop); truncated marks
a time limit only (bootstrapping continues through it).  Stepping a
finished episode raises RuntimeError.  All dynamics are deterministic
given the reset draw and the action sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment's interface.

    Discrete action spaces have n_actions > 0 and action_dim == 0;
    continuous ones have action_dim > 0 with box bounds.
    """

    state_dim: int
    n_actions: int = 0
    action_dim: int = 0
    action_low: tuple = ()
    action_high: tuple = ()
    max_episode_steps: int = 0
    reward_range: tuple = (-np.inf, np.inf)

    def __post_init__(self):
        if (self.n_actions > 0) == (self.action_dim > 0):
            raise ValueError("exactly one of n_actions/action_dim must be positive")
        if self.action_dim > 0 and (
            len(self.action_low) != self.action_dim
            or len(self.action_high) != self.action_dim
        ):
            raise ValueError("continuous spaces need bounds of length action_dim")

    @property
    def discrete(self) -> bool:
        return self.n_actions > 0


@dataclass(frozen=True)
class RandomMdpParams:
    n_states: int = 10
    n_actions: int = 2
    branching: int = 3
    reward_distribution: str = "uniform"
    gamma: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.branching <= self.n_states:
            raise ValueError(
                f"branching must lie in [1, {self.n_states}], got {self.branching}"
            )
        if self.reward_distribution != "uniform":
            raise ValueError(f"unknown reward distribution {self.reward_distribution!r}")


def generate_random_mdp(params: RandomMdpParams) -> TabularMdp:
    """Garnet-style random MDP, deterministic in params.seed.

    Each (s, a) transitions to `branching` distinct uniformly-chosen
    successor states with flat-Dirichlet probabilities; rewards are
    i.i.d. uniform on [0, 1].
    """
    rng = np.random.default_rng(params.seed)
    n, a = params.n_states, params.n_actions
    transition = np.zeros((n, a, n))
    for s in range(n):
        for act in range(a):
            successors = rng.choice(n, size=params.branching, replace=False)
            if params.branching == 1:
                transition[s, act, successors[0]] = 1.0
            else:
                transition[s, act, successors] = rng.dirichlet(np.ones(params.branching))
    reward = rng.uniform(0.0, 1.0, size=(n, a))
    return TabularMdp.from_arrays(transition, reward, params.gamma)


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class _EpisodeMixin:
    """Step-count and liveness bookkeeping shared by all environments."""

    def _begin_episode(self):
        self._steps = 0
        self._alive = True

    def _require_alive(self):
        if not getattr(self, "_alive", False):
            raise RuntimeError("step called on a finished episode; call reset first")

    def _finish(self, done: bool) -> tuple:
        """Returns (done, truncated) after advancing the step counter."""
        self._steps += 1
        truncated = (not done) and self._steps >= self.spec.max_episode_steps
        if done or truncated:
            self._alive = False
        return done, truncated


class ChainEnv(_EpisodeMixin):
    """Deterministic walk over n positions with one-hot observations.

    Action 1 moves right, action 0 moves left (clamped at position 0);
    reaching the far end pays +1 and terminates.
    """

    def __init__(self, n: int = 8, max_episode_steps: int = 100):
        if n < 2:
            raise ValueError("chain needs at least two positions")
        self.n = n
        self.spec = EnvSpec(
            state_dim=n,
            n_actions=2,
            max_episode_steps=max_episode_steps,
            reward_range=(0.0, 1.0),
        )
        self._pos = 0
        self._alive = False

    def clone(self) -> "ChainEnv":
        return ChainEnv(self.n, self.spec.max_episode_steps)

    def _obs(self):
        obs = np.zeros(self.n)
        obs[self._pos] = 1.0
        return obs

    def reset(self, rng=0):
        del rng  # fixed start state
        self._pos = 0
        self._begin_episode()
        return self._obs()

    def step(self, action):
        self._require_alive()
        action = int(action)
        if action not in (0, 1):
            raise ValueError(f"chain actions are 0 or 1, got {action}")
        self._pos = max(0, self._pos - 1) if action == 0 else self._pos + 1
        reached_end = self._pos >= self.n - 1
        reward = 1.0 if reached_end else 0.0
        done, truncated = self._finish(reached_end)
        return self._obs(), reward, done, truncated


class CartPoleEnv(_EpisodeMixin):
    """Cart-pole balancing, explicit-Euler integration at tau = 0.02 s.

    Discrete actions push the cart with -10 N or +10 N; +1 reward per
    step; termination when |x| > 2.4 m or |angle| > 12 degrees; episodes
    cap at 500 steps.  State is [x, x_dot, theta, theta_dot].
    """

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    HALF_POLE_LENGTH = 0.5
    FORCE_MAG = 10.0
    TAU = 0.02
    X_LIMIT = 2.4
    THETA_LIMIT = 12.0 * math.pi / 180.0

    def __init__(self, max_episode_steps: int = 500):
        self.spec = EnvSpec(
            state_dim=4,
            n_actions=2,
            max_episode_steps=max_episode_steps,
            reward_range=(1.0, 1.0),
        )
        self.state = np.zeros(4)
        self._alive = False

    def clone(self) -> "CartPoleEnv":
        return CartPoleEnv(self.spec.max_episode_steps)

    def reset(self, rng=0):
        rng = _as_rng(rng)
        self.state = rng.uniform(-0.05, 0.05, size=4)
        self._begin_episode()
        return self.state.copy()

    def physics_step(self, state, force):
        """One Euler step of the cart-pole ODE under a horizontal force."""
        x, x_dot, theta, theta_dot = state
        total_mass = self.MASS_CART + self.MASS_POLE
        pole_ml = self.MASS_POLE * self.HALF_POLE_LENGTH
        sin, cos = math.sin(theta), math.cos(theta)
        temp = (force + pole_ml * theta_dot**2 * sin) / total_mass
        theta_acc = (self.GRAVITY * sin - cos * temp) / (
            self.HALF_POLE_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos**2 / total_mass)
        )
        x_acc = temp - pole_ml * theta_acc * cos / total_mass
        return np.array(
            [
                x + self.TAU * x_dot,
                x_dot + self.TAU * x_acc,
                theta + self.TAU * theta_dot,
                theta_dot + self.TAU * theta_acc,
            ]
        )

    def step(self, action):
        self._require_alive()
        action = int(action)
        if action not in (0, 1):
            raise ValueError(f"cart-pole actions are 0 or 1, got {action}")
        force = self.FORCE_MAG if action == 1 else -self.FORCE_MAG
        self.state = self.physics_step(self.state, force)
        fell = (
            abs(self.state[0]) > self.X_LIMIT or abs(self.state[2]) > self.THETA_LIMIT
        )
        done, truncated = self._finish(fell)
        return self.state.copy(), 1.0, done, truncated


def wrap_angle(theta: float) -> float:
    """Map an angle to [-pi, pi)."""
    return theta - 2.0 * math.pi * math.floor((theta + math.pi) / (2.0 * math.pi))


class PendulumEnv(_EpisodeMixin):
    """Torque-limited pendulum swing-up; never terminates, truncates at 200.

    Dynamics: theta_dd = (3 g / 2 l) sin(theta) + (3 / m l^2) u, stepped
    semi-implicitly at tau = 0.05 s with the velocity updated first;
    torque clipped to [-2, 2], angular velocity to [-8, 8].  Reward for a
    step is -(wrapped_theta^2 + 0.1 theta_dot^2 + 0.001 u^2) evaluated at
    the pre-step state, so the upright rest state under zero torque earns
    exactly 0.  Observations are [cos(theta), sin(theta), theta_dot].
    """

    GRAVITY = 10.0
    MASS = 1.0
    LENGTH = 1.0
    TAU = 0.05
    MAX_TORQUE = 2.0
    MAX_SPEED = 8.0

    def __init__(self, max_episode_steps: int = 200):
        self.spec = EnvSpec(
            state_dim=3,
            action_dim=1,
            action_low=(-self.MAX_TORQUE,),
            action_high=(self.MAX_TORQUE,),
            max_episode_steps=max_episode_steps,
            reward_range=(
                -(math.pi**2 + 0.1 * self.MAX_SPEED**2 + 0.001 * self.MAX_TORQUE**2),
                0.0,
            ),
        )
        self.state = np.zeros(2)  # [theta, theta_dot]
        self._alive = False

    def clone(self) -> "PendulumEnv":
        return PendulumEnv(self.spec.max_episode_steps)

    def _obs(self):
        theta, theta_dot = self.state
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def reset(self, rng=0):
        rng = _as_rng(rng)
        self.state = np.array(
            [rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)]
        )
        self._begin_episode()
        return self._obs()

    def energy(self) -> float:
        """Mechanical energy; conserved by the exact zero-torque flow."""
        theta, theta_dot = self.state
        inertia = self.MASS * self.LENGTH**2 / 3.0
        return 0.5 * inertia * theta_dot**2 + (
            self.MASS * self.GRAVITY * (self.LENGTH / 2.0) * math.cos(theta)
        )

    def step(self, action):
        self._require_alive()
        u = float(np.clip(np.asarray(action, dtype=np.float64).ravel()[0],
                          -self.MAX_TORQUE, self.MAX_TORQUE))
        theta, theta_dot = self.state
        cost = wrap_angle(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2
        acc = (3.0 * self.GRAVITY / (2.0 * self.LENGTH)) * math.sin(theta) + (
            3.0 / (self.MASS * self.LENGTH**2)
        ) * u
        theta_dot = float(np.clip(theta_dot + self.TAU * acc,
                                  -self.MAX_SPEED, self.MAX_SPEED))
        theta = theta + self.TAU * theta_dot
        self.state = np.array([theta, theta_dot])
        done, truncated = self._finish(False)
        return self._obs(), -cost, done, truncated


ENV_BUILDERS = {
    "chain": ChainEnv,
    "cartpole": CartPoleEnv,
    "pendulum": PendulumEnv,
}


def make_env(name: str, **kwargs):
    if name not in ENV_BUILDERS:
        raise ValueError(f"unknown environment {name!r}; have {sorted(ENV_BUILDERS)}")
    return ENV_BUILDERS[name](**kwargs)
