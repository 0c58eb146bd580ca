"""Dependency-free continuous-control tasks used in place of a physics suite.

Each environment is stateless: ``reset(rng)`` draws an initial state and
``step(state, action, t)`` is a pure function of its arguments. ``t`` is the
index of the step being taken and only matters for the time limit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import Rng
from .policy import ActionBox


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    box: ActionBox
    max_steps: int
    dt: float

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1 or self.max_steps < 1:
            raise ValueError("dimensions and step limit must be >= 1")
        if self.box.dim != self.action_dim:
            raise ValueError("action box dimension mismatch")


@dataclass(frozen=True)
class StepResult:
    state: np.ndarray
    reward: float
    terminated: bool
    truncated: bool


class Env:
    spec: EnvSpec

    def reset(self, rng: Rng) -> np.ndarray:
        raise NotImplementedError

    def _dynamics(self, state, action) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    def step(self, state, action, t: int = 0) -> StepResult:
        state = np.asarray(state, dtype=np.float64)
        action = np.atleast_1d(np.asarray(action, dtype=np.float64))
        if state.shape != (self.spec.state_dim,) or action.shape != (self.spec.action_dim,):
            raise ValueError(f"{self.spec.name}: bad shapes state {state.shape}, action {action.shape}")
        if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
            raise ValueError(f"{self.spec.name}: non-finite state or action")
        if not self.spec.box.contains(action, closed=True):
            raise ValueError(f"{self.spec.name}: action {action} outside the box")
        nxt, reward, terminated = self._dynamics(state, action)
        truncated = (not terminated) and t + 1 >= self.spec.max_steps
        return StepResult(nxt, float(reward), bool(terminated), bool(truncated))


class PointMass(Env):
    """2-D double integrator that must reach a fixed goal. State ``(x, y, vx, vy)``."""

    goal = np.array([0.8, 0.8])
    tolerance = 0.05

    def __init__(self):
        self.spec = EnvSpec("pointmass", 4, 2, ActionBox(-np.ones(2), np.ones(2)), 200, 0.05)

    def reset(self, rng: Rng) -> np.ndarray:
        return np.concatenate([rng.uniform(-1.0, 1.0, 2), np.zeros(2)])

    def _dynamics(self, state, action):
        dt = self.spec.dt
        vel = state[2:] + action * dt
        pos = state[:2] + vel * dt
        dist = float(np.linalg.norm(pos - self.goal))
        reward = -dist - 0.1 * float(action @ action)
        return np.concatenate([pos, vel]), reward, dist < self.tolerance


def wrap_angle(theta: float) -> float:
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


class Pendulum(Env):
    """Torque-limited swing-up; angle 0 is upright. State ``(cos th, sin th, th_dot)``."""

    g = 10.0
    m = 1.0
    length = 1.0
    max_speed = 8.0

    def __init__(self):
        self.spec = EnvSpec("pendulum", 3, 1, ActionBox(np.array([-2.0]), np.array([2.0])), 200, 0.05)

    @staticmethod
    def from_angle(theta: float, theta_dot: float) -> np.ndarray:
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def reset(self, rng: Rng) -> np.ndarray:
        theta = float(rng.uniform(-math.pi, math.pi))
        theta_dot = float(rng.uniform(-1.0, 1.0))
        return self.from_angle(theta, theta_dot)

    def energy(self, state) -> float:
        ml2 = self.m * self.length ** 2
        return 0.5 * ml2 * state[2] ** 2 + self.m * self.g * self.length * state[0]

    def _dynamics(self, state, action):
        theta = math.atan2(state[1], state[0])
        theta_dot = float(state[2])
        u = float(action[0])
        reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot ** 2 + 0.001 * u ** 2)
        acc = -(self.g / self.length) * math.sin(theta + math.pi) + u / (self.m * self.length ** 2)
        # semi-implicit Euler: velocity first, then position with the new velocity
        theta_dot = min(max(theta_dot + acc * self.spec.dt, -self.max_speed), self.max_speed)
        theta = theta + theta_dot * self.spec.dt
        return self.from_angle(theta, theta_dot), reward, False


class Lqr1d(Env):
    """Scalar linear system ``x' = 0.95 x + 0.1 a`` with quadratic cost."""

    def __init__(self):
        self.spec = EnvSpec("lqr1d", 1, 1, ActionBox(np.array([-1.0]), np.array([1.0])), 100, 1.0)

    def reset(self, rng: Rng) -> np.ndarray:
        return np.array([float(rng.uniform(-1.0, 1.0))])

    def _dynamics(self, state, action):
        x = float(state[0])
        a = float(action[0])
        reward = -(x * x + 0.01 * a * a)
        return np.array([0.95 * x + 0.1 * a]), reward, False


ENVS = {"pointmass": PointMass, "pendulum": Pendulum, "lqr1d": Lqr1d}


def make_env(name: str) -> Env:
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
