"""Seeded social-force crowd generator for synthetic forecasting scenes.

Each agent relaxes toward a goal-directed desired velocity, is pushed away
from every other agent by an exponentially decaying repulsion and receives
Brownian velocity noise.  Agents start scattered in a square arena and head
for a point near the opposite side, so paths cross near the centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import AgentTrack, Scene


@dataclass
class SynthConfig:
    n_scenes: int = 2000
    min_agents: int = 3
    max_agents: int = 8
    t_obs: int = 8
    t_pred: int = 12
    dt: float = 0.4
    arena_size: float = 8.0  # half-width of the square arena, meters
    goal_gain: float = 0.5  # 1 / relaxation time, 1/s
    desired_speed: tuple[float, float] = (0.8, 1.6)  # m/s
    initial_speed: tuple[float, float] = (0.3, 2.0)  # m/s, along the goal direction
    repulsion_gain: float = 3.0  # m/s^2 at contact
    repulsion_range: float = 0.8  # decay length, meters
    noise_std: float = 0.05  # velocity noise, m/s per sqrt(s)
    max_speed: float = 2.5
    substeps: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.arena_size > 0:
            raise ValueError(f"arena_size must be > 0, got {self.arena_size}")
        if not 1 <= self.min_agents <= self.max_agents:
            raise ValueError("need 1 <= min_agents <= max_agents")
        if self.n_scenes < 0 or self.substeps < 1 or self.dt <= 0:
            raise ValueError("n_scenes >= 0, substeps >= 1 and dt > 0 are required")
        gains = (self.goal_gain, self.repulsion_gain, self.repulsion_range, self.noise_std, self.max_speed)
        if not all(math.isfinite(g) and g >= 0 for g in gains):
            raise ValueError("gains, range, noise and max_speed must be finite and non-negative")
        self.desired_speed = tuple(self.desired_speed)
        self.initial_speed = tuple(self.initial_speed)

    @property
    def n_frames(self) -> int:
        return self.t_obs + self.t_pred


def repulsion(pos: np.ndarray, gain: float, length: float) -> np.ndarray:
    """Sum over j != i of ``gain * exp(-d_ij / length)`` along the unit vector from j to i."""
    if gain == 0 or len(pos) < 2:
        return np.zeros_like(pos)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    mag = gain * np.exp(-dist / length) / np.maximum(dist, 1e-9)
    return np.einsum("ij,ijk->ik", mag, diff)


def simulate(start: np.ndarray, velocity: np.ndarray, goals: np.ndarray, desired_speed: np.ndarray,
             config: SynthConfig, rng: np.random.Generator, n_frames: int | None = None) -> np.ndarray:
    """Integrate the crowd; returns positions ``[n_agents, n_frames, 2]`` sampled every ``dt``.

    Frame 0 is the start position.  Semi-implicit Euler with ``config.substeps``
    substeps per frame.
    """
    n_frames = config.n_frames if n_frames is None else n_frames
    pos = np.array(start, dtype=np.float64)
    vel = np.array(velocity, dtype=np.float64)
    goals = np.asarray(goals, dtype=np.float64)
    v0 = np.asarray(desired_speed, dtype=np.float64)[:, None]
    h = config.dt / config.substeps
    out = np.empty((len(pos), n_frames, 2))
    out[:, 0] = pos
    for f in range(1, n_frames):
        for _ in range(config.substeps):
            to_goal = goals - pos
            dist = np.linalg.norm(to_goal, axis=1, keepdims=True)
            # slow down inside the last meter instead of orbiting the goal
            v_des = v0 * np.minimum(dist, 1.0) * to_goal / np.maximum(dist, 1e-9)
            acc = config.goal_gain * (v_des - vel) + repulsion(pos, config.repulsion_gain, config.repulsion_range)
            vel = vel + h * acc
            if config.noise_std > 0:
                vel = vel + config.noise_std * math.sqrt(h) * rng.standard_normal(vel.shape)
            speed = np.linalg.norm(vel, axis=1, keepdims=True)
            vel = np.where(speed > config.max_speed, vel * config.max_speed / np.maximum(speed, 1e-12), vel)
            pos = pos + h * vel
        out[:, f] = pos
    return out


def _scene(index: int, config: SynthConfig, rng: np.random.Generator) -> Scene:
    a = config.arena_size
    n = int(rng.integers(config.min_agents, config.max_agents + 1))
    start = rng.uniform(-a, a, size=(n, 2))
    goals = np.clip(-start + rng.uniform(-0.25 * a, 0.25 * a, size=(n, 2)), -a, a)
    heading = goals - start
    heading /= np.maximum(np.linalg.norm(heading, axis=1, keepdims=True), 1e-9)
    v0 = rng.uniform(*config.desired_speed, size=n)
    speed = rng.uniform(*config.initial_speed, size=(n, 1))
    traj = simulate(start, speed * heading, goals, v0, config, rng)
    agents = [AgentTrack(i, traj[i]) for i in range(n)]
    return Scene(f"synth-{index:06d}", agents, ego_id=0, t_obs=config.t_obs, t_pred=config.t_pred, dt=config.dt)


def generate_synthetic(config: SynthConfig) -> list[Scene]:
    """Scenes with full ground truth; scene ``i`` draws from its own child seed."""
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_scenes)
    return [_scene(i, config, np.random.default_rng(s)) for i, s in enumerate(seeds)]
