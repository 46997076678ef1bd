"""Scenes, ego-centric neighbor filtering and the embedded social grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .errors import SceneError
from .nn import MLP, Module


@dataclass(eq=False)
class AgentTrack:
    agent_id: int
    positions: np.ndarray  # [n_steps, 2] meters

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise SceneError(f"agent {self.agent_id}: positions must be [n, 2], got {list(self.positions.shape)}")

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return self.agent_id == other.agent_id and np.array_equal(self.positions, other.positions)


@dataclass
class Scene:
    """One multi-agent episode; only the ego's future is a prediction target."""

    scene_id: str
    agents: list[AgentTrack]
    ego_id: int
    t_obs: int
    t_pred: int
    dt: float = 0.4

    def __post_init__(self):
        if self.t_obs < 1 or self.t_pred < 1:
            raise SceneError(f"scene {self.scene_id}: t_obs and t_pred must be >= 1")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise SceneError(f"scene {self.scene_id}: duplicate agent ids")
        if self.ego_id not in ids:
            raise SceneError(f"scene {self.scene_id}: ego {self.ego_id} is not among the agents")
        for a in self.agents:
            n = len(a.positions)
            if n not in (self.t_obs, self.t_obs + self.t_pred):
                raise SceneError(
                    f"scene {self.scene_id}: agent {a.agent_id} has {n} positions, "
                    f"expected {self.t_obs} or {self.t_obs + self.t_pred}"
                )
            if not np.all(np.isfinite(a.positions[: self.t_obs])):
                raise SceneError(f"scene {self.scene_id}: agent {a.agent_id} has non-finite observations")

    @property
    def ego(self) -> AgentTrack:
        return next(a for a in self.agents if a.agent_id == self.ego_id)

    @property
    def has_future(self) -> bool:
        return len(self.ego.positions) == self.t_obs + self.t_pred

    def ego_future(self) -> np.ndarray:
        if not self.has_future:
            raise SceneError(f"scene {self.scene_id}: no ground-truth future for the ego")
        return self.ego.positions[self.t_obs:]


@dataclass
class SocialGrid:
    S: np.ndarray  # [D_agents, T, 2], futures zeroed
    agent_ids: list[int]  # ego first, then neighbors nearest first
    t_obs: int
    t_pred: int
    radius_m: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))  # ego position at the last observed step
    ego_index: int = 0

    @property
    def n_agents(self) -> int:
        return self.S.shape[0]

    @property
    def T(self) -> int:
        return self.S.shape[1]


def filter_and_sort(scene: Scene, radius_m: float = 10.0) -> SocialGrid:
    """Keep the ego plus neighbors within ``radius_m`` at the last observed step, nearest first.

    Ties in distance are broken by ascending agent id.
    """
    if not radius_m > 0:
        raise ValueError(f"radius_m must be positive, got {radius_m}")
    by_id = {a.agent_id: a for a in scene.agents}
    if scene.ego_id not in by_id:
        raise SceneError(f"scene {scene.scene_id}: missing ego {scene.ego_id}")
    last = scene.t_obs - 1
    origin = by_id[scene.ego_id].positions[last].copy()
    near = []
    for a in scene.agents:
        if a.agent_id == scene.ego_id:
            continue
        dist = float(np.hypot(*(a.positions[last] - origin)))
        if dist <= radius_m:
            near.append((dist, a.agent_id))
    near.sort()
    order = [scene.ego_id] + [aid for _, aid in near]
    T = scene.t_obs + scene.t_pred
    S = np.zeros((len(order), T, 2))
    for i, aid in enumerate(order):
        S[i, : scene.t_obs] = by_id[aid].positions[: scene.t_obs]
    return SocialGrid(S, order, scene.t_obs, scene.t_pred, float(radius_m), origin)


def egocentric_coords(grid: SocialGrid) -> np.ndarray:
    """Observed coordinates relative to the ego's last observed position; futures stay zero."""
    out = np.zeros_like(grid.S)
    out[:, : grid.t_obs] = grid.S[:, : grid.t_obs] - grid.origin
    return out


class GridEmbedding(Module):
    """Pointwise 2 -> d_model -> d_model MLP over every (agent, step) coordinate."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.mlp = MLP(2, d_model, d_model, rng)

    def __call__(self, coords) -> Tensor:
        return self.mlp(ad.as_tensor(coords))


def embed_grid(grid: SocialGrid, embedding: GridEmbedding) -> Tensor:
    """``[D_agents, T, d_model]`` initial social grid for one scene."""
    return embedding(constant(egocentric_coords(grid)))
