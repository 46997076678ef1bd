"""The assembled forecaster and its configuration (including the ablation switches)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .baselines import MhsaBlock, MhsaConfig, TwoPassBidirectionalBlock
from .cycle import CycleMambaBlock
from .errors import SceneError
from .fusion import GlobalAgentScan, Prediction, SocialGate, TrajectoryDecoder, add_fuse, fuse
from .grid import GridEmbedding, Scene, SocialGrid, egocentric_coords, filter_and_sort
from .nn import Module
from .ssm import MambaBlockConfig
from .triplet import MergeWeights, egocentric_interaction, goal_interaction, temporal_interaction

BLOCKS = ("cycle", "bidir", "mhsa")
FUSIONS = ("gate", "add")
DECODERS = ("mamba", "mlp")


@dataclass
class ModelConfig:
    d_model: int = 128
    d_state: int = 16
    conv_kernel: int = 4
    expand: int = 2
    k: int = 20
    t_obs: int = 8
    t_pred: int = 12
    radius_m: float = 10.0
    max_agents: int = 16
    n_heads: int = 4
    head_hidden: int | None = None
    use_ego: bool = True
    use_goal: bool = True
    block: str = "cycle"
    fusion: str = "gate"
    decoder: str = "mamba"
    seed: int = 0

    def __post_init__(self):
        if self.block not in BLOCKS:
            raise ValueError(f"block must be one of {BLOCKS}, got {self.block!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def mamba(self) -> MambaBlockConfig:
        return MambaBlockConfig(self.d_model, self.d_state, self.conv_kernel, self.expand)

    @property
    def streams(self) -> list[str]:
        return ["temporal"] + (["ego"] if self.use_ego else []) + (["goal"] if self.use_goal else [])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def make_interaction_block(kind: str, config: ModelConfig, rng: np.random.Generator) -> Module:
    if kind == "cycle":
        return CycleMambaBlock(config.mamba, rng)
    if kind == "bidir":
        return TwoPassBidirectionalBlock(config.mamba, rng)
    if kind == "mhsa":
        return MhsaBlock(MhsaConfig(config.d_model, config.n_heads), rng)
    raise ValueError(f"unknown block {kind!r}")


class SocialMamba(Module):
    """Embedding -> interaction streams -> fusion -> agent-axis scan -> K-head decoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        c = config
        self.embed = GridEmbedding(c.d_model, rng)
        self.temporal_block = make_interaction_block(c.block, c, rng)
        if c.use_ego:
            self.ego_block = make_interaction_block(c.block, c, rng)
            self.ego_merge = MergeWeights(c.max_agents)
        if c.use_goal:
            self.goal_block = make_interaction_block(c.block, c, rng)
            self.goal_merge = MergeWeights(c.max_agents)
        n = len(c.streams)
        if c.fusion == "gate" and n > 1:
            self.gate = SocialGate(c.d_model, n, rng)
        global_kind = "mhsa" if c.block == "mhsa" else "mamba"
        self.global_scan = GlobalAgentScan(c.d_model, rng, global_kind, c.mamba, c.n_heads)
        self.decoder = TrajectoryDecoder(c.d_model, c.t_obs, c.t_pred, c.k, rng, c.mamba, c.decoder, c.head_hidden)

    # -- preprocessing -----------------------------------------------------

    def grid(self, scene: Scene) -> SocialGrid:
        c = self.config
        if scene.t_obs != c.t_obs or scene.t_pred != c.t_pred:
            raise SceneError(
                f"scene {scene.scene_id}: horizon {scene.t_obs}/{scene.t_pred} does not match the model's "
                f"{c.t_obs}/{c.t_pred}"
            )
        return filter_and_sort(scene, c.radius_m)

    # -- forward -----------------------------------------------------------

    def streams(self, z0: Tensor) -> dict[str, Tensor]:
        c = self.config
        out = {"temporal": temporal_interaction(z0, self.temporal_block)}
        if c.use_ego:
            out["ego"] = egocentric_interaction(z0, self.ego_block, self.ego_merge, c.t_obs)
        if c.use_goal:
            out["goal"] = goal_interaction(z0, self.goal_block, self.goal_merge)
        return out

    def fused(self, z0: Tensor) -> Tensor:
        streams = list(self.streams(z0).values())
        if len(streams) == 1:
            return streams[0]
        if self.config.fusion == "add":
            return add_fuse(streams)
        return fuse(streams, self.gate(*streams))

    def forward_grids(self, grids: list[SocialGrid]) -> Tensor:
        """World-frame candidates ``[S, K, t_pred, 2]`` for grids that share one agent count."""
        D = grids[0].n_agents
        if any(g.n_agents != D for g in grids):
            raise ValueError("forward_grids needs grids with equal agent counts; group them first")
        coords = constant(np.stack([egocentric_coords(g) for g in grids]))
        z0 = self.embed(coords)  # [S, D, T, d]
        z_final = self.global_scan(self.fused(z0))
        ego = ad.index_axis(z_final, 1, 0)  # [S, T, d]
        offsets = self.decoder.offsets(ego)
        origin = np.stack([g.origin for g in grids])[:, None, None, :]
        return ad.add(offsets, constant(np.broadcast_to(origin, offsets.shape)))

    def predict(self, scene: Scene) -> Prediction:
        with ad.no_grad():
            y = self.forward_grids([self.grid(scene)])
        return Prediction(y.data[0])

    def predict_many(self, scenes: list[Scene]) -> list[Prediction]:
        grids = [self.grid(s) for s in scenes]
        out: list[Prediction | None] = [None] * len(scenes)
        with ad.no_grad():
            for idx in group_by_agent_count(grids):
                y = self.forward_grids([grids[i] for i in idx]).data
                for row, i in enumerate(idx):
                    out[i] = Prediction(y[row])
        return out

    def ssm_param_count(self, streams_only: bool = True) -> int:
        blocks = [self.temporal_block]
        if self.config.use_ego:
            blocks.append(self.ego_block)
        if self.config.use_goal:
            blocks.append(self.goal_block)
        total = sum(b.ssm_param_count() for b in blocks if hasattr(b, "ssm_param_count"))
        if not streams_only and self.global_scan.kind == "mamba":
            total += self.global_scan.block.ssm_param_count()
        return total


def group_by_agent_count(grids: list[SocialGrid]) -> list[list[int]]:
    """Indices grouped by agent count, groups ordered by count, members by position."""
    groups: dict[int, list[int]] = {}
    for i, g in enumerate(grids):
        groups.setdefault(g.n_agents, []).append(i)
    return [groups[k] for k in sorted(groups)]
