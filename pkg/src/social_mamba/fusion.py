"""Gated fusion of the interaction streams, the agent-axis scan and the K-head decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baselines import MhsaBlock, MhsaConfig, TwoPassBidirectionalBlock
from .errors import ShapeError
from .nn import MLP, Module, param
from .ssm import MambaBlock, MambaBlockConfig


@dataclass
class Prediction:
    y_hat: np.ndarray  # [K, t_pred, 2] meters

    def __post_init__(self):
        self.y_hat = np.asarray(self.y_hat, dtype=np.float64)
        if self.y_hat.ndim != 3 or self.y_hat.shape[0] < 1 or self.y_hat.shape[2] != 2:
            raise ShapeError("Prediction", self.y_hat.shape, detail="expected [K >= 1, t_pred, 2]")
        if not np.all(np.isfinite(self.y_hat)):
            raise ValueError("prediction contains non-finite values")

    @property
    def k(self) -> int:
        return self.y_hat.shape[0]


class SocialGate(Module):
    """Per-(agent, step) softmax weights over the interaction streams."""

    def __init__(self, d_model: int, n_streams: int, rng: np.random.Generator):
        self.n_streams = n_streams
        self.mlp = MLP(n_streams * d_model, d_model, n_streams, rng)

    def __call__(self, *streams: Tensor) -> Tensor:
        return social_gate(streams, self)


def social_gate(streams, gate: SocialGate) -> Tensor:
    ref = streams[0].shape
    for s in streams[1:]:
        if s.shape != ref:
            raise ShapeError("social_gate", ref, s.shape)
    if len(streams) != gate.n_streams:
        raise ShapeError("social_gate", (len(streams),), (gate.n_streams,), detail="stream count")
    return ad.softmax(gate.mlp(ad.concat(list(streams), -1)), axis=-1)


def fuse(streams, w) -> Tensor:
    """``sum_i w[..., i] * streams[i]``, each weight spread across the channel axis."""
    w = ad.as_tensor(w)
    d = streams[0].shape[-1]
    if w.shape != streams[0].shape[:-1] + (len(streams),):
        raise ShapeError("fuse", streams[0].shape, w.shape)
    out = None
    for i, z in enumerate(streams):
        if z.shape != streams[0].shape:
            raise ShapeError("fuse", streams[0].shape, z.shape)
        wi = ad.expand(ad.slice_(w, -1, i, i + 1), -1, d)
        term = ad.mul(wi, z)
        out = term if out is None else ad.add(out, term)
    return out


def add_fuse(streams) -> Tensor:
    out = streams[0]
    for z in streams[1:]:
        out = ad.add(out, z)
    return out


def ego_last_order(n_agents: int) -> list[int]:
    """Agent-axis scan order: neighbors nearest first, then the ego."""
    return list(range(1, n_agents)) + [0]


class GlobalAgentScan(Module):
    """A unidirectional scan across agents at every time step.

    ``z_fused`` is ``[S, D, T, d]``; the scan visits neighbors nearest first and
    the ego last so the ego's output summarizes the whole neighborhood.  The
    result is returned in the original agent order.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, kind: str = "mamba",
                 mamba_config: MambaBlockConfig | None = None, n_heads: int = 4):
        self.kind = kind
        if kind == "mamba":
            self.block = MambaBlock(mamba_config or MambaBlockConfig(d_model=d_model), rng)
        elif kind == "mhsa":
            self.block = MhsaBlock(MhsaConfig(d_model, n_heads), rng)
        else:
            raise ValueError(f"unknown global scan kind {kind!r}")

    def __call__(self, z_fused: Tensor) -> Tensor:
        S, D, T, d = z_fused.shape
        x = ad.transpose(z_fused, (0, 2, 1, 3))  # [S, T, D, d]
        if D > 1:
            x = ad.concat([ad.slice_(x, 2, 1, D), ad.slice_(x, 2, 0, 1)], 2)
        y = ad.reshape(self.block(ad.reshape(x, (S * T, D, d))), (S, T, D, d))
        if D > 1:
            y = ad.concat([ad.slice_(y, 2, D - 1, D), ad.slice_(y, 2, 0, D - 1)], 2)
        return ad.transpose(y, (0, 2, 1, 3))


def global_agent_scan(z_fused, scan: GlobalAgentScan) -> Tensor:
    z = ad.as_tensor(z_fused)
    if z.ndim == 3:
        return ad.reshape(scan(ad.reshape(z, (1,) + z.shape)), z.shape)
    return scan(z)


class PointwiseMLPBlock(Module):
    """Residual per-step MLP; stands in for the decoder's temporal block in ablations."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.mlp = MLP(d_model, d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.mlp(x))


class TrajectoryDecoder(Module):
    """Bidirectional temporal block, mean-pool over future steps, K independent MLP heads.

    Each head emits ``[t_pred, 2]`` offsets from the ego's last observed position.
    """

    def __init__(self, d_model: int, t_obs: int, t_pred: int, k: int, rng: np.random.Generator,
                 mamba_config: MambaBlockConfig | None = None, kind: str = "mamba", hidden: int | None = None):
        self.t_obs, self.t_pred, self.k = t_obs, t_pred, k
        self.kind = kind
        if kind == "mamba":
            self.temporal = TwoPassBidirectionalBlock(mamba_config or MambaBlockConfig(d_model=d_model), rng)
        elif kind == "mlp":
            self.temporal = PointwiseMLPBlock(d_model, rng)
        else:
            raise ValueError(f"unknown decoder kind {kind!r}")
        H = hidden or d_model
        s1, s2 = 1.0 / math.sqrt(d_model), 1.0 / math.sqrt(H)
        self.head_w1 = param(rng.uniform(-s1, s1, size=(k, d_model, H)))
        self.head_b1 = param(np.zeros((k, 1, H)))
        self.head_w2 = param(rng.uniform(-s2, s2, size=(k, H, 2 * t_pred)))
        self.head_b2 = param(np.zeros((k, 1, 2 * t_pred)))

    def offsets(self, z_final_e: Tensor) -> Tensor:
        """``[S, T, d]`` ego representation -> ``[S, K, t_pred, 2]`` ego-frame offsets."""
        S, T, d = z_final_e.shape
        h = self.temporal(z_final_e)
        ctx = ad.mean(ad.slice_(h, 1, self.t_obs, T), axis=1)  # [S, d]
        ctx = ad.expand(ad.reshape(ctx, (S, 1, 1, d)), 1, self.k)
        hid = ad.silu(ad.add(ad.matmul(ctx, self.head_w1), self.head_b1))
        out = ad.add(ad.matmul(hid, self.head_w2), self.head_b2)  # [S, K, 1, 2P]
        return ad.reshape(out, (S, self.k, self.t_pred, 2))

    def zero_heads(self):
        for p in (self.head_w1, self.head_b1, self.head_w2, self.head_b2):
            p.data[...] = 0.0


def decode(z_final_e, decoder: TrajectoryDecoder, last_position) -> Prediction:
    """Single-scene decode: ``[T, d]`` -> Prediction anchored at ``last_position``."""
    z = ad.as_tensor(z_final_e)
    off = decoder.offsets(ad.reshape(z, (1,) + z.shape)).data[0]
    return Prediction(off + np.asarray(last_position, dtype=np.float64))
