"""Comparison blocks: multi-head self-attention, two-pass bidirectional Mamba, constant velocity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SceneError
from .grid import Scene
from .nn import Linear, Module
from .ssm import MambaBlock, MambaBlockConfig


@dataclass
class MhsaConfig:
    d_model: int = 128
    n_heads: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class MhsaBlock(Module):
    """Scaled dot-product multi-head self-attention with a residual connection."""

    def __init__(self, config: MhsaConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng, bias=False)

    def _heads(self, x: Tensor) -> Tensor:
        # [..., L, d] -> [..., H, L, hd]
        lead, L = x.shape[:-2], x.shape[-2]
        H, hd = self.config.n_heads, self.config.head_dim
        x = ad.reshape(x, lead + (L, H, hd))
        n = len(lead)
        return ad.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def attend(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns ``(output, attention_weights)``; weights are ``[..., H, L, L]``."""
        x = ad.as_tensor(x)
        lead, L, d = x.shape[:-2], x.shape[-2], x.shape[-1]
        q, k, v = (self._heads(w(x)) for w in (self.wq, self.wk, self.wv))
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.config.head_dim))
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(weights, v)
        n = len(lead)
        ctx = ad.transpose(ctx, tuple(range(n)) + (n + 1, n, n + 2))
        ctx = ad.reshape(ctx, lead + (L, d))
        return ad.add(x, self.wo(ctx)), weights

    def __call__(self, x: Tensor) -> Tensor:
        return self.attend(x)[0]


def mhsa_block(seq, block: MhsaBlock) -> Tensor:
    return block(seq)


class TwoPassBidirectionalBlock(Module):
    """Separate forward and backward Mamba mixers, each from a zero state, summed at the output."""

    def __init__(self, config: MambaBlockConfig, rng: np.random.Generator):
        self.config = config
        self.fwd = MambaBlock(config, rng)
        self.bwd = MambaBlock(config, rng)

    def forward(self, s: Tensor, keep_trace: bool = False):
        s = ad.as_tensor(s)
        of, tf = self.fwd.mixer(s, keep_trace=keep_trace)
        ob, tb = self.bwd.mixer(ad.reverse(s, -2), keep_trace=keep_trace)
        out = ad.add(s, ad.add(of, ad.reverse(ob, -2)))
        return out, ((tf, tb) if keep_trace else None)

    def __call__(self, s: Tensor) -> Tensor:
        return self.forward(s)[0]

    def ssm_param_count(self) -> int:
        return self.fwd.ssm_param_count() + self.bwd.ssm_param_count()


def two_pass_bidirectional_block(seq, block: TwoPassBidirectionalBlock) -> Tensor:
    return block(seq)


def constant_velocity_predict(scene: Scene, t_pred: int | None = None):
    """Extrapolate the ego's last observed displacement per step (K = 1)."""
    from .fusion import Prediction

    if scene.t_obs < 2:
        raise SceneError(f"scene {scene.scene_id}: constant velocity needs t_obs >= 2, got {scene.t_obs}")
    t_pred = scene.t_pred if t_pred is None else t_pred
    obs = scene.ego.positions[: scene.t_obs]
    step = obs[-1] - obs[-2]
    future = obs[-1] + step * np.arange(1, t_pred + 1)[:, None]
    return Prediction(future[None])


# ---------------------------------------------------------------------------
# analytic FLOP counts as polynomials in the sequence length L


def mhsa_flops(d_model: int, n_heads: int) -> dict[int, float]:
    """Multiply-add FLOPs of one attention block, as ``{power of L: coefficient}``."""
    d = d_model
    return {
        1: 4 * 2 * d * d + d,  # q, k, v, o projections and residual
        2: 2 * d + 2 * d + 4 * n_heads,  # scores, weighted values, softmax
    }


def scan_block_flops(d_model: int, d_state: int, conv_kernel: int = 4, expand: int = 2) -> dict[int, float]:
    """FLOPs of one Mamba block; every term is linear in L."""
    d, E, N, K = d_model, expand * d_model, d_state, conv_kernel
    per_step = (
        2 * d * 2 * E  # input projection
        + 2 * E * K + E  # depthwise convolution
        + 4 * E  # SiLU on the scan input
        + 2 * E * (E + 2 * N) + 4 * E  # selective projections and softplus
        + 7 * E * N  # discretization and recurrence
        + 2 * E * N + 2 * E  # readout and skip
        + 5 * E  # gate
        + 2 * E * d + d  # output projection and residual
    )
    return {1: per_step}


def evaluate_flops(poly: dict[int, float], L: int) -> float:
    return float(sum(c * L**p for p, c in poly.items()))


def leading_power(poly: dict[int, float]) -> int:
    return max(p for p, c in poly.items() if c)
