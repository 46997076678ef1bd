"""Cycle Mamba: one continuous scan over the reversed sequence followed by the sequence itself."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import Module
from .ssm import MambaBlock, MambaBlockConfig, MixerTrace


def build_cycle_sequence(s, axis: int = -2) -> Tensor:
    """``(s_1..s_L) -> (s_L..s_1, s_1..s_L)`` along the time axis."""
    s = ad.as_tensor(s)
    if s.ndim == 0 or s.shape[axis] == 0:
        raise ShapeError("build_cycle_sequence", s.shape, detail="empty sequence")
    return ad.concat([ad.reverse(s, axis), s], axis)


def reconstruct(o_cycle, axis: int = -2) -> Tensor:
    """Fold a ``2L`` cycle output back to ``L``: forward half plus the flipped backward half."""
    o_cycle = ad.as_tensor(o_cycle)
    n = o_cycle.shape[axis]
    if n % 2:
        raise ShapeError("reconstruct", o_cycle.shape, detail=f"cycle length {n} is odd")
    L = n // 2
    backward_half = ad.slice_(o_cycle, axis, 0, L)
    forward_half = ad.slice_(o_cycle, axis, L, n)
    return ad.add(forward_half, ad.reverse(backward_half, axis))


@dataclass
class CycleTrace:
    s_cycle: np.ndarray  # [..., 2L, d]
    o_cycle: np.ndarray  # [..., 2L, d], mixer output before the residual
    h_seq: np.ndarray  # [..., 2L, d_inner, d_state]
    merged: np.ndarray  # [..., L, d], reconstructed mixer output
    mixer: MixerTrace


class CycleMambaBlock(Module):
    """Bidirectional block with a single parameter set and no state reset at the seam."""

    def __init__(self, config: MambaBlockConfig, rng: np.random.Generator):
        self.config = config
        self.block = MambaBlock(config, rng)

    def forward(self, s: Tensor, keep_trace: bool = False):
        s = ad.as_tensor(s)
        s_cycle = build_cycle_sequence(s)
        o_cycle, mtrace = self.block.mixer(s_cycle, keep_trace=keep_trace)
        merged = reconstruct(o_cycle)
        out = ad.add(s, merged)
        trace = None
        if keep_trace:
            trace = CycleTrace(s_cycle.data, o_cycle.data, mtrace.h, merged.data, mtrace)
        return out, trace

    def __call__(self, s: Tensor) -> Tensor:
        return self.forward(s)[0]

    def ssm_param_count(self) -> int:
        return self.block.ssm_param_count()


def cycle_mamba_block(s, block: CycleMambaBlock) -> tuple[Tensor, CycleTrace]:
    return block.forward(s, keep_trace=True)
