"""Temporal, egocentric and goal-centric interaction scans over the embedded social grid.

All three functions take ``z0`` shaped ``[S, D, T, d]`` (a batch of ``S`` scenes
that share the agent count ``D``; the ego is agent 0) or ``[D, T, d]`` for a
single scene, and return the same shape.  ``block`` is any shape-preserving
sequence block over ``[..., L, d]``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import Module, param

Block = Callable[[Tensor], Tensor]


class MergeWeights(Module):
    """Learnable scalars for merging the ego token: two self terms plus one per agent slot.

    Agent slots beyond ``max_agents - 1`` share the last slot's weight.
    """

    def __init__(self, max_agents: int = 16):
        if max_agents < 1:
            raise ValueError("max_agents must be >= 1")
        self.max_agents = max_agents
        init = 1.0 / (2 + max_agents)
        self.self_w = param(np.full(2, init))
        self.agent_w = param(np.full(max_agents, init))

    def vector(self, n_agents: int) -> Tensor:
        M = self.max_agents
        parts = [self.self_w, ad.slice_(self.agent_w, 0, 0, min(n_agents, M))]
        last = ad.slice_(self.agent_w, 0, M - 1, M)
        parts.extend([last] * max(0, n_agents - M))
        return ad.concat(parts, 0)


def _batched(z0) -> tuple[Tensor, bool]:
    z0 = ad.as_tensor(z0)
    if z0.ndim == 3:
        return ad.reshape(z0, (1,) + z0.shape), True
    if z0.ndim != 4:
        raise ShapeError("social_triplet", z0.shape, detail="expected [D, T, d] or [S, D, T, d]")
    return z0, False


def _unbatched(z: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(z, z.shape[1:]) if squeeze else z


def _scan_rows(z: Tensor, block: Block) -> Tensor:
    S, D, L, d = z.shape
    out = block(ad.reshape(z, (S * D, L, d)))
    return ad.reshape(out, (S, D, L, d))


def _at(x: Tensor, *index: tuple[int, int]) -> Tensor:
    for axis, i in sorted(index, reverse=True):
        x = ad.index_axis(x, axis, i)
    return x


def temporal_interaction(z0, block: Block) -> Tensor:
    """Each agent's time series through ``block`` independently."""
    z, squeeze = _batched(z0)
    return _unbatched(_scan_rows(z, block), squeeze)


def egocentric_interaction(z0, block: Block, merge: MergeWeights, t_obs: int) -> Tensor:
    """Insert the ego's last observed token after step ``t_obs`` of every row, scan, merge, drop the slot."""
    z, squeeze = _batched(z0)
    S, D, T, d = z.shape
    if not (1 <= t_obs < T):
        raise ShapeError("egocentric_interaction", z.shape, (t_obs,), detail="need 1 <= t_obs < T")
    token = ad.slice_(ad.slice_(z, 1, 0, 1), 2, t_obs - 1, t_obs)
    token = ad.expand(token, 1, D)
    aug = ad.concat([ad.slice_(z, 2, 0, t_obs), token, ad.slice_(z, 2, t_obs, T)], 2)
    out = _scan_rows(aug, block)  # [S, D, T+1, d]; inserted slot at index t_obs

    ego = ad.index_axis(out, 1, 0)
    terms = [ad.index_axis(ego, 1, t_obs - 1), ad.index_axis(ego, 1, t_obs + 1)]
    terms += [_at(out, (1, j), (2, t_obs)) for j in range(D)]
    merged = ad.weighted_sum(terms, merge.vector(D))
    ego_row = ad.concat(
        [ad.slice_(ego, 1, 0, t_obs - 1), ad.reshape(merged, (S, 1, d)), ad.slice_(ego, 1, t_obs + 1, T + 1)], 1
    )
    rows = [ad.reshape(ego_row, (S, 1, T, d))]
    if D > 1:
        rest = ad.slice_(out, 1, 1, D)
        rows.append(ad.concat([ad.slice_(rest, 2, 0, t_obs), ad.slice_(rest, 2, t_obs + 1, T + 1)], 2))
    return _unbatched(ad.concat(rows, 1), squeeze)


def goal_interaction(z0, block: Block, merge: MergeWeights) -> Tensor:
    """Append the ego's final (goal) token to every row, scan, merge into the ego's last step, drop the slot."""
    z, squeeze = _batched(z0)
    S, D, T, d = z.shape
    token = ad.expand(ad.slice_(ad.slice_(z, 1, 0, 1), 2, T - 1, T), 1, D)
    out = _scan_rows(ad.concat([z, token], 2), block)  # appended slot at index T

    ego = ad.index_axis(out, 1, 0)
    terms = [ad.index_axis(ego, 1, T - 1), ad.index_axis(ego, 1, T)]
    terms += [_at(out, (1, j), (2, T)) for j in range(D)]
    merged = ad.weighted_sum(terms, merge.vector(D))
    ego_row = ad.concat([ad.slice_(ego, 1, 0, T - 1), ad.reshape(merged, (S, 1, d))], 1)
    rows = [ad.reshape(ego_row, (S, 1, T, d))]
    if D > 1:
        rows.append(ad.slice_(ad.slice_(out, 1, 1, D), 2, 0, T))
    return _unbatched(ad.concat(rows, 1), squeeze)
