"""Best-of-K objective, displacement metrics, Adam with a step schedule, and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .errors import NonFiniteError, TrainingDiverged
from .grid import Scene
from .model import ModelConfig, SocialMamba, group_by_agent_count

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "social-mamba-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# objective and metrics


def best_of_k_losses(y_hat, y) -> Tensor:
    """Per-scene ``min_k mean_t ||y_hat[k, t] - y[t]||^2`` for ``y_hat [S, K, P, 2]``, ``y [S, P, 2]``."""
    y_hat = ad.as_tensor(y_hat)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    S, K, P, _ = y_hat.shape
    target = constant(np.broadcast_to(y[:, None], y_hat.shape))
    diff = ad.sub(y_hat, target)
    per_k = ad.mean(ad.sum_(ad.mul(diff, diff), axis=-1), axis=-1)  # [S, K]
    return ad.min_(per_k, axis=-1)


def best_of_k_loss(y_hat, y) -> Tensor:
    """Scalar best-of-K squared-error loss; accepts one scene ``[K, P, 2]`` or a batch."""
    y_hat = ad.as_tensor(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.ndim == 3:
        y_hat = ad.reshape(y_hat, (1,) + y_hat.shape)
        y = y[None]
    return ad.mean(best_of_k_losses(y_hat, y))


class Metrics(NamedTuple):
    min_ade: float
    min_fde: float


def candidate_errors(y_hat: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-candidate ADE and FDE (Euclidean, not squared) for one scene."""
    dist = np.linalg.norm(np.asarray(y_hat) - np.asarray(y)[None], axis=-1)  # [K, P]
    return dist.mean(axis=1), dist[:, -1]


def evaluate_metrics(y_hat, y) -> Metrics:
    """minADE_K and minFDE_K; the two minimizing candidates may differ."""
    ade, fde = candidate_errors(y_hat, y)
    return Metrics(float(ade.min()), float(fde.min()))


@dataclass
class EvalReport:
    min_ade: float
    min_fde: float
    per_scene_ade: np.ndarray
    per_scene_fde: np.ndarray
    k: int
    scene_ids: list[str] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return (
            self.min_ade == other.min_ade
            and self.min_fde == other.min_fde
            and np.array_equal(self.per_scene_ade, other.per_scene_ade)
            and np.array_equal(self.per_scene_fde, other.per_scene_fde)
            and self.k == other.k
            and self.scene_ids == other.scene_ids
        )


def report_from_predictions(preds, scenes: list[Scene]) -> EvalReport:
    ade = np.empty(len(scenes))
    fde = np.empty(len(scenes))
    for i, (p, s) in enumerate(zip(preds, scenes)):
        ade[i], fde[i] = evaluate_metrics(p.y_hat, s.ego_future())
    k = preds[0].k if preds else 0
    return EvalReport(float(ade.mean()), float(fde.mean()), ade, fde, k, [s.scene_id for s in scenes])


def evaluate(model: SocialMamba, scenes: list[Scene]) -> EvalReport:
    return report_from_predictions(model.predict_many(scenes), scenes)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    lr_step_every: int = 30
    lr_gamma: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0.0 < self.lr_gamma <= 1.0):
            raise ValueError("lr_gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.lr_step_every < 1:
            raise ValueError("batch_size and lr_step_every must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** (epoch // self.lr_step_every)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig, lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    lr = config.lr if lr is None else lr
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {list(g.shape)} != parameter shape {list(p.shape)}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: SocialMamba, extra: dict | None = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "extra": extra or {},
        "params": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in model.named_parameters()
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> SocialMamba:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = SocialMamba(ModelConfig.from_dict(payload["model_config"]))
    state = {n: np.asarray(e["data"], dtype=np.float64).reshape(e["shape"]) for n, e in payload["params"].items()}
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_min_ade: float
    val_min_fde: float


@dataclass
class FitResult:
    model: SocialMamba
    history: list[EpochRecord]
    steps: int = 0


def split_train_val(scenes: list[Scene], fraction: float, seed: int) -> tuple[list[Scene], list[Scene]]:
    """Seeded hold-out split; at least one scene stays in training."""
    n = len(scenes)
    n_val = min(int(round(n * fraction)), n - 1) if fraction > 0 else 0
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val


def _clip(grads: dict[str, np.ndarray], max_norm: float):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale


def batch_loss(model: SocialMamba, grids, futures: np.ndarray) -> Tensor:
    """Mean best-of-K loss of a mini-batch, summed group by group (groups share an agent count)."""
    total = None
    for idx in group_by_agent_count(grids):
        y_hat = model.forward_grids([grids[i] for i in idx])
        part = ad.sum_(best_of_k_losses(y_hat, futures[idx]))
        total = part if total is None else ad.add(total, part)
    return ad.mul(total, 1.0 / len(grids))


def fit(model: SocialMamba, scenes: list[Scene], config: TrainConfig, val_scenes: list[Scene] | None = None,
        checkpoint_path: str | None = None, on_epoch: Callable[[EpochRecord], None] | None = None,
        max_steps: int | None = None) -> FitResult:
    """Train with seeded shuffling, Adam, and ``lr * gamma ** (epoch // step_every)``."""
    if not scenes:
        raise ValueError("fit needs a non-empty dataset")
    if val_scenes is None:
        train, val = split_train_val(scenes, config.val_fraction, config.seed)
    else:
        train, val = scenes, val_scenes
    grids = [model.grid(s) for s in train]
    futures = np.stack([s.ego_future() for s in train])
    params = dict(model.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    history: list[EpochRecord] = []
    last_good = None
    steps = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            loss = batch_loss(model, [grids[i] for i in idx], futures[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}", last_good)
            ad.backward(loss)
            grads = {n: p.grad for n, p in params.items()}
            if config.grad_clip:
                _clip(grads, config.grad_clip)
            adam_step(params, grads, state, config, lr)
            losses.append((value, len(idx)))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        train_loss = sum(v * n for v, n in losses) / sum(n for _, n in losses)
        if val:
            rep = evaluate(model, val)
            record = EpochRecord(epoch, train_loss, rep.min_ade, rep.min_fde)
        else:
            record = EpochRecord(epoch, train_loss, float("nan"), float("nan"))
        history.append(record)
        log.info("epoch %d lr %.2e loss %.5f val ade %.4f fde %.4f", epoch, lr, train_loss,
                 record.val_min_ade, record.val_min_fde)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, {"epoch": epoch})
            last_good = checkpoint_path
        else:
            last_good = f"epoch {epoch} (in memory)"
        if on_epoch:
            on_epoch(record)
        if max_steps is not None and steps >= max_steps:
            break
    return FitResult(model, history, steps)


def write_loss_csv(path: str, history: list[EpochRecord]):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_min_ade,val_min_fde\n")
        for r in history:
            fh.write(f"{r.epoch},{float(r.train_loss)!r},{float(r.val_min_ade)!r},{float(r.val_min_fde)!r}\n")


def write_eval_csv(path: str, report: EvalReport):
    with open(path, "w") as fh:
        fh.write("scene_id,min_ade,min_fde\n")
        for sid, a, f in zip(report.scene_ids, report.per_scene_ade, report.per_scene_fde):
            fh.write(f"{sid},{float(a)!r},{float(f)!r}\n")
        fh.write(f"__mean__,{float(report.min_ade)!r},{float(report.min_fde)!r}\n")
