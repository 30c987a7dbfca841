"""Two-stage training: SGD with momentum, warmup, and step decay.

Stage 1 learns the prompt vocabulary (identity tokens, padding, the
count matrix, and the temperature) under the contrastive alignment
objective, with member dropout active.  Stage 2 freezes all of that,
computes one text feature per group class, and trains only the
refinement head and classifier.

Both stages share one schedule: linear warmup from ``lr_start`` to
``lr_peak``, then piecewise-constant decay.  ``scale_factor`` compresses
every epoch landmark proportionally so short runs keep the schedule's
shape.  A run is a pure function of (samples, config, seed): batch
order, dropout draws, and updates are all driven by one seeded stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from . import gla
from . import losses as losses_mod
from .diffcore import Tensor
from .encoders import STAGE1_TRAINABLE, STAGE2_TRAINABLE, ModelState
from .mvs import MvsConfig, full_mask, sample_drop_prob, sample_mask
from .synthdata import GroupSample

_STAGE1_STREAM = 20
_STAGE2_STREAM = 21


class FreezeViolation(RuntimeError):
    """A gradient landed outside the active stage's trainable set."""


@dataclass(frozen=True)
class TrainConfig:
    warmup_epochs: int = 10
    lr_start: float = 5e-7
    lr_peak: float = 5e-6
    decay_epochs: tuple[int, ...] = (30, 50)
    decay_factor: float = 0.1
    total_epochs: int = 80
    batch_size: int = 8
    p_groups: int = 4   # group identities per stage-2 batch
    q_views: int = 2    # views per identity
    momentum: float = 0.8
    weight_decay: float = 1e-4
    seed: int = 0
    stage: int = 1
    scale_factor: float = 1.0

    def validate(self) -> None:
        if not (0.0 < self.lr_start < self.lr_peak):
            raise ValueError("need 0 < lr_start < lr_peak")
        if self.warmup_epochs < 0 or self.total_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay epochs must be strictly ascending")
        if self.decay_epochs and self.decay_epochs[-1] >= self.total_epochs:
            raise ValueError("decay epochs must precede total_epochs")
        if not (0.0 < self.decay_factor < 1.0):
            raise ValueError("decay factor must lie in (0, 1)")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batches need at least two samples")
        if self.p_groups < 2 or self.q_views < 1:
            raise ValueError("need at least two groups and one view per batch")
        if self.p_groups * self.q_views != self.batch_size:
            raise ValueError("p_groups * q_views must equal batch_size")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")

    def scaled(self) -> "TrainConfig":
        """Materialize the desk-scale schedule (round half up, floor 1)."""
        if self.scale_factor == 1.0:
            return self

        def s(e: int) -> int:
            return max(1, math.floor(e * self.scale_factor + 0.5))

        out = replace(
            self,
            warmup_epochs=s(self.warmup_epochs),
            decay_epochs=tuple(s(e) for e in self.decay_epochs),
            total_epochs=s(self.total_epochs),
            scale_factor=1.0,
        )
        out.validate()
        return out


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Warmup then step decay; landmarks are read from ``cfg`` as-is."""
    if not (0 <= epoch < cfg.total_epochs):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac
    drops = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr_peak * cfg.decay_factor**drops


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    lr: float = 0.0


def init_optimizer(state: ModelState) -> OptimizerState:
    vel = {name: np.zeros(p.shape) for name, p in state.params.items()}
    return OptimizerState(velocity=vel)


def sgd_step(
    state: ModelState,
    grads: Mapping[str, np.ndarray],
    opt: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> ModelState:
    """v <- momentum*v + g + wd*p; p <- p - lr*v.

    Only the parameters present in ``grads`` move.  The temperature is
    exempt from weight decay: decaying a scale parameter would drag the
    similarity scale toward zero regardless of the data.
    """
    updates: dict[str, Tensor] = {}
    for name in sorted(grads):
        p = state.params[name]
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        wd = 0.0 if name == "temp.inv" else cfg.weight_decay
        v = cfg.momentum * opt.velocity[name] + g + wd * p.values
        opt.velocity[name] = v
        updates[name] = Tensor(p.values - lr * v, requires_grad=p.requires_grad)
    return state.with_params(updates)


def _clear_grads(state: ModelState) -> None:
    for p in state.params.values():
        p.grad = None


def _collect_grads(state: ModelState, allowed: Sequence[str]) -> dict[str, np.ndarray]:
    touched = {n for n, p in state.params.items() if p.grad is not None}
    extra = touched - set(allowed)
    if extra:
        raise FreezeViolation(f"gradients outside the trainable set: {sorted(extra)}")
    return {n: state.params[n].grad for n in sorted(touched)}


def _epoch_record(epoch: int, stage: int, lr: float, sums: dict[str, float], n: int) -> dict:
    rec = {"epoch": epoch, "stage": stage, "lr": lr}
    rec.update({k: v / n for k, v in sorted(sums.items())})
    return rec


def _sample_masks(batch, mvs: MvsConfig | None, rng: np.random.Generator):
    if mvs is None:
        return [full_mask(len(s.members)) for s in batch]
    masks = []
    for s in batch:
        p = sample_drop_prob(mvs, rng)
        masks.append(sample_mask(len(s.members), p, rng))
    return masks


def train_stage1(
    state: ModelState,
    samples: Sequence[GroupSample],
    rosters: Mapping[int, tuple[int, ...]],
    cfg: TrainConfig,
    *,
    mvs: MvsConfig | None = None,
) -> tuple[ModelState, list[dict]]:
    """Prompt learning over shuffled batches; returns state and history."""
    cfg.validate()
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    if len(samples) < 2:
        raise ValueError("stage 1 needs at least two training samples")
    run = cfg.scaled()
    state.set_trainable(STAGE1_TRAINABLE)
    opt = init_optimizer(state)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_STAGE1_STREAM,)))
    history: list[dict] = []

    for epoch in range(run.total_epochs):
        lr = lr_at_epoch(run, epoch)
        order = rng.permutation(len(samples))
        sums: dict[str, float] = {}
        steps = 0
        for at in range(0, len(order), run.batch_size):
            idx = order[at : at + run.batch_size]
            if len(idx) < 2:
                continue
            batch = [samples[i] for i in idx]
            masks = _sample_masks(batch, mvs, rng)
            _clear_grads(state)
            with dc.Graph() as g:
                loss, parts = gla.stage1_batch_loss(
                    batch, masks, state, rosters, mvs_enabled=mvs is not None
                )
            g.backward(loss)
            grads = _collect_grads(state, STAGE1_TRAINABLE)
            state = sgd_step(state, grads, opt, lr, run)
            sums["loss_total"] = sums.get("loss_total", 0.0) + loss.item()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        if steps:
            history.append(_epoch_record(epoch, 1, lr, sums, steps))
        opt.epoch, opt.lr = epoch + 1, lr
    return state, history


def _group_views(samples: Sequence[GroupSample]) -> dict[int, list[int]]:
    views: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        views.setdefault(s.group_id, []).append(i)
    return views


def train_stage2(
    state: ModelState,
    samples: Sequence[GroupSample],
    rosters: Mapping[int, tuple[int, ...]],
    cfg: TrainConfig,
    *,
    mvs: MvsConfig | None = None,
    use_text: bool = True,
    alpha: float = 0.3,
    epsilon: float = 0.1,
) -> tuple[ModelState, list[dict]]:
    """Refinement-head training over identity-balanced (P x Q) batches.

    Text features are computed once from the incoming state and frozen
    for the whole stage; ``use_text=False`` trains on the identity and
    triplet terms alone.
    """
    cfg.validate()
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    run = cfg.scaled()
    views = _group_views(samples)
    gids = sorted(views)
    if len(gids) < 2:
        raise ValueError("stage 2 needs at least two group classes")
    if len(gids) > state.config.n_group_classes:
        raise ValueError(
            f"{len(gids)} training groups exceed the classifier ({state.config.n_group_classes} rows)"
        )
    class_index = {g: i for i, g in enumerate(gids)}

    text_rows = None
    if use_text:
        rows = gla.class_text_features(state, gids, rosters)  # outside any graph
        text_rows = dc.constant(rows.values)

    state.set_trainable(STAGE2_TRAINABLE)
    opt = init_optimizer(state)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_STAGE2_STREAM,)))
    history: list[dict] = []
    p_eff = min(run.p_groups, len(gids))

    for epoch in range(run.total_epochs):
        lr = lr_at_epoch(run, epoch)
        group_order = rng.permutation(len(gids))
        sums: dict[str, float] = {}
        steps = 0
        for at in range(0, len(group_order), p_eff):
            chunk = group_order[at : at + p_eff]
            if len(chunk) < 2:
                continue  # a single group has no negatives
            batch: list[GroupSample] = []
            for gi in chunk:
                pool = views[gids[gi]]
                picks = rng.choice(len(pool), size=run.q_views, replace=len(pool) < run.q_views)
                batch.extend(samples[pool[j]] for j in picks)
            masks = _sample_masks(batch, mvs, rng)
            _clear_grads(state)
            with dc.Graph() as g:
                loss, parts = losses_mod.stage2_batch_loss(
                    batch, masks, state, class_index, text_rows,
                    alpha=alpha, epsilon=epsilon, mvs_enabled=mvs is not None,
                )
            g.backward(loss)
            grads = _collect_grads(state, STAGE2_TRAINABLE)
            state = sgd_step(state, grads, opt, lr, run)
            sums["loss_total"] = sums.get("loss_total", 0.0) + loss.item()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        if steps:
            history.append(_epoch_record(epoch, 2, lr, sums, steps))
        opt.epoch, opt.lr = epoch + 1, lr
    return state, history
