"""Training strategies built on one step engine.

The centerpiece is the feedback scheme: every step evaluates the gradient at
the pruned model x_hat = m * x and applies it to the simultaneously kept
dense model x, so weights pruned too early can grow back and be reactivated
at the next mask refresh.  The rival methodologies (dense, pruning before
training, one-shot pruning with fine-tuning, incremental pruning) share the
same engine and differ only in when masks are computed and whether updates
are confined to the surviving subnetwork.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .metrics import MaskHistory, StepRecord, flip_count, mask_iou
from .nets import Batch, LayerSpec, MLPModel, NumericalFailure, backward, evaluate, forward, init_model
from .pruning import (
    Mask,
    SparsitySchedule,
    apply_mask,
    delta_of,
    magnitude_mask,
    snip_mask,
    sparsity_at,
)

STRATEGY_KINDS = ("dense", "before_training", "one_shot_ft", "incremental", "dpf")
SALIENCIES = ("magnitude", "snip")


@dataclass(frozen=True)
class Strategy:
    """Which pruning methodology drives the run."""

    kind: str
    saliency: str = "magnitude"  # mask criterion for before_training
    monotone: bool = False       # incremental only: masks may only shrink

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.saliency not in SALIENCIES:
            raise ValueError(f"unknown saliency {self.saliency!r}")

    @property
    def dynamic_masks(self) -> bool:
        return self.kind in ("dpf", "incremental")

    @property
    def subnetwork(self) -> bool:
        """True when weights and gradients stay confined to the mask support."""
        return self.kind in ("before_training", "incremental")


class LRSchedule:
    def at(self, t: int) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantLR(LRSchedule):
    gamma: float

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError("learning rate must be positive")

    def at(self, t: int) -> float:
        return self.gamma


@dataclass(frozen=True)
class StepDecayLR(LRSchedule):
    """gamma_0 divided by `factor` at every milestone step reached."""

    gamma0: float
    milestones: tuple[int, ...]
    factor: float = 10.0

    def __post_init__(self) -> None:
        if self.gamma0 <= 0 or self.factor <= 0:
            raise ValueError("rates and decay factor must be positive")
        object.__setattr__(self, "milestones", tuple(sorted(int(m) for m in self.milestones)))

    def at(self, t: int) -> float:
        drops = sum(1 for m in self.milestones if t >= m)
        return self.gamma0 / self.factor**drops


@dataclass(frozen=True)
class InverseTimeLR(LRSchedule):
    """gamma_t = 4 / (mu (t + 2)): the strongly-convex harness schedule."""

    mu: float

    def __post_init__(self) -> None:
        if self.mu <= 0:
            raise ValueError("mu must be positive")

    def at(self, t: int) -> float:
        return 4.0 / (self.mu * (t + 2))


@dataclass(frozen=True)
class SqrtHorizonLR(LRSchedule):
    """Constant gamma = c / sqrt(T) for a fixed horizon T."""

    c: float
    horizon: int

    def __post_init__(self) -> None:
        if self.c <= 0 or self.horizon < 1:
            raise ValueError("need c > 0 and horizon >= 1")

    def at(self, t: int) -> float:
        return self.c / math.sqrt(self.horizon)


@dataclass(frozen=True)
class TrainConfig:
    strategy: Strategy
    lr: LRSchedule
    momentum: float = 0.9          # Nesterov factor
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 10
    reparam_period: int = 16       # steps between mask refreshes
    schedule: SparsitySchedule | None = None
    scope: str = "global"
    seed: int = 0
    finetune_epochs: int = 0
    finetune_lr: float | None = None  # None: reuse the last training-phase rate
    eval_every: int = 1            # epochs between evaluation records

    def __post_init__(self) -> None:
        if self.reparam_period < 1:
            raise ValueError("reparam_period must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("batch_size must be >= 1, epoch counts >= 0")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.strategy.kind != "dense" and self.schedule is None:
            raise ValueError(f"strategy {self.strategy.kind!r} needs a sparsity schedule")


@dataclass
class TrainState:
    """Dense weights, momentum buffer, current mask and the cached pruned view."""

    x: np.ndarray
    v: np.ndarray
    mask: Mask
    t: int
    x_hat: np.ndarray
    e: np.ndarray               # pruning error x_hat - x
    last_grad_norm: float = 0.0  # diagnostic: ||g(x_hat)|| of the latest step


def make_state(x: np.ndarray, v: np.ndarray, mask: Mask, t: int, last_grad_norm: float = 0.0) -> TrainState:
    x_hat = apply_mask(x, mask)
    return TrainState(x=x, v=v, mask=mask, t=t, x_hat=x_hat, e=x_hat - x, last_grad_norm=last_grad_norm)


def _gradient(model: MLPModel, at: np.ndarray, batch: Batch, cfg: TrainConfig) -> np.ndarray:
    _, cache = forward(model, at, batch)
    g = backward(model, at, batch, cache)
    if cfg.weight_decay != 0.0:
        g = g + cfg.weight_decay * at  # decay acts on the evaluated (pruned) point
    return g


def dpf_step(state: TrainState, model: MLPModel, batch: Batch, lr: float, cfg: TrainConfig) -> TrainState:
    """One feedback step: gradient at the pruned view, Nesterov update on the dense weights."""
    g = _gradient(model, state.x_hat, batch, cfg)
    v = cfg.momentum * state.v + g
    x = state.x - lr * (g + cfg.momentum * v)
    return make_state(x, v, state.mask, state.t + 1, float(np.linalg.norm(g)))


def masked_step(state: TrainState, model: MLPModel, batch: Batch, lr: float, cfg: TrainConfig) -> TrainState:
    """One subnetwork step: gradient and update confined to the mask support."""
    bits = state.mask.bits
    g = np.where(bits, _gradient(model, state.x_hat, batch, cfg), 0.0)
    v = cfg.momentum * state.v + g
    x = np.where(bits, state.x - lr * (g + cfg.momentum * v), 0.0)
    return make_state(x, v, state.mask, state.t + 1, float(np.linalg.norm(g)))


def maybe_update_mask(
    state: TrainState,
    model: MLPModel,
    cfg: TrainConfig,
    criterion: str = "magnitude",
    batch: Batch | None = None,
    force: bool = False,
) -> TrainState:
    """Refresh the mask when the step counter hits the reparameterization period.

    The magnitude source is the dense weight vector, so coordinates that were
    pruned but kept growing can re-enter the support.  With an incremental
    monotone strategy the fresh mask is intersected with the previous one.
    `force` refreshes regardless of the period (used for the output iterate).
    """
    if not force and state.t % cfg.reparam_period != 0:
        return state
    if cfg.schedule is None:
        raise ValueError("mask updates need a sparsity schedule")
    target = sparsity_at(cfg.schedule, state.t)
    if criterion == "magnitude":
        layer_ids = model.param_layer_ids if cfg.scope == "layerwise" else None
        new = magnitude_mask(state.x, target, model.prunable, cfg.scope, layer_ids)
    elif criterion == "snip":
        if batch is None:
            raise ValueError("snip criterion needs a batch")
        new = snip_mask(model, state.x, batch, target)
    else:
        raise ValueError(f"unknown mask criterion {criterion!r}")
    if cfg.strategy.kind == "incremental" and cfg.strategy.monotone:
        new = new.intersect(state.mask)
    return make_state(state.x, state.v, new, state.t, state.last_grad_norm)


@dataclass
class TrainResult:
    dense: np.ndarray
    sparse: np.ndarray
    mask: Mask
    records: list[StepRecord]
    mask_history: MaskHistory
    state: TrainState
    grad_norm_max: float
    steps_per_epoch: int


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # One shuffle stream per (seed, epoch): resumable at epoch boundaries.
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def _epoch_batches(data: Dataset, batch_size: int, seed: int, epoch: int):
    perm = _epoch_rng(seed, epoch).permutation(data.n_train)
    for b in range(steps_per_epoch(data.n_train, batch_size)):
        idx = perm[b * batch_size:(b + 1) * batch_size]
        yield Batch(data.train_inputs[idx], data.train_labels[idx])


class _Engine:
    """Mutable bookkeeping shared by the training phases of one run."""

    def __init__(self, model: MLPModel, data: Dataset, cfg: TrainConfig, on_epoch_end=None):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.spe = steps_per_epoch(data.n_train, cfg.batch_size)
        self.records: list[StepRecord] = []
        self.history = MaskHistory()
        self.flips_accum = 0
        self.last_event_mask: Mask | None = None
        self.prev_record_mask: Mask | None = None
        self.grad_norm_max = 0.0
        self.current_target = 0.0
        self.on_epoch_end = on_epoch_end

    def note_mask(self, step: int, mask: Mask) -> None:
        if self.last_event_mask is not None:
            self.flips_accum += flip_count(self.last_event_mask, mask)
        if len(self.history) == 0 or step > self.history.steps[-1]:
            self.history.record(step, mask)
        self.last_event_mask = mask
        if self.prev_record_mask is None:
            self.prev_record_mask = mask

    def record(self, state: TrainState, epoch: int, lr: float) -> None:
        train_loss, train_acc = evaluate(self.model, state.x_hat, self.data.train_inputs, self.data.train_labels)
        if self.data.has_test:
            test_loss, test_acc = evaluate(self.model, state.x_hat, self.data.test_inputs, self.data.test_labels)
        else:
            test_loss = test_acc = float("nan")
        rec = StepRecord(
            step=state.t,
            epoch=epoch,
            lr=lr,
            train_loss=train_loss,
            train_acc=train_acc,
            test_loss=test_loss,
            test_acc=test_acc,
            sparsity_target=self.current_target,
            sparsity_achieved=state.mask.sparsity,
            delta=delta_of(state.x, state.x_hat),
            flips=self.flips_accum,
            iou=mask_iou(self.prev_record_mask, state.mask),
        )
        self.records.append(rec)
        self.flips_accum = 0
        self.prev_record_mask = state.mask

    def run_span(
        self,
        state: TrainState,
        start_epoch: int,
        n_epochs: int,
        lr: LRSchedule,
        *,
        subnetwork: bool,
        dynamic: bool,
        criterion: str = "magnitude",
    ) -> TrainState:
        cfg = self.cfg
        step_fn = masked_step if subnetwork else dpf_step
        for epoch in range(start_epoch, start_epoch + n_epochs):
            step_lr = lr.at(max(state.t - 1, 0))
            for batch in _epoch_batches(self.data, cfg.batch_size, cfg.seed, epoch):
                if dynamic and state.t % cfg.reparam_period == 0:
                    state = maybe_update_mask(state, self.model, cfg, criterion, batch)
                    self.current_target = sparsity_at(cfg.schedule, state.t)
                    if subnetwork:
                        state = make_state(
                            np.where(state.mask.bits, state.x, 0.0), state.v, state.mask, state.t
                        )
                    self.note_mask(state.t, state.mask)
                step_lr = lr.at(state.t)
                try:
                    state = step_fn(state, self.model, batch, step_lr, cfg)
                except NumericalFailure as exc:
                    raise NumericalFailure(f"training aborted at step {state.t}: {exc}") from exc
                self.grad_norm_max = max(self.grad_norm_max, state.last_grad_norm)
            if (epoch + 1) % cfg.eval_every == 0 or epoch == start_epoch + n_epochs - 1:
                self.record(state, epoch, step_lr)
            if self.on_epoch_end is not None:
                self.on_epoch_end(epoch, state)
        return state


def _initial_state(model: MLPModel, data: Dataset, cfg: TrainConfig) -> TrainState:
    x0 = model.params.copy()
    mask = Mask.all_ones(model.prunable)
    if cfg.strategy.kind == "before_training":
        target = cfg.schedule.s_f
        if cfg.strategy.saliency == "snip":
            batch = next(_epoch_batches(data, cfg.batch_size, cfg.seed, 0))
            mask = snip_mask(model, x0, batch, target)
        else:
            layer_ids = model.param_layer_ids if cfg.scope == "layerwise" else None
            mask = magnitude_mask(x0, target, model.prunable, cfg.scope, layer_ids)
        x0 = np.where(mask.bits, x0, 0.0)
    return make_state(x0, np.zeros_like(x0), mask, 0)


def run_training(
    model: MLPModel,
    data: Dataset,
    cfg: TrainConfig,
    *,
    resume_state: TrainState | None = None,
    start_epoch: int = 0,
    finalize: bool = True,
    on_epoch_end=None,
) -> TrainResult:
    """Train with the configured strategy; returns the dense and pruned weights.

    dense            no mask ever, plain SGD with Nesterov momentum.
    before_training  mask built once at step 0 (magnitude or gradient
                     saliency), then subnetwork training with the mask fixed.
    one_shot_ft      dense training, magnitude pruning of the final iterate,
                     then optional fine-tuning on the fixed mask.
    incremental      gradual sparsity ramp, subnetwork training, masks
                     refreshed every reparam period (optionally monotone).
    dpf              gradual ramp with gradients taken at the pruned view and
                     applied to the dense weights (feedback).

    `on_epoch_end(epoch, state)` is invoked after every epoch (checkpointing
    hook).  `finalize=False` stops mid-run without the output-iterate mask
    refresh, one-shot pruning or fine-tuning.
    """
    strat = cfg.strategy
    eng = _Engine(model, data, cfg, on_epoch_end=on_epoch_end)
    if resume_state is not None:
        state = resume_state
    else:
        state = _initial_state(model, data, cfg)
    if not strat.dynamic_masks or state.t % cfg.reparam_period != 0:
        eng.note_mask(state.t, state.mask)
    else:
        eng.last_event_mask = state.mask
        eng.prev_record_mask = state.mask
    if strat.kind in ("before_training", "one_shot_ft"):
        eng.current_target = cfg.schedule.s_f if strat.kind == "before_training" else 0.0
    elif strat.dynamic_masks:
        eng.current_target = sparsity_at(cfg.schedule, state.t)

    state = eng.run_span(
        state,
        start_epoch,
        cfg.epochs - start_epoch,
        cfg.lr,
        subnetwork=strat.subnetwork,
        dynamic=strat.dynamic_masks,
    )

    if not finalize:
        # Mid-run stop for checkpointing: no output-iterate refresh, no
        # one-shot pruning, no fine-tuning, so a resumed run is bit-identical
        # to one that never stopped.
        return TrainResult(
            dense=state.x.copy(), sparse=state.x_hat.copy(), mask=state.mask,
            records=eng.records, mask_history=eng.history, state=state,
            grad_norm_max=eng.grad_norm_max, steps_per_epoch=eng.spe,
        )

    if strat.dynamic_masks and cfg.epochs > start_epoch:
        # The returned pruned model always carries a mask computed at the final
        # dense iterate; without this, short runs whose last refresh predates
        # the end of the sparsity ramp would report a stale sparsity level.
        state = maybe_update_mask(state, model, cfg, force=True)
        eng.current_target = sparsity_at(cfg.schedule, state.t)
        if strat.subnetwork:
            state = make_state(np.where(state.mask.bits, state.x, 0.0), state.v, state.mask, state.t)
        eng.note_mask(state.t, state.mask)
        eng.record(state, cfg.epochs - 1, cfg.lr.at(max(state.t - 1, 0)))

    if strat.kind == "one_shot_ft":
        layer_ids = model.param_layer_ids if cfg.scope == "layerwise" else None
        mask = magnitude_mask(state.x, cfg.schedule.s_f, model.prunable, cfg.scope, layer_ids)
        state = make_state(state.x, state.v, mask, state.t)
        eng.current_target = cfg.schedule.s_f
        eng.note_mask(state.t, state.mask)
        eng.record(state, cfg.epochs - 1, cfg.lr.at(max(state.t - 1, 0)))

    if cfg.finetune_epochs > 0:
        ft_lr = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.lr.at(max(eng.spe * cfg.epochs - 1, 0))
        # Fine-tuning restarts the optimizer on the frozen support.
        state = make_state(np.where(state.mask.bits, state.x, 0.0), np.zeros_like(state.x), state.mask, state.t)
        state = eng.run_span(
            state, cfg.epochs, cfg.finetune_epochs, ConstantLR(ft_lr), subnetwork=True, dynamic=False
        )

    return TrainResult(
        dense=state.x.copy(),
        sparse=state.x_hat.copy(),
        mask=state.mask,
        records=eng.records,
        mask_history=eng.history,
        state=state,
        grad_norm_max=eng.grad_norm_max,
        steps_per_epoch=eng.spe,
    )


def finetune(model: MLPModel, x_start: np.ndarray, mask: Mask, data: Dataset, cfg: TrainConfig) -> np.ndarray:
    """Continue training on the fixed mask support; sparsity is preserved exactly."""
    if cfg.finetune_epochs == 0:
        return apply_mask(x_start, mask)
    ft_lr = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.lr.at(
        max(steps_per_epoch(data.n_train, cfg.batch_size) * cfg.epochs - 1, 0)
    )
    eng = _Engine(model, data, cfg)
    state = make_state(apply_mask(x_start, mask), np.zeros_like(x_start), mask, 0)
    eng.note_mask(state.t, state.mask)
    state = eng.run_span(state, cfg.epochs, cfg.finetune_epochs, ConstantLR(ft_lr), subnetwork=True, dynamic=False)
    return state.x.copy()


def lottery_retrain(
    model_spec: Sequence[LayerSpec],
    mask: Mask,
    init_seed: int,
    data: Dataset,
    cfg: TrainConfig,
) -> np.ndarray:
    """Reinitialize the weights and train with the given mask fixed throughout."""
    model = init_model(model_spec, init_seed)
    if mask.d != model.n_params:
        raise ValueError("mask length does not match the model")
    eng = _Engine(model, data, cfg)
    state = make_state(apply_mask(model.params, mask), np.zeros_like(model.params), mask, 0)
    eng.note_mask(state.t, state.mask)
    state = eng.run_span(state, 0, cfg.epochs, cfg.lr, subnetwork=True, dynamic=False)
    return state.x.copy()
