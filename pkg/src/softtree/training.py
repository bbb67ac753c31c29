"""Two-term likelihood loss, momentum SGD, step schedules, and the
two-stage freeze/fine-tune training driver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tape, Tensor, as_tensor, backward, clamp,
                       first_nonfinite_op, log, neg, select_rows, tmean)
from .data import AugmentPolicy, Dataset, augment, batches, normalize
from .errors import ConfigError, InputError, NumericError
from .ops import EPS_LOG
from .tree import Prediction, TreeModel


def nll(dist, labels) -> Tensor:
    """Mean over the batch of -log(dist[n, labels[n]]), log clamped at eps."""
    dist = as_tensor(dist)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = dist.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch {n}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"labels must lie in [0,{k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    sums = dist.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise NumericError(f"nll input rows must sum to 1, got {sums}")
    picked = select_rows(dist, labels)
    return tmean(neg(log(clamp(picked, min_value=EPS_LOG))))


def total_loss(pred: Prediction, labels) -> Tensor:
    """Likelihood loss of the final distribution plus one term per leaf."""
    loss = nll(pred.final, labels)
    for leaf in pred.leaf_probs:
        loss = loss + nll(leaf, labels)
    return loss


def sgd_step(params, grads, state, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> None:
    """v <- momentum*v + (g + wd*w); w <- w - lr*v, applied in place.

    Weight decay is skipped for tensors marked ``decay=False`` (biases and
    normalization affine parameters).
    """
    for p, g, v in zip(params, grads, state):
        if g is None:
            raise NumericError("missing gradient for a parameter in sgd_step")
        eff = g + weight_decay * p.data if (weight_decay and p.decay) else g
        v *= momentum
        v += eff
        p.data -= lr * v


class SGD:
    def __init__(self, named_params, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        grads = []
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                raise NumericError(f"parameter '{name}' has no gradient")
            grads.append(p.grad)
        sgd_step(self.params, grads, self.velocity, lr,
                 momentum=self.momentum, weight_decay=self.weight_decay)


@dataclass(frozen=True)
class StagePlan:
    freeze_backbone: bool
    epochs: int
    batch_size: int
    lr: float
    lr_divisor: float
    milestones: tuple[int, ...]
    weight_decay: float

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError(f"invalid stage plan: {self}")
        if self.lr_divisor <= 1:
            raise ConfigError(f"lr_divisor must exceed 1, got {self.lr_divisor}")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs for m in ms) \
                or any(m < 1 for m in ms):
            raise ConfigError(f"milestones must be strictly increasing and < epochs: {ms}")


@dataclass(frozen=True)
class TrainPlan:
    stages: tuple[StagePlan, ...]
    momentum: float = 0.9
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("plan needs at least one stage")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32|float64: {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def paper_plan(seed: int = 0) -> TrainPlan:
    """The published two-stage schedule, values verbatim."""
    return TrainPlan(stages=(
        StagePlan(freeze_backbone=True, epochs=60, batch_size=24, lr=1.0,
                  lr_divisor=4.0, milestones=(10, 20, 30, 40), weight_decay=5e-6),
        StagePlan(freeze_backbone=False, epochs=200, batch_size=16, lr=0.001,
                  lr_divisor=10.0, milestones=(30, 40, 50), weight_decay=5e-4),
    ), momentum=0.9, seed=seed, precision="float32")


def desk_plan(seed: int = 0) -> TrainPlan:
    """CI-scale analog of the two-stage schedule (minutes, one CPU core)."""
    return TrainPlan(stages=(
        StagePlan(freeze_backbone=True, epochs=5, batch_size=16, lr=0.1,
                  lr_divisor=10.0, milestones=(), weight_decay=5e-6),
        StagePlan(freeze_backbone=False, epochs=30, batch_size=16, lr=0.01,
                  lr_divisor=10.0, milestones=(15, 25), weight_decay=5e-4),
    ), momentum=0.9, seed=seed, precision="float32")


def lr_at(stage: StagePlan, epoch: int) -> float:
    """Learning rate for a 1-based epoch: divided at each milestone reached."""
    if not 1 <= epoch <= stage.epochs:
        raise ConfigError(f"epoch {epoch} outside stage of {stage.epochs}")
    drops = sum(1 for m in stage.milestones if m <= epoch)
    return stage.lr / stage.lr_divisor ** drops


def _top1(pred_classes: np.ndarray, labels: np.ndarray) -> float:
    return float((pred_classes == labels).mean()) if labels.size else 0.0


def evaluate(model: TreeModel, dataset: Dataset, policy: AugmentPolicy,
             stats, batch_size: int = 32) -> dict:
    """Center-crop evaluation: overall, per-leaf, and per-class top-1."""
    n_leaves = model.config.num_leaves
    correct = 0
    leaf_correct = np.zeros(n_leaves, dtype=np.int64)
    class_correct = np.zeros(model.config.num_classes, dtype=np.int64)
    class_total = np.zeros(model.config.num_classes, dtype=np.int64)
    total = 0

    def transform(sample, rng):
        return normalize(augment(sample, policy, rng=None), stats)

    for images, labels, _ids in batches(dataset, batch_size, seed=0, shuffle=False,
                                        transform=transform, dtype=model_dtype(model)):
        pred = model.forward(images, training=False)
        top = pred.predicted_class()
        correct += int((top == labels).sum())
        for j, leaf in enumerate(pred.leaf_probs):
            leaf_correct[j] += int((np.argmax(leaf.data, axis=1) == labels).sum())
        for cls in range(model.config.num_classes):
            sel = labels == cls
            class_total[cls] += int(sel.sum())
            class_correct[cls] += int((top[sel] == cls).sum())
        total += labels.size
    with np.errstate(invalid="ignore"):
        per_class = np.where(class_total > 0, class_correct / class_total, 0.0)
    return {
        "top1": correct / total if total else 0.0,
        "per_leaf_top1": [float(leaf_correct[j] / total) for j in range(n_leaves)],
        "per_class_top1": [float(v) for v in per_class],
        "count": total,
    }


def model_dtype(model: TreeModel):
    return model.leaves[0].fc.weight.dtype


def fit_two_stage(model: TreeModel, train_ds: Dataset, val_ds: Dataset,
                  plan: TrainPlan, policy: AugmentPolicy, stats,
                  sink=None, on_checkpoint=None, start_stage: int = 0):
    """Run the staged schedule; returns (model, per-epoch records).

    One record per epoch: stage, epoch, lr, train_loss, train_top1,
    val_top1, leaf_top1.  Deterministic given the plan seed.  Non-finite
    losses abort with the name of the first offending operation.
    """
    records = []
    best_val = -1.0
    dtype = plan.dtype
    for stage_idx, stage in enumerate(plan.stages):
        if stage_idx < start_stage:
            continue
        model.backbone.frozen = stage.freeze_backbone
        trainable = [(n, p) for n, p in model.named_parameters()
                     if not (stage.freeze_backbone and n.startswith("backbone."))]
        opt = SGD(trainable, momentum=plan.momentum, weight_decay=stage.weight_decay)
        for epoch in range(1, stage.epochs + 1):
            lr = lr_at(stage, epoch)
            epoch_seed = [int(plan.seed), stage_idx, epoch]
            rng = np.random.default_rng(epoch_seed + [0xA46])

            def transform(sample, _rng):
                return normalize(augment(sample, policy, rng=rng), stats)

            loss_sum, seen, correct = 0.0, 0, 0
            for images, labels, _ids in batches(
                    train_ds, stage.batch_size, seed=epoch_seed, shuffle=True,
                    transform=transform, dtype=dtype):
                with Tape() as tape:
                    pred = model.forward(images, training=True)
                    loss = total_loss(pred, labels)
                if not np.isfinite(loss.data).all():
                    op = first_nonfinite_op(tape) or "loss"
                    raise NumericError(
                        f"non-finite loss at stage {stage_idx + 1} epoch {epoch}; "
                        f"first offending operation: '{op}'")
                opt.zero_grad()
                backward(loss)
                opt.step(lr)
                loss_sum += loss.item() * labels.size
                correct += int((pred.predicted_class() == labels).sum())
                seen += labels.size
            val = evaluate(model, val_ds, policy, stats,
                           batch_size=stage.batch_size)
            record = {
                "stage": stage_idx + 1,
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / seen,
                "train_top1": correct / seen,
                "val_top1": val["top1"],
                "leaf_top1": val["per_leaf_top1"],
            }
            records.append(record)
            if sink is not None:
                sink(record)
            if on_checkpoint is not None and val["top1"] > best_val:
                best_val = val["top1"]
                on_checkpoint("best", model, stage_idx + 1)
        model.backbone.frozen = False
        if on_checkpoint is not None:
            on_checkpoint(f"stage{stage_idx + 1}", model, stage_idx + 1)
    return model, records
