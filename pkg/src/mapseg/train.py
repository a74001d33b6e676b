"""Loss, SGD-with-momentum training loop, early stopping, fine-tuning.

The loss is a multinomial logistic loss SUMMED over every pixel of the
patch (not averaged), which is why the full-scale learning rate is tiny
(5e-9 for 500x500 patches).  For desk-scale 64x64 patches the default
learning rate is scaled by (500/64)^2 ~ 61x so the per-pixel step size
stays comparable; both values are plain config entries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Patch, center_patch
from .errors import LabelOutOfRange, NonFiniteGradient, ShapeMismatch, SpecMismatch
from .metrics import ClassScores, ConfusionMatrix, accumulate, scores
from .net import (
    Array,
    Network,
    NetworkSpec,
    bilinear_init,  # noqa: F401  (re-exported initializer)
    glorot_init,  # noqa: F401  (re-exported initializer)
    load_checkpoint,
    net_backward,
    net_forward,
    save_checkpoint,
)

#: Learning rate matching the full-scale 500x500 summed loss.
FULL_SCALE_LR0 = 5e-9
#: Desk-scale default: FULL_SCALE_LR0 * (500/64)^2, same per-pixel step size.
DESK_LR0 = FULL_SCALE_LR0 * (500.0 / 64.0) ** 2


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = FULL_SCALE_LR0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    bias_lr_multiplier: float = 2.0
    dropout_rate: float = 0.5
    lr_drop_factor: float = 10.0
    max_lr_drops: int = 2
    patience: int = 5
    eval_interval: int = 50
    max_iterations: int = 2000
    seed: int = 0
    min_f1_gain: float = 1e-4

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def desk_config(**overrides) -> TrainConfig:
    """TrainConfig with the desk-scale learning rate and evaluation cadence."""
    base = dict(lr0=DESK_LR0, eval_interval=25, patience=4, max_iterations=1500)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class OptimizerState:
    velocity: dict[str, Array]
    lr_current: float
    drops_done: int = 0
    best_val_f1: float = float("-inf")
    evals_since_best: int = 0


@dataclass(frozen=True)
class HistoryPoint:
    iteration: int
    train_loss: float
    val_f1: float
    lr: float


@dataclass
class TrainHistory:
    points: list[HistoryPoint] = field(default_factory=list)

    def append(self, point: HistoryPoint) -> None:
        if self.points and point.iteration <= self.points[-1].iteration:
            raise ValueError("history iterations must be strictly increasing")
        self.points.append(point)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "train_loss", "val_f1", "lr"])
            for p in self.points:
                writer.writerow([p.iteration, repr(p.train_loss), repr(p.val_f1), repr(p.lr)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainHistory":
        history = cls()
        with open(path, newline="") as f:
            for row in list(csv.reader(f))[1:]:
                history.append(HistoryPoint(int(row[0]), float(row[1]), float(row[2]), float(row[3])))
        return history


def multinomial_loss(probs: Array, labels: Array) -> tuple[float, Array]:
    """Summed negative log-likelihood and its gradient w.r.t. pre-softmax scores.

    The gradient is probabilities minus one-hot labels per pixel, so callers
    feed it straight into net_backward without differentiating the softmax.
    """
    k = probs.shape[0]
    labels = np.asarray(labels)
    if probs.shape[1:] != labels.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise LabelOutOfRange(f"labels outside [0, {k})")
    idx = labels.astype(np.intp)
    picked = np.take_along_axis(probs, idx[None], axis=0)[0]
    loss = float(-np.log(np.maximum(picked, 1e-300)).sum())
    grad = probs.copy()
    np.put_along_axis(grad, idx[None], np.take_along_axis(grad, idx[None], axis=0) - 1.0, axis=0)
    return loss, grad


def sgd_momentum_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """In-place momentum update.

    Weight decay is added to weight gradients only (never biases); bias
    tensors use a doubled learning rate.
    """
    for name, w in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        is_bias = name.endswith(".bias")
        if not is_bias and config.weight_decay:
            g = g + config.weight_decay * w
        lr = state.lr_current * (config.bias_lr_multiplier if is_bias else 1.0)
        v = state.velocity[name]
        v *= config.momentum
        v -= lr * g
        w += v


def _iteration_seed(base_seed: int, tag: int, iteration: int) -> int:
    return int(np.random.SeedSequence(entropy=(base_seed, tag, iteration)).generate_state(1)[0])


def evaluate_f1(net: Network, patches: list[Patch]) -> tuple[float, ClassScores]:
    """Macro-averaged F1 over a patch set (dropout off, deterministic)."""
    cm = ConfusionMatrix.zeros(net.spec.class_count)
    for p in patches:
        probs, _ = net_forward(net, center_patch(p), training_flag=False)
        cm = accumulate(cm, probs.argmax(axis=0), p.labels)
    cs = scores(cm)
    return cs.avg_f1, cs


def train_loop(
    net: Network,
    patches: list[Patch],
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    checkpoint_meta: dict | None = None,
) -> tuple[Network, TrainHistory, Path | None]:
    """Single-patch SGD with validation-F1 early stopping.

    Iterates over a seeded shuffle of the train split.  Every eval_interval
    iterations the validation F1 is computed; after `patience` evaluations
    without improvement the learning rate drops by lr_drop_factor (at most
    max_lr_drops times) and the next stall stops training.  Returns the
    parameters of the best validation checkpoint.
    """
    train = [p for p in patches if p.split_tag == "train"]
    val = [p for p in patches if p.split_tag == "val"]
    if not train:
        raise ValueError("train split is empty")
    if not val and config.max_iterations > 0:
        raise ValueError("val split is empty")

    state = OptimizerState(
        velocity={k: np.zeros_like(v) for k, v in net.params.items()},
        lr_current=config.lr0,
    )
    history = TrainHistory()
    best_params = {k: v.copy() for k, v in net.params.items()}
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 1)))
    order: list[int] = []
    window: list[float] = []

    for iteration in range(1, config.max_iterations + 1):
        if not order:
            order = list(shuffle_rng.permutation(len(train)))
        patch = train[order.pop()]
        x = center_patch(patch)
        probs, cache = net_forward(net, x, training_flag=True,
                                   seed=_iteration_seed(config.seed, 2, iteration))
        loss, grad_scores = multinomial_loss(probs, patch.labels)
        grads = net_backward(net, cache, grad_scores)
        sgd_momentum_step(net.params, grads, state, config)
        window.append(loss)

        if iteration % config.eval_interval == 0:
            val_f1, _ = evaluate_f1(net, val)
            history.append(HistoryPoint(iteration, float(np.mean(window)), val_f1, state.lr_current))
            window = []
            if val_f1 > state.best_val_f1 + config.min_f1_gain:
                state.best_val_f1 = val_f1
                state.evals_since_best = 0
                best_params = {k: v.copy() for k, v in net.params.items()}
            else:
                state.evals_since_best += 1
                if state.evals_since_best >= config.patience:
                    if state.drops_done < config.max_lr_drops:
                        state.lr_current /= config.lr_drop_factor
                        state.drops_done += 1
                        state.evals_since_best = 0
                    else:
                        break

    best = Network(spec=net.spec, params=best_params)
    checkpoint_path = None
    if checkpoint_dir is not None:
        checkpoint_path = save_checkpoint(best, checkpoint_dir, meta=checkpoint_meta)
    return best, history, checkpoint_path


def fine_tune(
    checkpoint_dir: str | Path,
    patches: list[Patch],
    config: TrainConfig,
    expected_spec: NetworkSpec | None = None,
    out_checkpoint_dir: str | Path | None = None,
    checkpoint_meta: dict | None = None,
) -> tuple[Network, TrainHistory, Path | None]:
    """Continue training from a checkpoint on a new patch set.

    Momentum velocity starts from zero; the checkpoint's spec hash must
    match the expected spec when one is given.
    """
    loaded, _ = load_checkpoint(checkpoint_dir)
    if expected_spec is not None and expected_spec.spec_hash() != loaded.spec.spec_hash():
        raise SpecMismatch("checkpoint spec hash does not match the target spec")
    return train_loop(loaded, patches, config, out_checkpoint_dir, checkpoint_meta)
