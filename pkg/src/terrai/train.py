"""Adam + early-stopping training loop for the masked-RMSE U-Net."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import unet
from .autodiff import Graph, Parameter
from .green import EnergySample
from .preprocess import PatchSet, augment_batch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 64
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if not 0 < self.patience <= self.max_epochs:
            raise ValueError("patience must be in (0, max_epochs]")


class AdamState:
    def __init__(self, params: list[Parameter]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: list[Parameter], state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.identifier}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)
        p.zero_grad()


class EarlyStopping:
    """Tracks the best validation loss; improvement means strictly lower."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_validation_loss = math.inf
        self.best_epoch = 0
        self.epochs_since_improvement = 0
        self.best_checkpoint = None

    def update(self, epoch: int, val_loss: float, snapshot=None) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_validation_loss:
            self.best_validation_loss = val_loss
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            self.best_checkpoint = snapshot() if callable(snapshot) else snapshot
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


def evaluate_loss(model: unet.UNetModel, patches: PatchSet, batch_size: int = 256) -> float:
    """Masked RMSE pooled over every valid pixel of ``patches``."""
    sse, n = 0.0, 0
    for i in range(0, len(patches), batch_size):
        pred = model.forward(patches.inputs[i:i + batch_size]).data[:, 0]
        s, k = unet.masked_sse(pred, patches.labels[i:i + batch_size], patches.label_masks[i:i + batch_size])
        sse += s
        n += k
    if n == 0:
        raise TrainingError("no valid label pixels to evaluate")
    return math.sqrt(sse / n + unet.LOSS_EPS)


@dataclass
class TrainReport:
    variant: str
    config: dict
    parameter_count: int
    train_losses: list[float] = field(default_factory=list)
    validation_losses: list[float] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    best_validation_loss: float = math.inf
    restored_best: bool = True
    wall_seconds: float = 0.0
    energy: dict | None = None
    checkpoint: str | None = None

    @property
    def epochs(self) -> int:
        return len(self.train_losses)

    def to_json(self) -> dict:
        d = asdict(self)
        d["epochs"] = self.epochs
        return d


def train_loop(model: unet.UNetModel, train: PatchSet, validation: PatchSet, config: TrainConfig,
               energy_source=None) -> TrainReport:
    if not len(train) or not len(validation):
        raise TrainingError("train and validation partitions must be nonempty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    adam = AdamState(params)
    stopper = EarlyStopping(config.patience)
    report = TrainReport(model.config.name, asdict(config), unet.parameter_count(model))
    if energy_source is not None:
        energy_source.start()
    t0 = time.perf_counter()
    model.zero_grad()

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        batch_losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            x, y, m = train.inputs[idx], train.labels[idx], train.label_masks[idx]
            if config.augment:
                x, y, m = augment_batch(x, y, m, rng)
            if not m.any():
                continue
            g = Graph()
            loss = unet.masked_rmse_loss(g, model.forward(x, g), y, m)
            g.backward(loss)
            adam_step(params, adam, config.learning_rate, config.adam_beta1, config.adam_beta2,
                      config.adam_epsilon)
            batch_losses.append(float(loss.data))
        val = evaluate_loss(model, validation)
        if not math.isfinite(val):
            raise TrainingError(f"validation loss is not finite at epoch {epoch}")
        report.train_losses.append(float(np.mean(batch_losses)))
        report.validation_losses.append(val)
        stop = stopper.update(epoch, val, model.state)
        log.info("variant=%s epoch=%d train=%.5f val=%.5f best=%.5f@%d", model.config.name, epoch,
                 report.train_losses[-1], val, stopper.best_validation_loss, stopper.best_epoch)
        if stop:
            report.stop_reason = f"early_stopping(patience={config.patience})"
            break
    else:
        report.stop_reason = "max_epochs"

    model.load_state(stopper.best_checkpoint)
    report.best_epoch = stopper.best_epoch
    report.best_validation_loss = stopper.best_validation_loss
    report.wall_seconds = time.perf_counter() - t0
    if energy_source is not None:
        sample: EnergySample = energy_source.stop(model.config.name)
        report.energy = asdict(sample)
    return report
