from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from checkpoint import save_checkpoint
from evaluation import SsimConfig, psnr, ssim
from fingerprint_data import SamplePair, iter_pair_batches
from network import ModelParams, ModelSpec, forward, parameter_iter
from tensor_engine import EVAL, TRAIN, GradTape, NonFiniteError, Tensor, backward, mse_loss

logger = logging.getLogger(__name__)

MONITORS = ("val", "train")
LOG_COLUMNS = ["epoch", "lr", "train_mse", "val_mse", "val_psnr", "val_ssim", "stopped"]


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Training produced NaN or infinite values; the epoch was aborted."""


class EmptyBatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    lr_halve_every: int = 3
    batch_size: int = 8
    dropout_rate: float = 0.3
    early_stop_patience: int = 5
    max_epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    image_size: Tuple[int, int] = (256, 256)
    early_stop_monitor: str = "val"
    augment: bool = True

    def validate(self) -> "TrainConfig":
        problems = []
        if not self.initial_lr > 0.0:
            problems.append(f"initial_lr must be positive, got {self.initial_lr}")
        if self.lr_halve_every < 1:
            problems.append(f"lr_halve_every must be >= 1, got {self.lr_halve_every}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.early_stop_patience < 1:
            problems.append(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.max_epochs < 1:
            problems.append(f"max_epochs must be >= 1, got {self.max_epochs}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                problems.append(f"{name} must lie in [0, 1), got {value}")
        if not self.adam_eps > 0.0:
            problems.append(f"adam_eps must be positive, got {self.adam_eps}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            problems.append(f"image_size must be two positive integers, got {self.image_size}")
        if self.early_stop_monitor not in MONITORS:
            problems.append(f"early_stop_monitor must be one of {MONITORS}, got {self.early_stop_monitor!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


@dataclass
class TrainState:
    """Optimizer moments and loop counters; ``epoch`` counts completed epochs."""

    epoch: int
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    best_val_loss: float = math.inf
    best_train_loss: float = math.inf
    epochs_since_improvement: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def initial(cls, params: ModelParams, cfg: TrainConfig) -> "TrainState":
        zeros = {name: np.zeros(params[name].shape, dtype=np.float32) for name in params.learnable_names()}
        return cls(epoch=0, step=0, m=zeros, v={name: z.copy() for name, z in zeros.items()},
                   rng=np.random.default_rng([cfg.seed, 1]))


@dataclass
class EpochReport:
    epoch: int
    lr: float
    train_mse: float
    val_mse: float
    val_psnr: float
    val_ssim: float
    improved: bool
    stopped: bool

    def log_row(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_mse": self.train_mse,
            "val_mse": self.val_mse,
            "val_psnr": self.val_psnr,
            "val_ssim": self.val_ssim,
            "stopped": self.stopped,
        }


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.initial_lr * 0.5 ** (epoch // cfg.lr_halve_every)


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: TrainState, lr: float,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied in place to params and state."""
    names = params.learnable_names()
    missing = [name for name in names if name not in grads]
    if missing:
        raise ValueError(f"no gradient for {len(missing)} parameters, first {missing[0]}")
    bad = [name for name in names if not np.all(np.isfinite(grads[name]))]
    if bad:
        raise NumericError(f"non-finite gradient for {bad[0]} ({len(bad)} parameters affected)")

    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name in names:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
        params[name].data -= update.astype(params[name].dtype, copy=False)


def update_early_stopping(state: TrainState, cfg: TrainConfig, val_loss: float,
                          train_loss: float) -> Tuple[bool, bool]:
    """Record one epoch's losses; returns (validation improved, stop now).

    The waiting counter follows ``cfg.early_stop_monitor``; the improvement
    flag that drives checkpointing always follows the validation loss.
    """
    improved = val_loss < state.best_val_loss
    if improved:
        state.best_val_loss = val_loss
    train_improved = train_loss < state.best_train_loss
    if train_improved:
        state.best_train_loss = train_loss

    monitored = improved if cfg.early_stop_monitor == "val" else train_improved
    state.epochs_since_improvement = 0 if monitored else state.epochs_since_improvement + 1
    return improved, state.epochs_since_improvement >= cfg.early_stop_patience


def evaluate_loss(params: ModelParams, spec: ModelSpec, pairs: Sequence[SamplePair], batch_size: int,
                  ssim_cfg: Optional[SsimConfig] = None) -> Tuple[float, float, float]:
    """Eval-mode (mse, mean psnr, mean ssim) over ``pairs``."""
    ssim_cfg = ssim_cfg or SsimConfig()
    total = 0.0
    psnrs: List[float] = []
    ssims: List[float] = []
    for noisy, clean in iter_pair_batches(pairs, batch_size, None, shuffle=False, augmented=False):
        pred = forward(params, spec, Tensor(noisy), EVAL)
        total += mse_loss(pred, Tensor(clean)).item() * len(noisy)
        for out, ref in zip(pred.data, clean):
            psnrs.append(psnr(ref, out))
            ssims.append(ssim(ref, out, ssim_cfg))
    return total / len(pairs), float(np.mean(psnrs)), float(np.mean(ssims))


def train_epoch(params: ModelParams, spec: ModelSpec, state: TrainState, cfg: TrainConfig,
                train_set: Sequence[SamplePair], val_set: Sequence[SamplePair],
                checkpoint_path: Optional[str] = None,
                ssim_cfg: Optional[SsimConfig] = None) -> EpochReport:
    if not train_set:
        raise EmptyBatchError("training set is empty")
    lr = lr_schedule(state.epoch, cfg)
    train_spec = replace(spec, dropout_rate=cfg.dropout_rate)
    total = 0.0
    try:
        for noisy, clean in iter_pair_batches(train_set, cfg.batch_size, state.rng, shuffle=True,
                                              augmented=cfg.augment):
            tape = GradTape()
            pred = forward(params, train_spec, Tensor(noisy), TRAIN, tape, state.rng)
            loss = mse_loss(pred, Tensor(clean), tape)
            gradients = backward(tape, loss)
            grads = {name: grad.data for name, _, grad in parameter_iter(params, gradients) if grad is not None}
            adam_step(params, grads, state, lr, cfg)
            total += loss.item() * len(noisy)
            logger.debug(f"epoch {state.epoch + 1} step {state.step}: batch mse {loss.item():.6f}")
        train_mse = total / len(train_set)
        if not math.isfinite(train_mse):
            raise NumericError(f"training loss became {train_mse}")

        if val_set:
            val_mse, val_psnr, val_ssim = evaluate_loss(params, spec, val_set, cfg.batch_size, ssim_cfg)
        else:
            logger.warning("Validation split is empty; monitoring the training loss instead")
            val_mse, val_psnr, val_ssim = train_mse, math.nan, math.nan
    except NonFiniteError as exc:
        raise NumericError(f"epoch {state.epoch + 1} aborted: {exc}") from exc

    state.epoch += 1
    improved, stop = update_early_stopping(state, cfg, val_mse, train_mse)
    if improved and checkpoint_path:
        save_checkpoint(checkpoint_path, params, spec, state)
    return EpochReport(state.epoch, lr, train_mse, val_mse, val_psnr, val_ssim, improved, stop)


def append_log_row(log_path: str, report: EpochReport) -> None:
    frame = pd.DataFrame([report.log_row()], columns=LOG_COLUMNS)
    frame.to_csv(log_path, mode="a", header=not os.path.exists(log_path), index=False)


def truncate_log(log_path: str, epoch: int) -> None:
    """Drop log rows after ``epoch`` so a resumed run does not repeat epoch numbers."""
    if not os.path.exists(log_path):
        return
    frame = pd.read_csv(log_path)
    kept = frame[frame["epoch"] <= epoch]
    if len(kept) < len(frame):
        logger.info(f"Dropping {len(frame) - len(kept)} log rows after epoch {epoch} from {log_path}")
    kept.to_csv(log_path, index=False)


def fit(params: ModelParams, spec: ModelSpec, cfg: TrainConfig, train_set: Sequence[SamplePair],
        val_set: Sequence[SamplePair], checkpoint_path: Optional[str] = None,
        log_path: Optional[str] = None, state: Optional[TrainState] = None,
        ssim_cfg: Optional[SsimConfig] = None) -> Tuple[List[EpochReport], TrainState]:
    """Run epochs until early stopping fires or ``cfg.max_epochs`` is reached."""
    cfg.validate()
    state = state or TrainState.initial(params, cfg)
    reports: List[EpochReport] = []
    logger.info(
        f"Training on {len(train_set)} pairs, validating on {len(val_set)}; "
        f"starting at epoch {state.epoch + 1} of at most {cfg.max_epochs}"
    )
    while state.epoch < cfg.max_epochs:
        report = train_epoch(params, spec, state, cfg, train_set, val_set, checkpoint_path, ssim_cfg)
        reports.append(report)
        if log_path:
            append_log_row(log_path, report)
        logger.info(
            f"epoch {report.epoch:3d}  lr {report.lr:.2e}  train {report.train_mse:.6f}  "
            f"val {report.val_mse:.6f}  psnr {report.val_psnr:.2f}  ssim {report.val_ssim:.4f}"
            f"{'  *' if report.improved else ''}"
        )
        if report.stopped:
            logger.info(
                f"Early stopping after epoch {report.epoch}: no improvement for {state.epochs_since_improvement} epochs"
            )
            break
    return reports, state


__all__ = [
    "ConfigError",
    "NumericError",
    "EmptyBatchError",
    "TrainConfig",
    "TrainState",
    "EpochReport",
    "lr_schedule",
    "adam_step",
    "update_early_stopping",
    "evaluate_loss",
    "train_epoch",
    "fit",
    "append_log_row",
    "truncate_log",
]
