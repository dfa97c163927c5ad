"""Training loop for the recognition networks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import make_rng
from .errors import NonFiniteLoss
from .mlp import MlpParams, cross_entropy_and_grads, forward, init_params


@dataclass(frozen=True)
class TrainConfig:
    hidden_sizes: tuple[int, ...] = (128, 128)
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    weight_init_scale: float = 0.1
    activation: str = "relu"
    optimizer: str = "adam"  # "adam" or "sgd-momentum"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    heldout_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("hyperparameters must be positive")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: MlpParams):
        self.cfg = cfg
        self.t = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]

    def step(self, params: MlpParams, grads) -> None:
        cfg = self.cfg
        self.t += 1
        for k, (gw, gb) in enumerate(grads):
            w, b = params.layers[k]
            mw, mb = self.m[k]
            if cfg.optimizer == "sgd-momentum":
                mw *= cfg.momentum
                mw += gw
                mb *= cfg.momentum
                mb += gb
                w -= cfg.learning_rate * mw
                b -= cfg.learning_rate * mb
            else:
                vw, vb = self.v[k]
                mw *= cfg.adam_beta1
                mw += (1 - cfg.adam_beta1) * gw
                mb *= cfg.adam_beta1
                mb += (1 - cfg.adam_beta1) * gb
                vw *= cfg.adam_beta2
                vw += (1 - cfg.adam_beta2) * gw * gw
                vb *= cfg.adam_beta2
                vb += (1 - cfg.adam_beta2) * gb * gb
                bias1 = 1 - cfg.adam_beta1**self.t
                bias2 = 1 - cfg.adam_beta2**self.t
                w -= cfg.learning_rate * (mw / bias1) / (np.sqrt(vw / bias2) + cfg.adam_eps)
                b -= cfg.learning_rate * (mb / bias1) / (np.sqrt(vb / bias2) + cfg.adam_eps)


@dataclass
class TrainResult:
    params: MlpParams
    curve: list[dict[str, float]] = field(default_factory=list)

    def write_curve(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "heldout_acc"])
            for row in self.curve:
                writer.writerow(
                    [int(row["epoch"]), f"{row['loss']:.10g}", f"{row['heldout_acc']:.10g}"]
                )


def train_recognition(
    features: np.ndarray,
    targets: np.ndarray,
    n_classes: int,
    cfg: TrainConfig,
    params: Optional[MlpParams] = None,
) -> TrainResult:
    """Fit a categorical recognition network by minibatch cross-entropy.

    The dataset is split deterministically into train/heldout parts from
    cfg.seed; per-epoch mean training loss and heldout top-1 accuracy are
    logged.  Identical (features, targets, cfg) produce identical final
    parameters.  Raises NonFiniteLoss if the loss diverges.
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=int)
    if features.ndim != 2 or features.shape[0] != targets.shape[0] or features.shape[0] == 0:
        raise ValueError("features must be (n, d) matching targets (n,)")
    n = features.shape[0]
    rng = make_rng("train", cfg.seed)
    if params is None:
        dims = [features.shape[1], *cfg.hidden_sizes, n_classes]
        params = init_params(dims, rng, cfg.activation, cfg.weight_init_scale)
    else:
        params = params.copy()

    order = rng.permutation(n)
    n_held = min(n - 1, int(round(n * cfg.heldout_fraction)))
    held_idx = order[:n_held]
    train_idx = order[n_held:]

    opt = _Optimizer(cfg, params)
    result = TrainResult(params)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train_idx))
        epoch_losses = []
        for start in range(0, len(perm), cfg.batch_size):
            batch = train_idx[perm[start : start + cfg.batch_size]]
            loss, grads = cross_entropy_and_grads(params, features[batch], targets[batch])
            if not math.isfinite(loss):
                raise NonFiniteLoss(
                    f"loss {loss} at epoch {epoch}, batch {start // cfg.batch_size}; "
                    f"lr={cfg.learning_rate}, batch_size={cfg.batch_size}"
                )
            epoch_losses.append(loss)
            opt.step(params, grads)
        if n_held > 0:
            logits = forward(params, features[held_idx])
            acc = float(np.mean(np.argmax(logits, axis=1) == targets[held_idx]))
        else:
            acc = float("nan")
        result.curve.append(
            {"epoch": epoch, "loss": float(np.mean(epoch_losses)), "heldout_acc": acc}
        )
    return result


def top1_accuracy(params: MlpParams, features: np.ndarray, targets: np.ndarray) -> float:
    logits = forward(params, np.asarray(features, dtype=float))
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(targets, dtype=int)))
