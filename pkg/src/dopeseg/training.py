"""Dice-loss training loop with Adam, plateau early stopping and evaluation.

Training is deterministic for a fixed config seed: epoch shuffles come from
one numpy generator and the forward/backward path has no other randomness on
CPU. The returned model carries the weights of the epoch with minimal
validation loss.
"""

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest
from .hashing import derive_seed
from .metrics import SliceMetrics, dsc as dsc_metric, iou as iou_metric
from .models import SegmentationModel, binarize, predict


class TrainingDivergedError(RuntimeError):
    """Raised when the loss turns non-finite (bad learning rate or degenerate data)."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 50
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    early_stop_patience: int = 7
    early_stop_min_delta: float = 1e-4
    loss: str = "dice"
    threshold: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.early_stop_patience < self.max_epochs:
            raise ValueError("early_stop_patience must be in [0, max_epochs)")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "dice":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "early_stop_patience": self.early_stop_patience,
            "early_stop_min_delta": self.early_stop_min_delta,
            "loss": self.loss,
            "threshold": self.threshold,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


class PlateauStopper:
    """Signals a stop when a monitored loss stops improving by min_delta."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.wait = 0

    def update(self, value: float) -> bool:
        """Record one epoch's loss; returns True when training should stop."""
        if value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        return self.patience > 0 and self.wait >= self.patience


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_iou: list[float] = field(default_factory=list)
    stopped_epoch: int = 0  # 1-based index of the last epoch run
    best_epoch: int = 0  # 1-based epoch with minimal validation loss

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_iou"])
            for i, (tl, vl, vi) in enumerate(zip(self.train_loss, self.val_loss, self.val_iou), 1):
                writer.writerow([i, f"{tl:.6f}", f"{vl:.6f}", f"{vi:.6f}"])
        return path


def dice_loss(pred, target, smooth: float = 1.0) -> torch.Tensor:
    """Soft dice loss, per sample then averaged over the batch.

    loss_i = 1 - (2 * sum(p*t) + smooth) / (sum(p) + sum(t) + smooth),
    with sums over all pixels of sample i. Differentiable in ``pred``.
    """
    if smooth <= 0:
        raise ValueError("smooth must be > 0")
    pred = torch.as_tensor(pred, dtype=torch.float64 if not torch.is_tensor(pred) else None)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    flat_pred = pred.reshape(pred.shape[0], -1)
    flat_target = target.reshape(target.shape[0], -1)
    inter = (flat_pred * flat_target).sum(dim=1)
    denom = flat_pred.sum(dim=1) + flat_target.sum(dim=1)
    per_sample = 1.0 - (2.0 * inter + smooth) / (denom + smooth)
    return per_sample.mean()


def _stack(manifest: DatasetManifest) -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([e.sample.image for e in manifest.entries]).astype(np.float32)
    masks = np.stack([e.sample.mask for e in manifest.entries]).astype(np.float32)
    return torch.from_numpy(images).unsqueeze(1), torch.from_numpy(masks).unsqueeze(1)


def _mean_iou(pred_masks: np.ndarray, targets: np.ndarray) -> float:
    inter = np.logical_and(pred_masks, targets).sum(axis=(1, 2))
    union = np.logical_or(pred_masks, targets).sum(axis=(1, 2))
    with np.errstate(invalid="ignore"):
        per_slice = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return float(per_slice.mean())


def train(
    model: SegmentationModel,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    config: TrainConfig,
) -> tuple[SegmentationModel, TrainHistory]:
    """Fit with Adam until max_epochs or the validation loss plateaus.

    Stops once validation loss has not improved by ``early_stop_min_delta``
    for ``early_stop_patience`` consecutive epochs; the weights of the
    best-validation epoch are restored before returning.
    """
    config.validate()
    if not train_manifest.entries or not val_manifest.entries:
        raise ValueError("train and val manifests must be nonempty")
    overlap = train_manifest.patient_ids() & val_manifest.patient_ids()
    if overlap:
        raise ValueError(f"train/val patient overlap: {sorted(overlap)}")

    x_train, y_train = _stack(train_manifest)
    x_val, y_val = _stack(val_manifest)
    n = x_train.shape[0]
    rng = np.random.default_rng(derive_seed(config.seed, "epoch-shuffle"))
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )

    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    min_val = float("inf")
    stopper = PlateauStopper(config.early_stop_patience, config.early_stop_min_delta)

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            optimizer.zero_grad()
            loss = dice_loss(model(x_train[idx]), y_train[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}; "
                    "reduce the learning rate or check the data"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss) * len(idx)
        history.train_loss.append(epoch_loss / n)

        val_loss, val_iou = _validate(model, x_val, y_val, config)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.val_loss.append(val_loss)
        history.val_iou.append(val_iou)
        history.stopped_epoch = epoch

        if val_loss < min_val:
            min_val = val_loss
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if stopper.update(val_loss):
            break

    model.load_state_dict(best_state)
    return model, history


def _validate(model, x_val, y_val, config) -> tuple[float, float]:
    model.eval()
    losses = []
    preds = []
    with torch.no_grad():
        for start in range(0, x_val.shape[0], config.batch_size):
            xb, yb = x_val[start : start + config.batch_size], y_val[start : start + config.batch_size]
            out = model(xb)
            losses.append(float(dice_loss(out, yb)) * xb.shape[0])
            preds.append(out.squeeze(1).numpy())
    probs = np.concatenate(preds, axis=0)
    pred_masks = binarize(probs, config.threshold)
    return sum(losses) / x_val.shape[0], _mean_iou(pred_masks, y_val.squeeze(1).numpy())


def evaluate(model, manifest: DatasetManifest, threshold: float = 0.5) -> list[SliceMetrics]:
    """Per-slice DSC/IoU records for every manifest entry, in manifest order.

    ``model`` may be a trained network or any callable mapping a B×H×W image
    stack to probability maps (handy for stub oracles in tests).
    """
    if not manifest.entries:
        raise ValueError("cannot evaluate an empty manifest")
    images = np.stack([e.sample.image for e in manifest.entries]).astype(np.float32)
    if isinstance(model, torch.nn.Module):
        probs = predict(model, images)
    else:
        probs = np.asarray(model(images))
    pred_masks = binarize(probs, threshold)
    records = []
    for i, entry in enumerate(manifest.entries):
        records.append(
            SliceMetrics(
                patient_id=entry.patient_id,
                plane=entry.sample.plane,
                domain=entry.domain,
                slice_index=entry.sample.slice_index,
                dsc=dsc_metric(pred_masks[i], entry.sample.mask),
                iou=iou_metric(pred_masks[i], entry.sample.mask),
            )
        )
    return records
