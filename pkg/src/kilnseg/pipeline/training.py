"""Mini-batch training loops for the segmenters, the temporal head and the discriminator."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import ops
from ..errors import ConfigError, NonFiniteError
from ..losses import binary_cross_entropy, class_frequencies, class_weights, get_loss
from ..metrics import SLAG, confusion_matrix, iou_class, ConfusionMatrix
from ..models.base import ModelGraph, to_tensor
from ..models.convlstm import PSPNetLSTM
from ..occlusion import OcclusionDiscriminator
from ..optim import Adam
from ..tensor import Tape, Tensor

WEIGHTINGS = ("none", "isv", "isrv")


@dataclass
class TrainResult:
    model: ModelGraph
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("-inf")


def loss_weights(masks: np.ndarray, weighting: str, num_classes: int = 4) -> Optional[np.ndarray]:
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")
    if weighting == "none":
        return None
    return class_weights(class_frequencies(masks, num_classes), weighting).weights


def _snapshot(model: ModelGraph) -> dict:
    return {k: v.copy() for k, v in model.state_arrays().items()}


def _restore(model: ModelGraph, snap: dict) -> None:
    for name, p in model.params.items():
        p.data = snap[name].copy()
    for name, s in model.stats.items():
        s.mean = snap[name + ".running_mean"].copy()
        s.var = snap[name + ".running_var"].copy()


def _write_history(path: Optional[Path], history: list) -> None:
    if path is None or not history:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def fit(
    model: ModelGraph,
    n_train: int,
    step_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
    validate: Callable[[], float],
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    history_csv: Optional[Path] = None,
    time_budget: Optional[float] = None,
    metric_name: str = "val_slag_iou",
) -> TrainResult:
    """Generic loop: shuffle, Adam step per batch, validate per epoch, keep the best epoch.

    ``step_loss(indices, rng)`` builds the scalar loss for one batch under
    the active tape. ``validate()`` returns the model-selection score.
    """
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    params = model.trainable()
    result = TrainResult(model)
    best = None
    started = time.process_time()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n_train, batch_size)):
            idx = order[start : start + batch_size]
            model.zero_grad()
            with Tape() as tape:
                loss = step_loss(idx, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            tape.backward(loss)
            opt.step(params)
            total += value * len(idx)
            count += len(idx)
        score = float(validate())
        result.history.append({"epoch": epoch, "train_loss": round(total / count, 6),
                               metric_name: round(score, 6)})
        if score > result.best_score:
            result.best_score, result.best_epoch = score, epoch
            best = _snapshot(model)
        if time_budget is not None and time.process_time() - started > time_budget:
            break
    _restore(model, best)
    model.zero_grad()
    _write_history(history_csv, result.history)
    return result


# ------------------------------------------------------------------ inference


def predict_probs(model: ModelGraph, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = [model.forward(to_tensor(images[i : i + batch_size])).data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def predict_masks(model: ModelGraph, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return predict_probs(model, images, batch_size).argmax(axis=1).astype(np.uint8)


def trunk_features(model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Frozen-trunk activations (inference-mode batch norm)."""
    out = [model.features(to_tensor(images[i : i + batch_size])).data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def predict_pair_masks_from_features(model: PSPNetLSTM, prev_feat: np.ndarray, cur_feat: np.ndarray,
                                     batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(cur_feat), batch_size):
        probs = model.forward_features(Tensor(prev_feat[i : i + batch_size]),
                                       Tensor(cur_feat[i : i + batch_size]))
        out.append(probs.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def predict_pair_masks(model: PSPNetLSTM, prev: np.ndarray, cur: np.ndarray, batch_size: int = 32):
    return predict_pair_masks_from_features(
        model, trunk_features(model, prev, batch_size), trunk_features(model, cur, batch_size), batch_size)


def slag_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    cm = ConfusionMatrix.empty(4)
    for p, t in zip(pred, truth):
        cm = cm + confusion_matrix(p, t)
    return iou_class(cm, SLAG)


# ------------------------------------------------------------------- trainers


def train_segmenter(model: ModelGraph, train_images, train_masks, val_images, val_masks, *,
                    loss: str = "ce", weighting: str = "isrv", epochs: int = 30, lr: float = 1e-3,
                    batch_size: int = 16, seed: int = 0, history_csv=None,
                    time_budget: Optional[float] = None) -> TrainResult:
    """Framewise U-Net or PSPNet training; selection by validation slag IoU."""
    loss_fn = get_loss(loss)
    weights = loss_weights(train_masks, weighting, model.config.num_classes)
    images = np.asarray(train_images)
    masks = np.asarray(train_masks)

    def step_loss(idx, rng):
        probs = model.forward(to_tensor(images[idx]), training=True)
        return loss_fn(probs, masks[idx], weights)

    def validate():
        return slag_iou(predict_masks(model, val_images), val_masks)

    return fit(model, len(images), step_loss, validate, epochs, lr, batch_size, seed,
               history_csv, time_budget)


def train_temporal(model: PSPNetLSTM, train_prev, train_cur, train_masks, val_prev, val_cur, val_masks, *,
                   loss: str = "ce", weighting: str = "isrv", epochs: int = 30, lr: float = 1e-3,
                   batch_size: int = 16, seed: int = 0, history_csv=None,
                   time_budget: Optional[float] = None) -> TrainResult:
    """Train only the convLSTM head; the frozen trunk's features are computed once."""
    trainable = set(model.trainable())
    if any(name.startswith(("backbone.", "ppm.", "head.")) for name in trainable):
        raise ConfigError("temporal training expects a frozen trunk")
    loss_fn = get_loss(loss)
    weights = loss_weights(train_masks, weighting, model.config.num_classes)
    fp, fc = trunk_features(model, train_prev), trunk_features(model, train_cur)
    vp, vc = trunk_features(model, val_prev), trunk_features(model, val_cur)
    masks = np.asarray(train_masks)

    def step_loss(idx, rng):
        probs = model.forward_features(Tensor(fp[idx]), Tensor(fc[idx]))
        return loss_fn(probs, masks[idx], weights)

    def validate():
        return slag_iou(predict_pair_masks_from_features(model, vp, vc), val_masks)

    return fit(model, len(fc), step_loss, validate, epochs, lr, batch_size, seed,
               history_csv, time_budget)


def occlusion_accuracy(model: OcclusionDiscriminator, images, labels, threshold: float = 0.5) -> float:
    """Balanced accuracy, so a skewed split cannot favour a constant verdict."""
    from ..occlusion import occlusion_probabilities

    pred = occlusion_probabilities(model, images) >= threshold
    labels = np.asarray(labels, dtype=bool)
    return 0.5 * (np.mean(pred[labels]) + np.mean(~pred[~labels]))


def occlusion_fbeta(model: OcclusionDiscriminator, images, labels, beta: float = 0.5,
                    threshold: float = 0.5) -> float:
    """F-beta score with "occluded" positive; beta < 1 weighs precision higher."""
    from ..occlusion import occlusion_probabilities

    pred = occlusion_probabilities(model, images) >= threshold
    labels = np.asarray(labels, dtype=bool)
    tp = np.sum(pred & labels)
    if tp == 0:
        return 0.0
    precision, recall = tp / np.sum(pred), tp / np.sum(labels)
    b2 = beta * beta
    return float((1 + b2) * precision * recall / (b2 * precision + recall))


def train_discriminator(model: OcclusionDiscriminator, train_images, train_labels, val_images, val_labels, *,
                        epochs: int = 20, lr: float = 1e-3, batch_size: int = 16, seed: int = 0,
                        history_csv=None, time_budget: Optional[float] = None,
                        negative_weight: float = 3.0, beta: float = 0.5) -> TrainResult:
    """BCE with up-weighted negatives; selection by validation F-beta.

    Both knobs lean toward precision: most frames are clean, and a gate that
    raises false alarms thins out the monitored series.
    """
    images = np.asarray(train_images)
    labels = np.asarray(train_labels, dtype=np.float64)

    def step_loss(idx, rng):
        p = model.forward(to_tensor(images[idx]), training=True, rng=rng)
        return binary_cross_entropy(p, labels[idx], negative_weight)

    def validate():
        return occlusion_fbeta(model, val_images, val_labels, beta)

    return fit(model, len(images), step_loss, validate, epochs, lr, batch_size, seed,
               history_csv, time_budget, metric_name="val_fbeta")
