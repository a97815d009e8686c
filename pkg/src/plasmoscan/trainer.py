"""Dataset handling, Adam optimization, and metric evaluation.

Training follows the screening setup: binary cross-entropy on a sigmoid
head, Adam at learning rate 1e-4 for up to 30 epochs, early stop once
validation accuracy exceeds 98%, and learning-rate halving when training
accuracy plateaus.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DatasetError, DimensionError, ParameterError, TrainingError
from .imgproc import PreprocessConfig, build_input_tensor, decode_image
from .netzoo import predict_batched
from .tensor_core import LayerGraph, Tensor

log = logging.getLogger(__name__)

POSITIVE_DIR = "Parasitized"
NEGATIVE_DIR = "Uninfected"
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class Dataset:
    """Labeled image paths; label 1 = parasitized, 0 = uninfected."""

    items: list[tuple[Path, int]]
    skipped: int = 0

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for _, label in self.items:
            counts[label] += 1
        return counts

    def __len__(self) -> int:
        return len(self.items)


def load_dataset(root) -> Dataset:
    """Enumerate `Parasitized/` and `Uninfected/` folders in sorted order.

    Unreadable files are skipped with a warning and counted in `skipped`.
    """
    root = Path(root)
    items: list[tuple[Path, int]] = []
    skipped = 0
    for dirname, label in ((POSITIVE_DIR, 1), (NEGATIVE_DIR, 0)):
        folder = root / dirname
        if not folder.is_dir():
            raise DatasetError(f"missing class folder {folder}")
        count = 0
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in _IMAGE_SUFFIXES or not path.is_file():
                continue
            try:
                with PILImage.open(path) as im:
                    im.verify()
            except Exception as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            items.append((path, label))
            count += 1
        if count == 0:
            raise DatasetError(f"class folder {folder} has no readable images")
    return Dataset(items=items, skipped=skipped)


def split_dataset(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified shuffle split; |train| = round(ratio * |d|) with class
    proportions preserved within one item."""
    if not 0 < ratio < 1:
        raise ParameterError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[tuple[Path, int]]] = {0: [], 1: []}
    for item in dataset.items:
        by_class[item[1]].append(item)

    total_target = int(np.floor(ratio * len(dataset) + 0.5))
    base = {c: int(np.floor(ratio * len(v))) for c, v in by_class.items()}
    remainder = total_target - sum(base.values())
    fractions = sorted(by_class, key=lambda c: (ratio * len(by_class[c])) % 1.0, reverse=True)
    for c in fractions:
        if remainder <= 0:
            break
        base[c] += 1
        remainder -= 1

    train_items: list[tuple[Path, int]] = []
    val_items: list[tuple[Path, int]] = []
    for c, members in by_class.items():
        order = rng.permutation(len(members))
        n_train = base[c]
        if n_train == 0 or n_train == len(members):
            raise DatasetError(
                f"split ratio {ratio} empties class {c} on one side "
                f"({len(members)} items, {n_train} to train)")
        train_items.extend(members[i] for i in order[:n_train])
        val_items.extend(members[i] for i in order[n_train:])
    return Dataset(items=train_items), Dataset(items=val_items)


def preload(dataset: Dataset, preprocess: PreprocessConfig) -> tuple[np.ndarray, np.ndarray]:
    """Decode and preprocess every item into a stacked input array."""
    tensors = []
    labels = []
    for path, label in dataset.items:
        img = decode_image(path.read_bytes())
        tensors.append(build_input_tensor(img, preprocess).data[0])
        labels.append(label)
    if not tensors:
        raise DatasetError("dataset is empty")
    return np.stack(tensors), np.array(labels, dtype=np.float32)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict, AdamState]:
    """One Adam update with bias correction; returns new params and state."""
    t = state.t + 1
    updated = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {key} shape {p.shape}")
        m = beta1 * state.m[key] + (1 - beta1) * g
        v = beta2 * state.v[key] + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        updated[key] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[key] = m
        state.v[key] = v
    state.t = t
    return updated, state


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_defined: bool = True

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "tp": self.tp, "fp": self.fp,
                "fn": self.fn, "tn": self.tn,
                "precision_defined": self.precision_defined}


def metrics_from_probs(probs: np.ndarray, labels: np.ndarray,
                       threshold: float = 0.5) -> Metrics:
    preds = probs >= threshold
    actual = labels >= 0.5
    tp = int(np.sum(preds & actual))
    fp = int(np.sum(preds & ~actual))
    fn = int(np.sum(~preds & actual))
    tn = int(np.sum(~preds & ~actual))
    n = max(1, tp + fp + fn + tn)
    precision_defined = (tp + fp) > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    return Metrics(accuracy=(tp + tn) / n, precision=precision, recall=recall,
                   tp=tp, fp=fp, fn=fn, tn=tn, precision_defined=precision_defined)


def evaluate_metrics(model: LayerGraph, inputs: np.ndarray, labels: np.ndarray,
                     threshold: float = 0.5) -> Metrics:
    """Accuracy/precision/recall with parasitized as the positive class."""
    return metrics_from_probs(predict_batched(model, inputs), labels, threshold)


def evaluate_dataset(model: LayerGraph, dataset: Dataset,
                     preprocess: PreprocessConfig, threshold: float = 0.5) -> Metrics:
    inputs, labels = preload(dataset, preprocess)
    return evaluate_metrics(model, inputs, labels, threshold)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    early_stop_val_acc: float = 0.98
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    plateau_monitor: str = "train_acc"  # or "val_acc"
    improvement_eps: float = 1e-4
    split_ratio: float = 0.8
    seed: int = 0
    augment_flips: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be > 0")
        if not 0 < self.split_ratio < 1:
            raise ParameterError("split ratio must be in (0, 1)")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.plateau_monitor not in ("train_acc", "val_acc"):
            raise ParameterError("plateau monitor must be train_acc or val_acc")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    val_precision: float
    val_recall: float
    lr: float


_PROB_EPS = 1e-7


def _as_arrays(part, preprocess):
    if isinstance(part, Dataset):
        return preload(part, preprocess or PreprocessConfig())
    inputs, labels = part
    return np.asarray(inputs, dtype=np.float32), np.asarray(labels, dtype=np.float32)


def train(model: LayerGraph, data, config: TrainConfig,
          preprocess: PreprocessConfig | None = None,
          ) -> tuple[LayerGraph, list[EpochRecord]]:
    """Minimize binary cross-entropy on (train, val) data.

    `data` is a pair of Datasets or a pair of (inputs, labels) array tuples.
    Stops early once validation accuracy exceeds the configured bar; halves
    the learning rate when the monitored accuracy stops improving.
    """
    out_node = model.nodes[-1]
    if out_node.kind != "activation" or out_node.attrs.get("mode") != "sigmoid":
        raise ParameterError("model head must end in a sigmoid activation")

    train_x, train_y = _as_arrays(data[0], preprocess)
    val_x, val_y = _as_arrays(data[1], preprocess)

    rng = np.random.default_rng(config.seed)
    params = {k: t.data for k, t in model.trainable_parameters().items()}
    state = AdamState.for_params(params)

    records: list[EpochRecord] = []
    lr = config.learning_rate
    best_monitored = -np.inf
    stall = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_x))
        loss_sum = 0.0
        correct = 0
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = train_x[idx]
            yb = train_y[idx]
            if config.augment_flips:
                xb = xb.copy()
                flip_h = rng.random(len(idx)) < 0.5
                flip_v = rng.random(len(idx)) < 0.5
                xb[flip_h] = xb[flip_h][:, :, :, ::-1]
                xb[flip_v] = xb[flip_v][:, :, ::-1, :]

            ctx = model.forward(xb, mode="train")
            probs = ctx.output[:, 0]
            pc = np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)
            losses = -(yb * np.log(pc) + (1 - yb) * np.log(1 - pc))
            loss = float(losses.mean())
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {batch_index}",
                    epoch=epoch, batch=batch_index)
            loss_sum += loss * len(idx)
            correct += int(np.sum((probs >= 0.5) == (yb >= 0.5)))

            dprobs = ((pc - yb) / (pc * (1 - pc)) / len(idx)).astype(np.float32)
            grads = model.backward(ctx, dprobs[:, None])
            params = {k: t.data for k, t in model.trainable_parameters().items()}
            updated, state = adam_step(params, grads.param_grads, state, lr,
                                       config.beta1, config.beta2, config.epsilon)
            for (node, pname), arr in updated.items():
                model.set_parameter(node, pname, Tensor(arr.astype(np.float32, copy=False)))

        train_loss = loss_sum / len(train_x)
        train_acc = correct / len(train_x)
        val_metrics = evaluate_metrics(model, val_x, val_y)
        records.append(EpochRecord(
            epoch=epoch, train_loss=train_loss, train_acc=train_acc,
            val_acc=val_metrics.accuracy, val_precision=val_metrics.precision,
            val_recall=val_metrics.recall, lr=lr))

        if val_metrics.accuracy > config.early_stop_val_acc:
            break

        monitored = train_acc if config.plateau_monitor == "train_acc" else val_metrics.accuracy
        if monitored > best_monitored + config.improvement_eps:
            best_monitored = monitored
            stall = 0
        else:
            stall += 1
            if stall >= config.plateau_patience:
                lr = max(lr * config.plateau_factor, config.min_lr)
                stall = 0

    return model, records


def export_history_csv(records: list[EpochRecord], path) -> None:
    """Training history as CSV: epoch, loss, acc, val_acc, val_prec, val_rec, lr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "acc", "val_acc", "val_prec", "val_rec", "lr"])
        for r in records:
            writer.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_acc:.6f}",
                             f"{r.val_acc:.6f}", f"{r.val_precision:.6f}",
                             f"{r.val_recall:.6f}", f"{r.lr:.8g}"])
