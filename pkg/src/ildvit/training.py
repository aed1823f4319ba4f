"""Splits, optimizers, the training loop and segment-level evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dsp import Label
from .metrics import ConfusionMatrix, compute_metrics, roc_auc
from .model import DropoutStream, forward, patchify, predict

logger = logging.getLogger(__name__)

PARTITIONS = ("train", "val", "test")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- splits

def split_subject_level(manifest, fractions=(0.7, 0.1, 0.2), seed=0, segment_counts=None):
    """Partition subjects (never recordings) into train/val/test manifests.

    Within each class, subjects are shuffled, one is placed in every
    partition with a non-zero fraction, and the rest go greedily to the
    partition furthest below its segment-count target. ``segment_counts``
    maps recording_id -> segments; by default each recording counts once.
    """
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    active = [i for i in range(3) if fractions[i] > 0]
    rng = np.random.default_rng(seed)
    weight = {}
    for e in manifest:
        w = 1 if segment_counts is None else segment_counts.get(e.recording_id, 0)
        weight[e.subject_id] = weight.get(e.subject_id, 0) + w

    subjects = manifest.subjects()
    assigned = [[], [], []]
    for label in (Label.HEALTHY, Label.ILD):
        subs = sorted(s for s, lab in subjects.items() if lab is label)
        if not subs:
            continue
        if len(subs) < len(active):
            raise ValueError(f"class {label.display} has {len(subs)} subjects, "
                             f"need at least {len(active)} for a subject-level split")
        subs = [subs[i] for i in rng.permutation(len(subs))]
        target = fractions * sum(weight[s] for s in subs)
        load = np.zeros(3)
        for i, s in enumerate(subs):
            p = active[i] if i < len(active) else max(active, key=lambda j: (target[j] - load[j], -j))
            load[p] += weight[s]
            assigned[p].append(s)
    return tuple(manifest.select_subjects(a) for a in assigned)


def kfold_random_split(n_segments, folds=5, seed=0):
    """Shuffled near-equal folds of segment indices (sizes differ by at most one)."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n_segments < folds:
        raise ValueError(f"{n_segments} segments cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n_segments)
    return [np.sort(f) for f in np.array_split(perm, folds)]


# ---------------------------------------------------------------- loss and optimizers

def one_hot(labels, n_classes=2, dtype=np.float64):
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out


def bce_loss(probs, target, clamp=1e-7):
    """Mean binary cross-entropy over samples and output units."""
    p = np.asarray(probs, dtype=np.float64)
    return ad.binary_cross_entropy(ad.Tensor(p), np.asarray(target, dtype=np.float64), clamp).item()


class Adam:
    def __init__(self, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.arrays[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(m.dtype)


class SGD:
    def __init__(self, arrays, lr=1e-3):
        self.arrays = arrays
        self.lr = lr

    def step(self, grads):
        for k, g in grads.items():
            if g is not None:
                self.arrays[k] -= self.lr * g


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: object          # best-validation-accuracy parameters
    final_params: object
    history: list = field(default_factory=list)
    best_epoch: int = 0


def _batch_loss_acc(params, images, labels, batch_size=64):
    if len(labels) == 0:
        return float("nan"), float("nan")
    probs, _, _ = predict(params, images.astype(params.dtype, copy=False), batch_size)
    loss = bce_loss(probs, one_hot(labels))
    acc = float(np.mean(np.argmax(probs, axis=1) == labels))
    return loss, acc


def train(params, train_set, val_set=None, epochs=200, lr=1e-3, batch_size=64, seed=0,
          optimizer="adam", on_epoch=None):
    """Mini-batch training; keeps the parameters with the best validation accuracy.

    Batch order is drawn from (seed, epoch) and dropout masks from
    (seed, step, site), so a fixed seed reproduces the run exactly.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    params = params.copy()
    cfg = params.config
    dtype = params.dtype
    opt = Adam(params.arrays, lr) if optimizer == "adam" else SGD(params.arrays, lr)
    history = []
    best_score, best_params, best_epoch = (-np.inf, -np.inf), params.copy(), 0
    step = 0
    n = len(train_set)
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            x = patchify(train_set.images[idx].astype(dtype, copy=False), cfg.patch_size)
            y = one_hot(train_set.labels[idx], cfg.n_classes, dtype)
            tensors = params.tensors(requires_grad=True)
            with ad.Tape() as tape:
                out = forward(tensors, x, cfg, training=True, stream=DropoutStream(seed, step))
                loss = ad.binary_cross_entropy(out.probs, y)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            ad.backward(loss, tape)
            opt.step({k: t.grad for k, t in tensors.items()})
            total_loss += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(out.probs.data, axis=1) == train_set.labels[idx]))
            step += 1
        row = {"epoch": epoch, "train_loss": total_loss / n, "train_acc": correct / n}
        if val_set is not None and len(val_set):
            row["val_loss"], row["val_acc"] = _batch_loss_acc(params, val_set.images, val_set.labels, batch_size)
        else:
            row["val_loss"], row["val_acc"] = float("nan"), float("nan")
        history.append(row)
        logger.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch,
                    row["train_loss"], row["train_acc"], row["val_loss"], row["val_acc"])
        # rank by accuracy, then by lower loss, so a plateau at 100% keeps improving
        if np.isfinite(row["val_acc"]):
            score = (row["val_acc"], -row["val_loss"])
        else:
            score = (row["train_acc"], -row["train_loss"])
        if score > best_score:
            best_score, best_params, best_epoch = score, params.copy(), epoch
        if on_epoch is not None:
            on_epoch(row)
    if epochs == 0:
        best_params = params.copy()
    return TrainResult(best_params, params, history, best_epoch)


HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def write_history_csv(path, history):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    probs: np.ndarray        # (N, 2) sigmoid outputs, column 1 = ILD
    predictions: np.ndarray  # arg-max class per segment
    labels: np.ndarray
    embeddings: np.ndarray
    recording_ids: np.ndarray

    @property
    def scores(self):
        return self.probs[:, 1]

    def report(self):
        rep = compute_metrics(self.confusion)
        for cls, col in (("ILD", 1), ("Healthy", 0)):
            positive = self.labels == col
            if positive.any() and (~positive).any():
                rep.auc[cls] = roc_auc(self.probs[:, col], positive)[3]
        return rep

    def recording_level(self):
        """Majority vote per recording (ties broken by mean ILD score); not a segment-level metric."""
        truth, pred = [], []
        for rid in dict.fromkeys(self.recording_ids.tolist()):
            m = self.recording_ids == rid
            votes = self.predictions[m].mean()
            p = votes > 0.5 if votes != 0.5 else self.probs[m, 1].mean() > self.probs[m, 0].mean()
            truth.append(self.labels[m][0])
            pred.append(int(p))
        return ConfusionMatrix.from_predictions(truth, pred)


def evaluate(params, dataset, batch_size=64):
    if len(dataset) == 0:
        raise ValueError("empty test set")
    probs, emb, _ = predict(params, dataset.images.astype(params.dtype, copy=False), batch_size)
    pred = np.argmax(probs, axis=1)
    cm = ConfusionMatrix.from_predictions(dataset.labels == 1, pred == 1)
    return Evaluation(cm, probs, pred, dataset.labels, emb, dataset.recording_ids)
