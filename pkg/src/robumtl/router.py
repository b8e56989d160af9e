"""Perturbation router: a small depthwise-separable CNN with a softmax-gated
squeeze-and-excitation block, trained as a 6-way corruption classifier.

The router is evaluated once per batch; :meth:`DmlsNet.batch_vote` averages
per-image scores into a single routing decision.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import serialize
from . import tensor as T
from .errors import DimensionError, ValidationError
from .metrics import classifier_metrics, confusion_matrix, roc_points
from .perturb import ALL_KINDS, NUM_KINDS
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class DmlsNet:
    """conv(3→16) → dwsep(16→48) → dwsep(48→128) → GAP → SE → FC(128→64→n)."""

    def __init__(self, num_classes: int = NUM_KINDS, seed: int = 0, in_channels: int = 3,
                 stage_channels=(16, 48, 128), se_hidden: int = 64, fc_hidden: int = 64):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = stage_channels
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.invocations = 0
        self._count_lock = threading.Lock()

        def he(shape, fan_in):
            return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32))

        def zeros(n):
            return Tensor(np.zeros(n, dtype=np.float32))

        p = {}
        p["conv1.weight"] = he((c1, in_channels, 3, 3), in_channels * 9)
        p["conv1.bias"] = zeros(c1)
        p["dw2.weight"] = he((c1, 1, 3, 3), 9)
        p["dw2.bias"] = zeros(c1)
        p["pw2.weight"] = he((c2, c1, 1, 1), c1)
        p["pw2.bias"] = zeros(c2)
        p["dw3.weight"] = he((c2, 1, 3, 3), 9)
        p["dw3.bias"] = zeros(c2)
        p["pw3.weight"] = he((c3, c2, 1, 1), c2)
        p["pw3.bias"] = zeros(c3)
        p["se.w1"] = he((se_hidden, c3), c3)
        p["se.w2"] = Tensor(rng.normal(0.0, 0.02, (c3, se_hidden)).astype(np.float32))
        p["fc1.weight"] = he((fc_hidden, c3), c3)
        p["fc1.bias"] = zeros(fc_hidden)
        p["fc2.weight"] = Tensor(rng.normal(0.0, 0.05, (num_classes, fc_hidden)).astype(np.float32))
        p["fc2.bias"] = zeros(num_classes)
        self.params: dict[str, Tensor] = p

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def _bump(self):
        with self._count_lock:
            self.invocations += 1

    # -- forward ------------------------------------------------------------

    def features(self, x) -> Tensor:
        """Global descriptor F_global, shape (N, 128)."""
        p = self.params
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"router expects N×{self.in_channels}×H×W images, got {x.shape}")
        x = (x - 0.5) * 2.0
        h = T.maxpool2d(T.relu(T.conv2d(x, p["conv1.weight"], p["conv1.bias"], padding=1)))
        h = T.relu(T.depthwise_separable_conv(h, p["dw2.weight"], p["pw2.weight"], p["dw2.bias"], p["pw2.bias"]))
        h = T.maxpool2d(h)
        h = T.relu(T.depthwise_separable_conv(h, p["dw3.weight"], p["pw3.weight"], p["dw3.bias"], p["pw3.bias"]))
        g = T.adaptive_avgpool(h, 1)
        return T.reshape(g, (g.shape[0], g.shape[1]))

    def logits(self, x) -> Tensor:
        p = self.params
        _, weighted = se_block(self.features(x), p["se.w1"], p["se.w2"])
        h = T.relu(T.linear(weighted, p["fc1.weight"], p["fc1.bias"]))
        return T.linear(h, p["fc2.weight"], p["fc2.bias"])

    def _scores(self, images, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        out = [T.softmax(self.logits(images[i : i + batch_size]), axis=-1).data
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out).astype(np.float64)

    def forward(self, img) -> np.ndarray:
        """Score vector(s) over perturbation kinds; (n,) for one image, (N, n) for a batch."""
        self._bump()
        s = self._scores(img)
        return s[0] if np.asarray(img).ndim == 3 else s

    __call__ = forward

    def batch_vote(self, images, hard: bool = False) -> np.ndarray:
        """One routing decision for the batch: mean of per-image scores
        (or the histogram of per-image argmaxes when ``hard``), renormalized."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[0] == 0:
            raise ValidationError("batch_vote needs at least one image")
        self._bump()
        s = self._scores(images)
        if hard:
            votes = np.bincount(s.argmax(axis=1), minlength=self.num_classes).astype(np.float64)
            return votes / votes.sum()
        v = s.mean(axis=0)
        return v / v.sum()

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, path):
        meta = struct.pack("<I", self.num_classes)
        Path(path).write_bytes(serialize.encode_tensors(serialize.KIND_ROUTER, self.state_dict(), meta))

    @classmethod
    def load(cls, path) -> "DmlsNet":
        _, n, tensors = serialize.decode_tensors(
            Path(path).read_bytes(), serialize.KIND_ROUTER, lambda r: r.unpack("I", "class count")[0]
        )
        net = cls(num_classes=n)
        for k, v in tensors.items():
            if k not in net.params or net.params[k].shape != v.shape:
                raise ValidationError(f"router checkpoint tensor {k} does not fit the network")
            net.params[k] = Tensor(v)
        return net


def se_block(f_global: Tensor, w1: Tensor, w2: Tensor) -> tuple[Tensor, Tensor]:
    """Channel attention with a softmax gate: returns (e, F_global ⊙ e)."""
    if f_global.shape[-1] != w1.shape[1]:
        raise DimensionError(f"SE block: features {f_global.shape} vs W1 {w1.shape}")
    z = T.relu(T.linear(f_global, w1))
    e = T.softmax(T.linear(z, w2), axis=-1)
    return e, f_global * e


class SelectorLoss:
    """Mean negative log score of the true class, with clamped logs counted."""

    def __init__(self):
        self.clamped = 0

    def __call__(self, scores, labels) -> float:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if s.ndim != 2 or y.shape != (s.shape[0],):
            raise DimensionError(f"selector loss: scores {s.shape} vs labels {y.shape}")
        if y.min() < 0 or y.max() >= s.shape[1]:
            raise ValidationError("selector loss: label outside the class range")
        p = s[np.arange(len(y)), y]
        low = p < LOG_FLOOR
        self.clamped += int(low.sum())
        return float(-np.mean(np.log(np.maximum(p, LOG_FLOOR))))


def selector_loss(scores, labels) -> float:
    return SelectorLoss()(scores, labels)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RouterTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0
    target_accuracy: Optional[float] = None  # stop early once held-out accuracy reaches this


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Equal draws per class each epoch (the majority classes are subsampled)."""
    classes = np.unique(labels)
    per = min(int(np.count_nonzero(labels == c)) for c in classes)
    picks = [rng.permutation(np.flatnonzero(labels == c))[:per] for c in classes]
    order = np.stack(picks, axis=1).reshape(-1)  # interleave classes
    blocks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [blocks[i] for i in rng.permutation(len(blocks))]


def evaluate_router(net: DmlsNet, images: np.ndarray, labels: np.ndarray) -> dict:
    scores = net._scores(images)
    pred = scores.argmax(axis=1)
    conf = confusion_matrix(labels, pred, net.num_classes)
    out = classifier_metrics(conf)
    out["confusion"] = conf
    out["scores"] = scores
    out["loss"] = selector_loss(scores, labels)
    return out


def train_dmls(net: DmlsNet, train_images: np.ndarray, train_labels: np.ndarray,
               test_images: np.ndarray, test_labels: np.ndarray,
               hp: RouterTrainConfig = RouterTrainConfig()) -> dict:
    """Supervised training on labeled corruption kinds.

    Returns held-out metrics (accuracy, macro precision/recall/F1, confusion)
    plus the per-epoch training losses under ``history``.
    """
    from .train import fit

    present = set(np.unique(train_labels).tolist())
    missing = sorted(set(range(net.num_classes)) - present)
    if missing:
        raise ValidationError(f"router training set lacks classes {missing}")
    train_images = np.asarray(train_images, dtype=np.float32)

    def loss_fn(idx):
        return T.cross_entropy(net.logits(train_images[idx]), train_labels[idx])

    state: dict = {}

    def batches(epoch):
        return balanced_batches(train_labels, hp.batch_size, np.random.default_rng([hp.seed, epoch]))

    def after_epoch(epoch, _loss):
        if hp.target_accuracy is None and epoch < hp.epochs - 1:
            return False
        state["metrics"] = evaluate_router(net, test_images, test_labels)
        log.info("router epoch %d held-out accuracy %.4f", epoch, state["metrics"]["accuracy"])
        return hp.target_accuracy is not None and state["metrics"]["accuracy"] >= hp.target_accuracy

    history = fit(net.params, loss_fn, batches, hp.epochs, hp.lr, label="dmls", after_epoch=after_epoch)
    metrics = state.get("metrics") or evaluate_router(net, test_images, test_labels)
    metrics["history"] = history
    metrics["epochs_run"] = len(history)
    metrics["parameters"] = net.num_parameters()
    return metrics


def confusion_csv(confusion) -> str:
    """Rows are true kinds, columns predicted kinds."""
    c = np.asarray(confusion)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + [k.label for k in ALL_KINDS[: c.shape[1]]])
    for i, row in enumerate(c):
        w.writerow([ALL_KINDS[i].label] + [int(v) for v in row])
    return buf.getvalue()


def roc_csv(scores, labels, thresholds=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "threshold", "fpr", "tpr"])
    for c in range(np.asarray(scores).shape[1]):
        for t, fpr, tpr in roc_points(np.asarray(scores), np.asarray(labels), c, thresholds):
            w.writerow([ALL_KINDS[c].label, f"{t:.3f}", f"{fpr:.6f}", f"{tpr:.6f}"])
    return buf.getvalue()
