"""Minibatch optimization loop shared by every trainer in the package."""

from __future__ import annotations

import logging
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import TrainingError
from .optim import Adam
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


def minibatches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def fit(
    trainable: Mapping[str, Tensor],
    loss_fn: Callable[[np.ndarray], Tensor],
    batches: Callable[[int], list],
    epochs: int,
    lr: float,
    check: Optional[Callable[[], None]] = None,
    weight_decay: float = 0.0,
    label: str = "fit",
    after_epoch: Optional[Callable[[int, float], bool]] = None,
) -> list[float]:
    """Run ``epochs`` passes; ``batches(epoch)`` yields the per-step batch keys.

    Every trainable tensor has ``requires_grad`` switched on for the duration
    and restored afterwards. ``check`` runs after each backward pass, before
    the update (used to assert freezing contracts). ``after_epoch(epoch, loss)``
    may return True to stop early. Returns mean loss per epoch.
    """
    saved = {k: p.requires_grad for k, p in trainable.items()}
    for p in trainable.values():
        p.requires_grad = True
    opt = Adam(trainable, lr=lr, weight_decay=weight_decay)
    history = []
    try:
        for epoch in range(epochs):
            total, count = 0.0, 0
            for batch in batches(epoch):
                opt.zero_grad()
                with Tape() as tape:
                    loss = loss_fn(batch)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingError(f"{label}: loss became {value} in epoch {epoch}")
                    tape.backward(loss)
                if check is not None:
                    check()
                opt.step()
                total += value
                count += 1
            history.append(total / max(count, 1))
            log.info("%s epoch %d loss %.5f", label, epoch, history[-1])
            if after_epoch is not None and after_epoch(epoch, history[-1]):
                break
    finally:
        for k, p in trainable.items():
            p.requires_grad = saved[k]
            p.grad = None
    return history
