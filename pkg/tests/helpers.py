"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from robumtl.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (float64)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def gradcheck(fn, arrays, seed: int = 0, eps: float = 1e-6) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``fn`` maps Tensors to a Tensor; the scalar objective contracts its output
    with a fixed random weight so every output element matters.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays]).data
    proj = np.random.default_rng(seed).normal(size=probe.shape)

    def objective():
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        loss = (out * Tensor(proj)).sum()
        tape.backward(loss)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        num = numeric_grad(objective, arr, eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, rel_err(ana, num))
    return worst


def crc32_reference(data: bytes) -> int:
    """Bitwise CRC-32 (reflected, polynomial 0xEDB88320)."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def conv2d_reference(x, w, b=None, stride=1, padding=0):
    """Direct six-loop cross-correlation."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[a, o, i, j] = (patch * w[o]).sum() + (0.0 if b is None else b[o])
    return out


def away_from_zero(rng, shape, margin=0.05):
    """Uniform values in (-1, -margin] U [margin, 1): no kinks near finite-difference steps."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def distinct_values(rng, shape):
    """Values whose pairwise gaps are at least 1e-2, so max-pool ties cannot occur."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 1e-2 - n * 5e-3).reshape(shape)
