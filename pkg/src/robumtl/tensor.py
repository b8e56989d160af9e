"""A small dense tensor engine with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape everything runs as plain numpy.
Arrays are NCHW for image-shaped data. float32 is the working dtype; pass
float64 arrays to get float64 all the way through (used by gradient checks).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, ValidationError

DEFAULT_DTYPE = np.float32

_state = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ``backward`` walks the records in exact reverse
    order and accumulates into ``.grad`` of the leaf tensors that require it.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out: Tensor, inputs: tuple, backward: Callable):
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None):
        if grad is None:
            if loss.data.size != 1:
                raise ValidationError("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        produced = set()
        for out, inputs, fn in reversed(self.records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        # whatever remains belongs to leaves (tensors not produced on this tape)
        leaves = {}
        for _, inputs, _ in self.records:
            for t in inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


def current_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        tape = current_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else as_tensor(b, dtype=a.dtype)
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.dtype)
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.dtype)
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
        return (g * d,)

    return _make(out.astype(x.dtype), (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if _needs_add_at(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(x.data[idx], (x,), backward)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ weight.T + bias, with weight stored as (d_out, d_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = g @ wd
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, lambda g: backward(g)[: len(inputs)])


# ---------------------------------------------------------------------------
# softmax family and losses
# ---------------------------------------------------------------------------


def _stable_softmax(xd: np.ndarray, axis: int) -> np.ndarray:
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _stable_softmax(x.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over all positions.

    logits: (N, n) or (N, n, *spatial); labels: integer array (N,) or (N, *spatial).
    """
    labels = np.asarray(labels)
    n = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValidationError(f"cross_entropy: labels must lie in [0, {n})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    count = labels.size
    loss = -picked.sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        return ((p - onehot) * (g / count),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy evaluated on raw logits (stable form)."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: targets {t.shape} vs logits {logits.shape}")
    xd = logits.data
    loss = np.maximum(xd, 0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    count = xd.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-xd))
        return ((sig - t) * (g / count),)

    return _make(np.asarray(loss.sum() / count, dtype=logits.dtype), (logits,), backward)


def l2_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error; with a (N, 1, H, W)-broadcastable mask only masked
    entries count. Returns 0 when the mask selects nothing."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"l2: target {t.shape} vs prediction {pred.shape}")
    diff = pred.data - t
    if mask is None:
        m = np.ones_like(diff)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), diff.shape)
    count = float(m.sum())
    if count == 0:
        return _make(np.asarray(0.0, dtype=pred.dtype), (pred,), lambda g: (np.zeros_like(diff),))
    loss = (diff * diff * m).sum() / count

    def backward(g):
        return (2.0 * diff * m * (g / count),)

    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def backward(g):
        gg = g * gamma.data
        gx = inv / d * (d * gg - gg.sum(axis=-1, keepdims=True) - xhat * (gg * xhat).sum(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(out.astype(xd.dtype), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)
# ---------------------------------------------------------------------------


def _as_nchw(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected C×H×W or N×C×H×W input, got shape {x.shape}")
    return x, False


def _pad(xd: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return xd
    return np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(h: int, w: int, k: int, stride: int, padding: int, what: str) -> tuple[int, int]:
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"{what}: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; weight is (C_out, C_in, k, k)."""
    x4, squeezed = _as_nchw(x)
    n, c, h, w = x4.shape
    co, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d: input {x4.shape} incompatible with kernel {weight.shape}")
    ho, wo = _out_size(h, w, k, stride, padding, "conv2d")
    xp = _pad(x4.data, padding)
    cols = _kernels.im2col(xp, k, stride, ho, wo)  # (N, ho, wo, C*k*k)
    w2 = weight.data.reshape(co, -1)
    out = cols @ w2.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (N, ho, wo, co)
        gflat = g2.reshape(-1, co)
        gw = (gflat.T @ cols.reshape(-1, cols.shape[-1])).reshape(weight.shape)
        gcols = g2 @ w2
        gxp = _kernels.col2im(gcols, xp.shape, k, stride, ho, wo)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = gflat.sum(axis=0) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x4, weight) if bias is None else (x4, weight, bias)
    y = _make(out, inputs, lambda g: backward(g)[: len(inputs)])
    return reshape(y, y.shape[1:]) if squeezed else y


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """One k×k filter per channel; weight is (C, 1, k, k)."""
    x4, squeezed = _as_nchw(x)
    n, c, h, w = x4.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise DimensionError(f"depthwise_conv2d: input {x4.shape} incompatible with kernel {weight.shape}")
    k = weight.shape[-1]
    ho, wo = _out_size(h, w, k, stride, padding, "depthwise_conv2d")
    xp = _pad(x4.data, padding)
    wk = weight.data[:, 0]
    out = _kernels.depthwise_forward(xp, wk, stride, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gxp, gw = _kernels.depthwise_backward(xp, wk, np.ascontiguousarray(g), stride)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw[:, None], gb)

    inputs = (x4, weight) if bias is None else (x4, weight, bias)
    y = _make(out, inputs, lambda g: backward(g)[: len(inputs)])
    return reshape(y, y.shape[1:]) if squeezed else y


def depthwise_separable_conv(
    x: Tensor,
    depthwise_kernel: Tensor,
    pointwise_kernel: Tensor,
    depthwise_bias: Optional[Tensor] = None,
    pointwise_bias: Optional[Tensor] = None,
    padding: int = 1,
) -> Tensor:
    """Per-channel spatial filter followed by 1×1 channel mixing."""
    if pointwise_kernel.shape[2:] != (1, 1):
        raise DimensionError(f"pointwise kernel must be 1x1, got {pointwise_kernel.shape}")
    if pointwise_kernel.shape[1] != depthwise_kernel.shape[0]:
        raise DimensionError(
            f"channel mismatch: depthwise {depthwise_kernel.shape} vs pointwise {pointwise_kernel.shape}"
        )
    y = depthwise_conv2d(x, depthwise_kernel, depthwise_bias, padding=padding)
    return conv2d(y, pointwise_kernel, pointwise_bias)


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    x4, squeezed = _as_nchw(x)
    n, c, h, w = x4.shape
    if h == 0 or w == 0 or kernel > h or kernel > w:
        raise DimensionError(f"maxpool2d: window {kernel} does not fit spatial dims {h}x{w}")
    out, arg = _kernels.maxpool_forward(x4.data, kernel)
    shape = x4.shape
    y = _make(out, (x4,), lambda g: (_kernels.maxpool_backward(np.ascontiguousarray(g), arg, shape, kernel),))
    return reshape(y, y.shape[1:]) if squeezed else y


def adaptive_avgpool(x: Tensor, output_size: int = 1) -> Tensor:
    """Average pool to output_size×output_size; spatial dims must divide evenly."""
    x4, squeezed = _as_nchw(x)
    n, c, h, w = x4.shape
    if h == 0 or w == 0:
        raise DimensionError("adaptive_avgpool: empty spatial dims")
    if h % output_size or w % output_size:
        raise DimensionError(f"adaptive_avgpool: {h}x{w} not divisible into {output_size}x{output_size}")
    bh, bw = h // output_size, w // output_size
    out = x4.data.reshape(n, c, output_size, bh, output_size, bw).mean(axis=(3, 5))
    scale = 1.0 / (bh * bw)

    def backward(g):
        gx = np.repeat(np.repeat(g * scale, bh, axis=2), bw, axis=3)
        return (gx.astype(x4.dtype),)

    y = _make(out.astype(x4.dtype), (x4,), backward)
    return reshape(y, y.shape[1:]) if squeezed else y


def _bilinear_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    """Row-stochastic interpolation matrix, half-pixel centers (align_corners=False)."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    x4, squeezed = _as_nchw(x)
    h, w = x4.shape[2:]
    uh = _bilinear_matrix(size[0], h, x4.dtype)
    uw = _bilinear_matrix(size[1], w, x4.dtype)
    out = np.einsum("ih,nchw,jw->ncij", uh, x4.data, uw, optimize=True)

    def backward(g):
        return (np.einsum("ih,ncij,jw->nchw", uh, g, uw, optimize=True),)

    y = _make(out, (x4,), backward)
    return reshape(y, y.shape[1:]) if squeezed else y
