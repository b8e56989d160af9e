"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin. The numba path is used unless the
environment variable ``ROBUMTL_NUMBA`` is set to ``0`` (or numba is not
importable). Both paths are deterministic; they are not guaranteed to be
bit-identical to each other because summation order can differ.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

JIT_OPTIONS = {"nogil": True, "cache": True}


def numba_enabled() -> bool:
    if numba is None:
        return False
    return os.environ.get("ROBUMTL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def _njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(**JIT_OPTIONS)(fn)


# ---------------------------------------------------------------------------
# im2col / col2im for dense convolution
# ---------------------------------------------------------------------------


def im2col_numpy(xp, k, stride, ho, wo):
    """(N, C, Hp, Wp) padded input -> (N, ho, wo, C*k*k) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: (N, C, ho, wo, k, k)
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)


def col2im_numpy(cols, xshape, k, stride, ho, wo):
    n, c, hp, wp = xshape
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros(xshape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


@_njit
def _im2col_nb(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((n, ho, wo, c * k * k), dtype=xp.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                for ch in range(c):
                    for i in range(k):
                        for j in range(k):
                            out[b, oy, ox, col] = xp[b, ch, oy * stride + i, ox * stride + j]
                            col += 1
    return out


@_njit
def _col2im_nb(cols, n, c, hp, wp, k, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                for ch in range(c):
                    for i in range(k):
                        for j in range(k):
                            out[b, ch, oy * stride + i, ox * stride + j] += cols[b, oy, ox, col]
                            col += 1
    return out


def im2col(xp, k, stride, ho, wo):
    if numba_enabled():
        return _im2col_nb(np.ascontiguousarray(xp), k, stride, ho, wo)
    return im2col_numpy(xp, k, stride, ho, wo)


def col2im(cols, xshape, k, stride, ho, wo):
    if numba_enabled():
        n, c, hp, wp = xshape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, hp, wp, k, stride, ho, wo)
    return col2im_numpy(cols, xshape, k, stride, ho, wo)


# ---------------------------------------------------------------------------
# depthwise convolution
# ---------------------------------------------------------------------------


def depthwise_forward_numpy(xp, w, stride, ho, wo):
    # xp: (N, C, Hp, Wp), w: (C, k, k)
    k = w.shape[-1]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += patch * w[None, :, i, j, None, None]
    return out


def depthwise_backward_numpy(xp, w, g, stride):
    k = w.shape[-1]
    ho, wo = g.shape[2], g.shape[3]
    gx = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gw[:, i, j] = np.einsum("nchw,nchw->c", xp[sl], g)
            gx[sl] += g * w[None, :, i, j, None, None]
    return gx, gw


@_njit
def _depthwise_forward_nb(xp, w, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            acc += xp[b, ch, oy * stride + i, ox * stride + j] * w[ch, i, j]
                    out[b, ch, oy, ox] = acc
    return out


@_njit
def _depthwise_backward_nb(xp, w, g, stride):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    gx = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    go = g[b, ch, oy, ox]
                    for i in range(k):
                        for j in range(k):
                            gw[ch, i, j] += xp[b, ch, oy * stride + i, ox * stride + j] * go
                            gx[b, ch, oy * stride + i, ox * stride + j] += w[ch, i, j] * go
    return gx, gw


def depthwise_forward(xp, w, stride, ho, wo):
    if numba_enabled():
        return _depthwise_forward_nb(np.ascontiguousarray(xp), np.ascontiguousarray(w), stride, ho, wo)
    return depthwise_forward_numpy(xp, w, stride, ho, wo)


def depthwise_backward(xp, w, g, stride):
    if numba_enabled():
        return _depthwise_backward_nb(
            np.ascontiguousarray(xp), np.ascontiguousarray(w), np.ascontiguousarray(g), stride
        )
    return depthwise_backward_numpy(xp, w, g, stride)


# ---------------------------------------------------------------------------
# max pooling (non-overlapping windows)
# ---------------------------------------------------------------------------


def maxpool_forward_numpy(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward_numpy(g, arg, xshape, k):
    n, c, h, w = xshape
    ho, wo = g.shape[2], g.shape[3]
    win = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    out = np.zeros(xshape, dtype=g.dtype)
    out[:, :, : ho * k, : wo * k] = win
    return out


@_njit
def _maxpool_forward_nb(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[b, ch, oy * k, ox * k]
                    bi = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, oy * k + i, ox * k + j]
                            if v > best:
                                best = v
                                bi = i * k + j
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = bi
    return out, arg


@_njit
def _maxpool_backward_nb(g, arg, n, c, h, w, k):
    out = np.zeros((n, c, h, w), dtype=g.dtype)
    ho, wo = g.shape[2], g.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    a = arg[b, ch, oy, ox]
                    out[b, ch, oy * k + a // k, ox * k + a % k] += g[b, ch, oy, ox]
    return out


def maxpool_forward(x, k):
    if numba_enabled():
        return _maxpool_forward_nb(np.ascontiguousarray(x), k)
    return maxpool_forward_numpy(x, k)


def maxpool_backward(g, arg, xshape, k):
    if numba_enabled():
        n, c, h, w = xshape
        return _maxpool_backward_nb(np.ascontiguousarray(g), arg, n, c, h, w, k)
    return maxpool_backward_numpy(g, arg, xshape, k)


# ---------------------------------------------------------------------------
# rasterization for weather overlays (toroidal wrap, so coverage is exact)
# ---------------------------------------------------------------------------


def raster_segments_numpy(h, w, x0, y0, angles, length):
    mask = np.zeros((h, w), dtype=np.bool_)
    if len(x0) == 0:
        return mask
    t = np.arange(length, dtype=np.float64)
    xs = np.floor(x0[:, None] + t[None, :] * np.cos(angles)[:, None]).astype(np.int64) % w
    ys = np.floor(y0[:, None] + t[None, :] * np.sin(angles)[:, None]).astype(np.int64) % h
    mask[ys.ravel(), xs.ravel()] = True
    return mask


@_njit
def _raster_segments_nb(h, w, x0, y0, angles, length):
    mask = np.zeros((h, w), dtype=np.bool_)
    for d in range(x0.shape[0]):
        ca = np.cos(angles[d])
        sa = np.sin(angles[d])
        for ti in range(length):
            xi = int(np.floor(x0[d] + ti * ca)) % w
            yi = int(np.floor(y0[d] + ti * sa)) % h
            mask[yi, xi] = True
    return mask


def raster_disks_numpy(h, w, cx, cy, radius):
    mask = np.zeros((h, w), dtype=np.bool_)
    if len(cx) == 0:
        return mask
    r = int(np.ceil(radius))
    off = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(off, off, indexing="ij")
    keep = dx * dx + dy * dy <= radius * radius
    dy, dx = dy[keep], dx[keep]
    ys = (np.floor(cy).astype(np.int64)[:, None] + dy[None, :]) % h
    xs = (np.floor(cx).astype(np.int64)[:, None] + dx[None, :]) % w
    mask[ys.ravel(), xs.ravel()] = True
    return mask


@_njit
def _raster_disks_nb(h, w, cx, cy, radius):
    mask = np.zeros((h, w), dtype=np.bool_)
    r = int(np.ceil(radius))
    for d in range(cx.shape[0]):
        bx = int(np.floor(cx[d]))
        by = int(np.floor(cy[d]))
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if dx * dx + dy * dy <= radius * radius:
                    mask[(by + dy) % h, (bx + dx) % w] = True
    return mask


def raster_segments(h, w, x0, y0, angles, length):
    if numba_enabled():
        return _raster_segments_nb(h, w, x0.astype(np.float64), y0.astype(np.float64), angles.astype(np.float64), int(length))
    return raster_segments_numpy(h, w, x0, y0, angles, int(length))


def raster_disks(h, w, cx, cy, radius):
    if numba_enabled():
        return _raster_disks_nb(h, w, cx.astype(np.float64), cy.astype(np.float64), float(radius))
    return raster_disks_numpy(h, w, cx, cy, float(radius))
