"""Dense tensor kernels: convolution, pooling, interpolation, quantiles.

Tensors are C-contiguous numpy float arrays, float32 in production use.
Every kernel also runs in float64 (dtype follows the input), which is the
test mode used for tight gradient-check tolerances. All kernels are pure
and use a fixed accumulation order, so identical inputs give bitwise
identical outputs.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """An operand's dimensions violate a kernel contract."""


def as_tensor(data, dims=None) -> np.ndarray:
    """Coerce to a C-contiguous float32 array, optionally reshaped to dims."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if dims is not None:
        arr = arr.reshape(tuple(dims))
    return arr


def _with_batch(x: np.ndarray, ndim: int):
    """Add a leading batch axis if x has `ndim` dims; return (x4d, had_batch)."""
    if x.ndim == ndim:
        return x[None], False
    if x.ndim == ndim + 1:
        return x, True
    raise ShapeError(f"expected {ndim} or {ndim + 1} dims, got {x.ndim}")


def conv2d_forward(inp: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                   padding: int = 0, stride: int = 1) -> np.ndarray:
    """Cross-correlation of inp [C,H,W] (or [B,C,H,W]) with kernel [K,C,kh,kw].

    Accumulation is kernel-major (channel, then kernel row, then kernel
    column) so results are bit-reproducible.
    """
    x, batched = _with_batch(inp, 3)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must have 4 dims, got {kernel.ndim}")
    b, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"channel axis mismatch: input has {c}, kernel expects {kc}")
    if bias.shape != (k,):
        raise ShapeError(f"bias axis mismatch: expected ({k},), got {bias.shape}")
    h_out, rh = divmod(h + 2 * padding - kh, stride)
    w_out, rw = divmod(w + 2 * padding - kw, stride)
    h_out += 1
    w_out += 1
    if rh != 0 or h_out < 1:
        raise ShapeError(f"height axis: (H+2p-kh)/stride+1 not a positive integer for H={h}")
    if rw != 0 or w_out < 1:
        raise ShapeError(f"width axis: (W+2p-kw)/stride+1 not a positive integer for W={w}")

    xp = x
    if padding > 0:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.empty((b, k, h_out, w_out), dtype=x.dtype)
    out[...] = bias.astype(x.dtype)[None, :, None, None]
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, ci,
                        i: i + stride * (h_out - 1) + 1: stride,
                        j: j + stride * (w_out - 1) + 1: stride]
                out += xs[:, None, :, :] * kernel[None, :, ci, i, j, None, None].astype(x.dtype)
    return out if batched else out[0]


def conv2d_backward(inp: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray,
                    padding: int = 0, stride: int = 1, need_weight_grads: bool = True):
    """Exact adjoints of conv2d_forward: (grad_input, grad_kernel, grad_bias).

    With need_weight_grads=False only grad_input is computed (the other two
    slots are None); attack loops use this cheaper path.
    """
    x, batched = _with_batch(inp, 3)
    g, gbatched = _with_batch(grad_out, 3)
    if batched != gbatched:
        raise ShapeError("input and grad_out disagree on batch axis")
    b, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"channel axis mismatch: input has {c}, kernel expects {kc}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if g.shape != (b, k, h_out, w_out):
        raise ShapeError(f"grad_out axis mismatch: expected {(b, k, h_out, w_out)}, got {g.shape}")

    xp = x
    if padding > 0:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    grad_bias = g.sum(axis=(0, 2, 3))
    grad_kernel = np.zeros_like(kernel) if need_weight_grads else None

    gxp = np.zeros_like(xp)
    g_flat = g.reshape(b, k, h_out * w_out)
    for i in range(kh):
        for j in range(kw):
            hs = slice(i, i + stride * (h_out - 1) + 1, stride)
            ws = slice(j, j + stride * (w_out - 1) + 1, stride)
            w_ij = kernel[:, :, i, j].astype(x.dtype)       # (K, C)
            # grad wrt input: scatter w^T @ g back onto the strided window
            contrib = np.matmul(g_flat.transpose(0, 2, 1), w_ij)  # (B, P, C)
            gxp[:, :, hs, ws] += contrib.transpose(0, 2, 1).reshape(b, c, h_out, w_out)
            if need_weight_grads:
                xs = xp[:, :, hs, ws].reshape(b, c, h_out * w_out)
                grad_kernel[:, :, i, j] = np.matmul(
                    g_flat.transpose(1, 0, 2).reshape(k, b * h_out * w_out),
                    xs.transpose(1, 0, 2).reshape(c, b * h_out * w_out).T,
                ).astype(kernel.dtype)
    if padding > 0:
        grad_input = gxp[:, :, padding:-padding, padding:-padding]
    else:
        grad_input = gxp
    grad_input = np.ascontiguousarray(grad_input)
    if not batched:
        grad_input = grad_input[0]
    return grad_input, grad_kernel, grad_bias


def maxpool2_forward(inp: np.ndarray):
    """2x2 non-overlapping max pool; ties go to the smallest flat index.

    Returns (pooled, argmax) where argmax holds the window-local flat index
    (row-major within each 2x2 window) needed by the backward pass.
    """
    x, batched = _with_batch(inp, 3)
    b, c, h, w = x.shape
    if h % 2 != 0:
        raise ShapeError(f"height axis must be even for 2x2 pooling, got {h}")
    if w % 2 != 0:
        raise ShapeError(f"width axis must be even for 2x2 pooling, got {w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    out = win.max(axis=-1)
    arg = win.argmax(axis=-1).astype(np.uint8)
    if not batched:
        out, arg = out[0], arg[0]
    return out, arg


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Route pooled gradients back to the argmax positions."""
    g, batched = _with_batch(grad_out, 3)
    a = argmax[None] if not batched else argmax
    b, c, h2, w2 = g.shape
    win = np.zeros((b, c, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(win, a[..., None].astype(np.intp), g[..., None], axis=-1)
    out = win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    return out if batched else out[0]


def bilinear_upsample(inp: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers, clamped to the source grid.

    Source coordinate for output index i is (i + 0.5) * h / out_h - 0.5,
    clamped to [0, h - 1]; values mix the two nearest source rows/cols.
    """
    x, batched = _with_batch(inp, 3)
    _, _, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample only: requested {out_h}x{out_w} from {h}x{w}")

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        frac = src - lo
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, frac.astype(x.dtype)

    r0, r1, fy = axis_weights(h, out_h)
    c0, c1, fx = axis_weights(w, out_w)
    rows = x[..., r0, :] * (1 - fy)[:, None] + x[..., r1, :] * fy[:, None]
    out = rows[..., c0] * (1 - fx) + rows[..., c1] * fx
    return out if batched else out[0]


def quantile(values, q: float) -> float:
    """Nearest-rank quantile: sorted[ceil(q*n) - 1], clamped to valid indices."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile fraction must be in (0, 1], got {q}")
    # round() guards ceil against 1-ulp float noise when q*n is integral
    k = math.ceil(round(q * arr.size, 9))
    idx = min(max(k - 1, 0), arr.size - 1)
    return float(np.sort(arr)[idx])
