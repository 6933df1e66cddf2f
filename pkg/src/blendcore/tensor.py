"""Dense NCHW kernels and the BT4 tensor file format.

Tensors are plain ``numpy.ndarray`` objects of rank 4 in (n, c, h, w) order.
Every kernel here is a pure function; the matching ``*_backward`` functions
return vector-Jacobian products and are wired into the tape by
:mod:`blendcore.autodiff`.

Resizing follows the half-pixel-center convention: output index ``i`` samples
the source at ``(i + 0.5) * in / out - 0.5``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

BT4_MAGIC = b"BLENDT4\0"


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible."""


def as_tensor4(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# convolution


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Return columns of shape (n*ho*wo, c*kh*kw)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct 2-D cross-correlation, weights laid out (c_out, c_in, kh, kw)."""
    x = as_tensor4(x)
    weight = as_tensor4(weight)
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, weights expect {ci}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    cols = _im2col(x, kh, kw, stride, pad)
    out = cols @ weight.reshape(co, -1).T
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (co,):
            raise ShapeError(f"bias shape {bias.shape} does not match {co} outputs")
        out += bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def conv2d_backward(g, x, weight, stride: int = 1, pad: int = 0):
    """Gradients of :func:`conv2d` w.r.t. (input, weight, bias)."""
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    ho, wo = g.shape[2], g.shape[3]
    g_rows = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    cols = _im2col(x, kh, kw, stride, pad)
    gw = (g_rows.T @ cols).reshape(weight.shape)
    gb = g_rows.sum(axis=0)
    gcols = (g_rows @ weight.reshape(co, -1)).reshape(n, ho, wo, c, kh, kw)
    gpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    gx = gpad[:, :, pad : pad + h, pad : pad + w] if pad else gpad
    return np.ascontiguousarray(gx), gw, gb


def point_conv(x, weight, bias, batch_idx, ys, xs) -> np.ndarray:
    """Evaluate a 'same'-padded odd-sized convolution only at listed locations.

    Equivalent to ``conv2d(x, weight, bias, pad=kh // 2)[batch_idx, :, ys, xs]``
    but costs one patch dot-product per location.  Returns shape (D, c_out, 1, 1).
    """
    x = as_tensor4(x)
    co, ci, kh, kw = weight.shape
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {ci}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    patches = _gather_patches(xp, batch_idx, ys, xs, kh, kw)
    out = patches @ weight.reshape(co, -1).T + bias
    return out.reshape(len(patches), co, 1, 1)


def _gather_patches(xp, batch_idx, ys, xs, kh, kw):
    d = len(batch_idx)
    c = xp.shape[1]
    out = np.empty((d, c * kh * kw), dtype=xp.dtype)
    for i, (b, y, x) in enumerate(zip(batch_idx, ys, xs)):
        out[i] = xp[b, :, y : y + kh, x : x + kw].reshape(-1)
    return out


def point_conv_backward(g, x, weight, batch_idx, ys, xs):
    """Gradients of :func:`point_conv` w.r.t. (input, weight, bias)."""
    co, ci, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    patches = _gather_patches(xp, batch_idx, ys, xs, kh, kw)
    g2 = g.reshape(len(patches), co)
    gw = (g2.T @ patches).reshape(weight.shape)
    gb = g2.sum(axis=0)
    gpatch = (g2 @ weight.reshape(co, -1)).reshape(len(patches), ci, kh, kw)
    gxp = np.zeros_like(xp)
    for i, (b, y, xx) in enumerate(zip(batch_idx, ys, xs)):
        gxp[b, :, y : y + kh, xx : xx + kw] += gpatch[i]
    gx = gxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
    return np.ascontiguousarray(gx), gw, gb


# --------------------------------------------------------------------------
# elementwise and channel ops


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(g, x):
    # subgradient at 0 is 0
    return g * (x > 0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)


def sigmoid_backward(g, y):
    return g * y * (1 - y)


def softmax_channels(x) -> np.ndarray:
    x = as_tensor4(x)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_channels_backward(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def elementwise_mul(a, b) -> np.ndarray:
    _check_same(np.asarray(a), np.asarray(b))
    return np.multiply(a, b)


def reduce_sum_channels(a) -> np.ndarray:
    a = as_tensor4(a)
    return a.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# resizing


def _sample_points(n_in: int, n_out: int) -> np.ndarray:
    p = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(p, 0, n_in - 1)


def linear_resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) matrix of 1-D linear interpolation weights."""
    p = _sample_points(n_in, n_out)
    i0 = np.floor(p).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = p - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1 - f)
    np.add.at(mat, (rows, i1), f)
    return mat.astype(dtype)


def nearest_index(p: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties toward the lower index."""
    return np.ceil(np.asarray(p) - 0.5).astype(np.int64)


def nearest_resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    idx = np.clip(nearest_index(_sample_points(n_in, n_out)), 0, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=dtype)
    mat[np.arange(n_out), idx] = 1
    return mat


def _separable(x, wy, wx):
    return wy @ x @ wx.T


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor4(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be positive")
    _, _, h, w = x.shape
    wy = linear_resize_matrix(h, out_h, x.dtype)
    wx = linear_resize_matrix(w, out_w, x.dtype)
    return _separable(x, wy, wx)


def nearest_resize(x, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor4(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be positive")
    _, _, h, w = x.shape
    wy = nearest_resize_matrix(h, out_h, x.dtype)
    wx = nearest_resize_matrix(w, out_w, x.dtype)
    return _separable(x, wy, wx)


def resize_backward(g, in_h: int, in_w: int, mode: str = "bilinear"):
    make = linear_resize_matrix if mode == "bilinear" else nearest_resize_matrix
    wy = make(in_h, g.shape[2], g.dtype)
    wx = make(in_w, g.shape[3], g.dtype)
    return wy.T @ g @ wx


def resize(x, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    if mode == "bilinear":
        return bilinear_resize(x, out_h, out_w)
    if mode == "nearest":
        return nearest_resize(x, out_h, out_w)
    raise ValueError(f"unknown interpolation mode {mode!r}")


# --------------------------------------------------------------------------
# BT4 file format


def save_bt4(path, x) -> None:
    x = as_tensor4(x)
    flag = x.dtype.itemsize
    header = BT4_MAGIC + struct.pack("<4QB", *x.shape, flag)
    data = np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<"))
    Path(path).write_bytes(header + data.tobytes())


def load_bt4(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != BT4_MAGIC:
        raise ValueError(f"{path}: not a BT4 file")
    *dims, flag = struct.unpack_from("<4QB", raw, 8)
    if flag not in (4, 8):
        raise ValueError(f"{path}: bad precision flag {flag}")
    dtype = np.dtype("<f4" if flag == 4 else "<f8")
    count = int(np.prod(dims))
    body = raw[8 + 33 :]
    if len(body) != count * flag:
        raise ValueError(f"{path}: expected {count} scalars, found {len(body) // flag}")
    return np.frombuffer(body, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
