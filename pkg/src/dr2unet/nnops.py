"""Differentiable layers on (n, c, h, w) tensors.

Every op takes Vars or plain arrays and returns a Var; the gradient rule is
recorded only when some input lives on a tape.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensorcore import DTYPE, ShapeError, Var, apply, as_array

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# im2col machinery


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(n, c, h, w) -> (n * oh * ow, c * kh * kw)."""
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            col[:, :, i, j] = img[:, :, i:i_max:stride, j:j_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)


def col2im(col: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into image layout."""
    n, c, h, w = x_shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1), dtype=DTYPE)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j]
    return img[:, :, pad:pad + h, pad:pad + w]


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    n = x.shape[0]
    c_out, _, kh, kw = w.shape
    oh, ow = _out_size(x.shape[2], kh, stride, pad), _out_size(x.shape[3], kw, stride, pad)
    col = im2col(x, kh, kw, stride, pad)
    out = col @ w.reshape(c_out, -1).T
    return out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2), col


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    c_out, _, kh, kw = w.shape
    g_mat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    return col2im(g_mat @ w.reshape(c_out, -1), x_shape, kh, kw, stride, pad)


def _conv_weight_grad(g: np.ndarray, col: np.ndarray, w_shape) -> np.ndarray:
    g_mat = g.transpose(0, 2, 3, 1).reshape(-1, w_shape[0])
    return (g_mat.T @ col).reshape(w_shape)


def _resolve_pad(pad, kh: int, kw: int) -> int:
    if pad == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding needs odd kernel sizes")
        if kh != kw:
            raise ShapeError("only square kernels are supported")
        return kh // 2
    if pad == "valid":
        return 0
    if isinstance(pad, int) and pad >= 0:
        return pad
    raise ValueError(f"bad padding {pad!r}")


def conv2d(x, w, b=None, pad="same", stride: int = 1) -> Var:
    """Cross-correlation; ``w`` is (c_out, c_in, kh, kw), ``b`` is (c_out,)."""
    xv, wv = as_array(x), as_array(w)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and weights")
    if wv.shape[1] != xv.shape[1]:
        raise ShapeError(f"conv2d: weights expect {wv.shape[1]} input channels, got {xv.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    p = _resolve_pad(pad, wv.shape[2], wv.shape[3])
    out, col = _conv_raw(xv, wv, stride, p)
    inputs = [x, w]
    if b is not None:
        bv = as_array(b)
        if bv.shape != (wv.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bv.shape} != ({wv.shape[0]},)")
        out = out + bv.reshape(1, -1, 1, 1)
        inputs.append(b)
    x_shape = xv.shape

    def grad(g):
        gx = _conv_input_grad(g, wv, x_shape, stride, p)
        gw = _conv_weight_grad(g, col, wv.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return apply("conv2d", inputs, out, grad)


def conv_transpose2d(x, w, b=None, stride: int = 2) -> Var:
    """Upsampling by the adjoint of a stride-2, pad-1, 3x3 convolution.

    ``w`` is (c_in, c_out, 3, 3): the weights of the convolution that would map
    a (c_out, 2h, 2w) map down to this (c_in, h, w) input.  Output is exactly
    twice the input size.
    """
    xv, wv = as_array(x), as_array(w)
    if wv.shape[2:] != (3, 3):
        raise ShapeError("conv_transpose2d uses 3x3 kernels")
    if stride != 2:
        raise ValueError("conv_transpose2d is defined for stride 2 only")
    if wv.shape[0] != xv.shape[1]:
        raise ShapeError(f"conv_transpose2d: weights expect {wv.shape[0]} input channels, got {xv.shape[1]}")
    n, _, h, wd = xv.shape
    out_shape = (n, wv.shape[1], 2 * h, 2 * wd)
    out = _conv_input_grad(xv, wv, out_shape, stride, 1)
    inputs = [x, w]
    if b is not None:
        bv = as_array(b)
        if bv.shape != (wv.shape[1],):
            raise ShapeError(f"conv_transpose2d: bias shape {bv.shape} != ({wv.shape[1]},)")
        out = out + bv.reshape(1, -1, 1, 1)
        inputs.append(b)

    def grad(g):
        gx, g_col = _conv_raw(g, wv, stride, 1)
        gw = _conv_weight_grad(xv, g_col, wv.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return apply("conv_transpose2d", inputs, out, grad)


def maxpool2d(x) -> tuple[Var, np.ndarray]:
    """2x2 window, stride 2.  Returns the pooled Var and the in-window argmax (0..3).

    Ties resolve to the lowest flat index within the window.
    """
    xv = as_array(x)
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = xv.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return apply("maxpool2d", [x], out, grad), arg


def relu(x) -> Var:
    xv = as_array(x)
    mask = xv > 0
    return apply("relu", [x], np.where(mask, xv, 0.0), lambda g: (g * mask,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Var:
    s = _stable_sigmoid(as_array(x))
    return apply("sigmoid", [x], s, lambda g: (g * s * (1.0 - s),))


def concat_channels(xs: Sequence) -> Var:
    vals = [as_array(x) for x in xs]
    if not vals:
        raise ValueError("concat_channels needs at least one input")
    ref = vals[0].shape
    for v in vals[1:]:
        if v.shape[0] != ref[0] or v.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {v.shape} incompatible with {ref}")
    bounds = np.cumsum([v.shape[1] for v in vals])[:-1]
    return apply(
        "concat_channels", list(xs), np.concatenate(vals, axis=1),
        lambda g: tuple(np.split(g, bounds, axis=1)),
    )


def add(x, y) -> Var:
    xv, yv = as_array(x), as_array(y)
    if xv.shape != yv.shape:
        raise ShapeError(f"add: shape mismatch {xv.shape} vs {yv.shape}")
    return apply("add", [x, y], xv + yv, lambda g: (g, g))


def spatial_dropout(x, rate: float, mode: str, seed=None) -> Var:
    """Zero whole (sample, channel) maps with probability ``rate``; rescale survivors.

    ``seed`` is an int or a numpy Generator (advanced in place).
    """
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x if isinstance(x, Var) else Var(as_array(x))
    xv = as_array(x)
    rng = np.random.default_rng(seed)
    keep = rng.random((xv.shape[0], xv.shape[1])) >= rate
    scale = (keep / (1.0 - rate))[:, :, None, None]
    return apply("spatial_dropout", [x], xv * scale, lambda g: (g * scale,))


def bce_loss(logits, target) -> Var:
    """Mean binary cross-entropy computed from logits."""
    z, t = as_array(logits), as_array(target)
    if z.shape != t.shape:
        raise ShapeError(f"bce_loss: logits {z.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss: target must be binary")
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.array(per.mean(), dtype=DTYPE).reshape(1, 1, 1, 1)
    count = z.size

    def grad(g):
        return (g.item() * (_stable_sigmoid(z) - t) / count, None)

    return apply("bce_loss", [logits, target], out, grad)
