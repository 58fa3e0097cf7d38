"""Batched float64 layer primitives with matching backward passes."""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H, W, C*9) patches for a 3x3 conv with padding 1."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    b, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, w, c * 9)


def col2im3x3(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = shape
    d = dcols.reshape(b, h, w, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + w] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1, pad-1 cross-correlation. w is (F, C, 3, 3)."""
    cols = im2col3x3(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b  # B,H,W,F
    return out.transpose(0, 3, 1, 2), cols


def conv3x3_backward(dout: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray):
    f = w.shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = d @ w.reshape(f, -1)
    return col2im3x3(dcols, x_shape), dw, db


def maxpool2x2_forward(x: np.ndarray):
    """2x2/2 max pool with floor; ties resolve to the first element in row-major order."""
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(dout: np.ndarray, idx: np.ndarray, x_shape) -> np.ndarray:
    b, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    dblocks = np.zeros((b, c, h2, w2, 4))
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    dblocks = dblocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape)
    dx[:, :, : 2 * h2, : 2 * w2] = dblocks.reshape(b, c, 2 * h2, 2 * w2)
    return dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layernorm_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layernorm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    dx = inv * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db
