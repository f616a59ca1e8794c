"""Pure numpy implementations of the hot kernels.

Convolutions are lowered to one fat GEMM over an im2col window view, so the
fallback still rides BLAS; the compiled extension avoids the temporary
packing arrays and the Python dispatch.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "fallback"


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (B, Ci, L), w (Co, Ci, K) odd K, b (Co,) -> (B, Co, L)."""
    B, Ci, L = x.shape
    Co, _, K = w.shape
    pad = (K - 1) // 2
    xp = np.zeros((B, Ci, L + K - 1), dtype=np.float64)
    xp[:, :, pad : pad + L] = x
    win = sliding_window_view(xp, K, axis=2)  # (B, Ci, L, K)
    out = np.tensordot(win, w, axes=([1, 3], [1, 2]))  # (B, L, Co)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    out += b[None, :, None]
    return out


def conv1d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    """Gradients of conv1d_forward w.r.t. (x, w, b) given output grad g."""
    B, Ci, L = x.shape
    Co, _, K = w.shape
    pad = (K - 1) // 2
    xp = np.zeros((B, Ci, L + K - 1), dtype=np.float64)
    xp[:, :, pad : pad + L] = x
    win = sliding_window_view(xp, K, axis=2)  # (B, Ci, L, K)

    db = g.sum(axis=(0, 2))
    dw = np.tensordot(g, win, axes=([0, 2], [0, 2]))  # (Co, Ci, K)
    dwin = np.tensordot(g, w, axes=([1], [0]))  # (B, L, Ci, K)
    dxp = np.zeros_like(xp)
    for k in range(K):
        dxp[:, :, k : k + L] += dwin[:, :, :, k].transpose(0, 2, 1)
    dx = np.ascontiguousarray(dxp[:, :, pad : pad + L])
    return dx, dw, db


def maxpool1d_forward(x: np.ndarray):
    """x (B, C, L) with even L -> (out (B, C, L/2), argmax idx in {0,1})."""
    B, C, L = x.shape
    xr = x.reshape(B, C, L // 2, 2)
    idx = xr.argmax(axis=3).astype(np.int8)  # ties: lower index
    out = np.take_along_axis(xr, idx[..., None].astype(np.intp), axis=3)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool1d_backward(g: np.ndarray, idx: np.ndarray, L: int) -> np.ndarray:
    B, C, H = g.shape
    dxr = np.zeros((B, C, H, 2), dtype=np.float64)
    np.put_along_axis(dxr, idx[..., None].astype(np.intp), g[..., None], axis=3)
    return dxr.reshape(B, C, L)
