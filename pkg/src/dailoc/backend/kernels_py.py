"""Numpy implementation of the hot numerical kernels.

This is the always-available fallback backend. The compiled Cython core
(`_kernels_c`) implements the same four functions with identical semantics;
`dailoc.backend` picks one at import time. All arrays are C-contiguous
float64; matrices are batch-first (rows = samples).

Activation codes are shared with the compiled core: 0 identity, 1 ReLU,
2 sigmoid, 3 softplus.
"""

from __future__ import annotations

import numpy as np

IDENTITY = 0
RELU = 1
SIGMOID = 2
SOFTPLUS = 3

NAME = "python"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign to avoid exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) written as max(x, 0) + log1p(e^-|x|) for stability
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _activate(pre: np.ndarray, act: int) -> np.ndarray:
    if act == IDENTITY:
        return pre.copy()
    if act == RELU:
        return np.maximum(pre, 0.0)
    if act == SIGMOID:
        return _sigmoid(pre)
    if act == SOFTPLUS:
        return _softplus(pre)
    raise ValueError(f"unknown activation code {act}")


def _activate_deriv(pre: np.ndarray, act: int) -> np.ndarray:
    if act == IDENTITY:
        return np.ones_like(pre)
    if act == RELU:
        return (pre > 0.0).astype(np.float64)
    if act == SIGMOID:
        s = _sigmoid(pre)
        return s * (1.0 - s)
    if act == SOFTPLUS:
        return _sigmoid(pre)
    raise ValueError(f"unknown activation code {act}")


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, act: int):
    """Forward pass: out = act(x @ w.T + b). Returns (out, pre)."""
    pre = x @ w.T + b
    return _activate(pre, act), pre


def dense_backward(x: np.ndarray, pre: np.ndarray, w: np.ndarray, act: int,
                   upstream: np.ndarray):
    """Chain rule through one dense layer.

    `upstream` is dL/d(out); returns (dx, dw, db) without any batch
    averaging (loss reductions own their 1/batch factors).
    """
    dpre = upstream * _activate_deriv(pre, act)
    dw = dpre.T @ x
    db = dpre.sum(axis=0)
    dx = dpre @ w
    return dx, dw, db


def adam_step_inplace(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                      t: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """Bias-corrected Adam update, applied in place to flat views.

    `t` is the 1-based step count including this update.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a and rows of b."""
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d
