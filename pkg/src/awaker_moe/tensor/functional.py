"""Fused differentiable functions used by the transformer and the gates."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from awaker_moe.errors import NumericError, ShapeError
from awaker_moe.tensor.core import Tensor


def _stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with the maximum subtracted first."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN logits")
    out = _stable_softmax(x.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def softmax_row(v: Tensor) -> Tensor:
    """Softmax of a single logit vector.

    Raises:
        ShapeError: If ``v`` is not a non-empty vector.
        NumericError: If ``v`` contains NaN.
    """
    if v.ndim != 1 or v.shape[0] < 1:
        raise ShapeError(f"softmax_row needs a non-empty vector, got shape {v.shape}")
    return softmax(v, axis=-1)


def cross_entropy_masked(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood over the positions selected by ``mask``.

    Args:
        logits: ``T x V`` scores.
        targets: ``T`` target token ids.
        mask: ``T`` flags; only flagged positions contribute.

    Raises:
        NumericError: If the mask selects nothing.
        ShapeError: If the three inputs disagree in length.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or logits.shape[0] != len(targets) or len(targets) != len(mask):
        raise ShapeError(
            f"cross_entropy_masked: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise NumericError("cross_entropy_masked: mask selects no position")
    x = logits.data
    if np.isnan(x).any():
        raise NumericError("cross_entropy_masked received NaN logits")
    rows = np.arange(len(targets))
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[rows, targets]
    loss = np.asarray(nll[mask].sum() / count, dtype=x.dtype)

    def backward(g):
        probs = _stable_softmax(x, axis=1)
        probs[rows, targets] -= 1.0
        probs[~mask] = 0.0
        return (probs * (g / count),)

    return Tensor._result(loss, (logits,), backward)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by ``weight``."""
    data, w = x.data, weight.data
    inv = 1.0 / np.sqrt((data * data).mean(axis=-1, keepdims=True) + eps)
    normed = data * inv

    def backward(g):
        gn = g * w
        gx = inv * (gn - normed * (gn * normed).mean(axis=-1, keepdims=True))
        gw = (g * normed).reshape(-1, w.shape[-1]).sum(axis=0)
        return gx, gw

    return Tensor._result(normed * w, (x, weight), backward)


def silu(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``."""
    data = x.data
    sig = 1.0 / (1.0 + np.exp(-data))

    def backward(g):
        return (g * sig * (1.0 + data * (1.0 - sig)),)

    return Tensor._result(data * sig, (x,), backward)


def rope_tables(max_len: int, head_dim: int, theta: float = 10000.0, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and sine tables (``max_len x head_dim``) for rotary encoding."""
    if head_dim % 2:
        raise ShapeError(f"rotary encoding needs an even head dimension, got {head_dim}")
    inv_freq = 1.0 / theta ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(max_len, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_transpose(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([x[..., half:], -x[..., :half]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray, n_heads: int) -> Tensor:
    """Rotary position encoding of a ``T x (n_heads * head_dim)`` projection."""
    seq_len, width = x.shape
    head_dim = width // n_heads
    c = cos[:seq_len, None, :]
    s = sin[:seq_len, None, :]
    heads = x.data.reshape(seq_len, n_heads, head_dim)
    out = heads * c + _rotate_half(heads) * s

    def backward(g):
        gh = g.reshape(seq_len, n_heads, head_dim)
        return ((gh * c + _rotate_half_transpose(gh * s)).reshape(seq_len, width),)

    return Tensor._result(out.reshape(seq_len, width), (x,), backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back."""
    return table[np.asarray(ids, dtype=np.int64)]
