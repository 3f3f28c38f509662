"""Dense numeric core.

Tensors are plain ``numpy.ndarray`` objects with ``float32`` storage in
row-major order. Reductions and products are carried out in ``float64`` and
rounded back to ``float32`` on return.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError

STORAGE = np.float32
COMPUTE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def tensor(data, shape=None) -> np.ndarray:
    """Build a contiguous float32 tensor, optionally reshaped to ``shape``."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=STORAGE))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim == 0 or any(s < 1 for s in arr.shape):
        raise DimensionError(f"tensor dimensions must be >= 1, got {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(COMPUTE, copy=False), b.astype(COMPUTE, copy=False))
    return out.astype(STORAGE)


def gelu(x):
    """Tanh-approximation GELU, evaluated in float64; dtype follows the input."""
    x = np.asarray(x)
    xd = np.atleast_1d(x.astype(COMPUTE, copy=False))
    # in-place chain; x**3 goes through pow() and is several times slower
    y = xd * xd
    y *= _GELU_K
    y += 1.0
    y *= xd
    y *= _GELU_C
    np.tanh(y, out=y)
    y += 1.0
    y *= xd
    y *= 0.5
    y = y.reshape(x.shape)
    return y.astype(x.dtype if x.dtype.kind == "f" else COMPUTE, copy=False)


def gelu_grad(x):
    """Derivative of :func:`gelu` with respect to its input (float64)."""
    x = np.asarray(x, dtype=COMPUTE)
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_K * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize each row over the last axis, then apply ``gain``/``bias``."""
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape}, bias {bias.shape}")
    if not eps > 0:
        raise DimensionError("layer_norm: eps must be positive")
    xd = x.astype(COMPUTE, copy=False)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (xd - mu) / np.sqrt(var + eps) * gain.astype(COMPUTE) + bias.astype(COMPUTE)
    return y.astype(x.dtype if x.dtype.kind == "f" else COMPUTE, copy=False)


def softmax(x):
    x = np.asarray(x)
    xd = x.astype(COMPUTE, copy=False)
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y.astype(x.dtype if x.dtype.kind == "f" else COMPUTE, copy=False)


def log_softmax(x):
    xd = np.asarray(x, dtype=COMPUTE)
    z = xd - xd.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
