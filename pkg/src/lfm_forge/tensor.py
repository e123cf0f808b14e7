"""Dense float32 kernels and a finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in row-major
order. Every kernel here is pure: inputs are never modified in place.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, NumericError, ConfigError

DTYPE = np.float32


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array (no copy when possible)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def rng_from_seed(seed: int, *salt: str) -> np.random.Generator:
    """Deterministic generator for ``seed``, optionally split by string salts.

    A salt is hashed with blake2b and XOR-ed into the 64-bit seed, so the
    stream for a given (seed, salt) pair never depends on call order.
    """
    value = int(seed) & 0xFFFFFFFFFFFFFFFF
    for s in salt:
        digest = hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest()
        value ^= int.from_bytes(digest, "little")
    return np.random.default_rng(value)


def rms_norm(x, gain, eps: float = 1e-6) -> np.ndarray:
    x = as_tensor(x)
    gain = as_tensor(gain)
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise DimensionError(f"rms_norm: last axis {x.shape[-1:]} does not match gain {gain.shape}")
    if not eps > 0:
        raise DomainError("rms_norm: eps must be positive")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + DTYPE(eps)) * gain).astype(DTYPE, copy=False)


def depthwise_causal_conv(y, weights, bias) -> np.ndarray:
    """Causal depthwise convolution with left zero padding.

    ``z[t, c] = bias[c] + sum_i weights[c, i] * y[t - i, c]``; tap 0 multiplies
    the current position.
    """
    y = as_tensor(y)
    weights = as_tensor(weights)
    bias = as_tensor(bias)
    if y.ndim != 2 or weights.ndim != 2 or bias.ndim != 1:
        raise DimensionError("depthwise_causal_conv expects y[L,d], weights[d,k], bias[d]")
    L, d = y.shape
    if weights.shape[0] != d or bias.shape[0] != d:
        raise DimensionError(f"channel mismatch: y has {d}, weights {weights.shape}, bias {bias.shape}")
    k = weights.shape[1]
    if k < 1 or L < 1:
        raise DimensionError("kernel size and sequence length must be >= 1")
    padded = np.concatenate([np.zeros((k - 1, d), DTYPE), y], axis=0)
    return conv_valid(padded, weights, bias)


def conv_valid(padded: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Convolve a sequence that already carries its ``k - 1`` rows of history."""
    k = weights.shape[1]
    L = padded.shape[0] - (k - 1)
    out = np.broadcast_to(bias, (L, padded.shape[1])).copy()
    for i in range(k):
        # tap i reads y[t - i], which sits at padded[t + k - 1 - i]
        out += weights[:, i] * padded[k - 1 - i : k - 1 - i + L]
    return out


def rope_rotate(x, base: float = 10000.0, positions=None) -> np.ndarray:
    """Rotate adjacent feature pairs ``(2j, 2j+1)`` by ``pos * base**(-2j/s)``."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError("rope_rotate expects [L, H, s]")
    L, _, s = x.shape
    if s % 2:
        raise ConfigError(f"rope_rotate: head size {s} must be even")
    if positions is None:
        positions = np.arange(L)
    pos = np.asarray(positions, dtype=np.float64).reshape(L, 1)
    inv_freq = base ** (-np.arange(0, s, 2, dtype=np.float64) / s)
    angle = pos * inv_freq
    cos = np.cos(angle).astype(DTYPE)[:, None, :]
    sin = np.sin(angle).astype(DTYPE)[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def softmax_last(x, mask=None) -> np.ndarray:
    """Softmax over the last axis; ``mask`` marks entries that take part."""
    x = np.asarray(x)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise DomainError("softmax_last: a row is fully masked")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def silu(u):
    return u / (1.0 + np.exp(-u))


def swiglu(x, w_gate, w_up, w_down) -> np.ndarray:
    x = as_tensor(x)
    d = x.shape[-1]
    if w_gate.shape[0] != d or w_up.shape != w_gate.shape or w_down.shape != (w_gate.shape[1], d):
        raise DimensionError(
            f"swiglu: x[..,{d}] incompatible with gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape}"
        )
    return ((silu(x @ w_gate) * (x @ w_up)) @ w_down).astype(DTYPE, copy=False)


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, accumulated in float64."""
    if not h > 0:
        raise DomainError("fd_gradient: step must be positive")
    base = np.array(x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base.copy()))
        flat[i] = orig - h
        fm = float(f(base.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, base.shape)
            raise NumericError(f"fd_gradient: non-finite evaluation at index {idx}", index=idx)
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
