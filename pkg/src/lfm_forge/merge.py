"""Parameter-space merging of named checkpoints.

Every method works tensor by tensor on ``{name: array}`` maps and returns a
new map with the same names, shapes and dtypes. Arithmetic is float64 and
the result is cast back to each tensor's original dtype.

Stochastic methods draw from a generator seeded by ``seed`` XOR a hash of
the tensor name, so merging tensors in any order or in parallel gives the
same result.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CompatibilityError, ConfigError, InputError
from .tensor import rng_from_seed

METHODS = ("soup", "task_arithmetic", "ties", "dare_linear", "dare_ties", "della")


def check_compatible(checkpoints: Sequence[dict]) -> None:
    """Raise ``CompatibilityError`` unless all checkpoints share names and shapes."""
    if not checkpoints:
        raise InputError("no checkpoints to merge")
    ref = checkpoints[0]
    offenders = []
    for ck in checkpoints[1:]:
        for name in ref.keys() ^ ck.keys():
            offenders.append(name)
        for name in ref.keys() & ck.keys():
            if np.shape(ref[name]) != np.shape(ck[name]):
                offenders.append(name)
    if offenders:
        offenders = sorted(set(offenders))
        shown = ", ".join(offenders[:10])
        more = f" (+{len(offenders) - 10} more)" if len(offenders) > 10 else ""
        raise CompatibilityError(f"incompatible tensors: {shown}{more}", offenders)


def _weights(weights, n: int, default: float) -> np.ndarray:
    if weights is None:
        return np.full(n, default)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != n:
        raise InputError(f"{w.size} weights for {n} models")
    if not np.all(np.isfinite(w)):
        raise InputError("weights must be finite")
    return w


def _per_tensor(names, fn: Callable[[str], np.ndarray], workers: int = 1) -> dict:
    names = list(names)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = list(pool.map(fn, names))
    else:
        values = [fn(n) for n in names]
    return dict(zip(names, values))


def soup(models: Sequence[dict], weights=None, workers: int = 1) -> dict:
    """Weighted mean with weights normalized to sum to 1."""
    check_compatible(models)
    w = _weights(weights, len(models), 1.0)
    if w.sum() == 0:
        raise InputError("soup weights sum to zero")
    w = w / w.sum()

    def one(name):
        acc = sum(wi * np.asarray(m[name], np.float64) for wi, m in zip(w, models))
        return np.asarray(acc).astype(models[0][name].dtype)

    return _per_tensor(models[0], one, workers)


def _combine(base: np.ndarray, deltas: list[np.ndarray], w: np.ndarray) -> np.ndarray:
    acc = np.asarray(base, np.float64).copy()
    for wi, d in zip(w, deltas):
        acc += wi * d
    return acc.astype(base.dtype)


def _task_vectors(base: dict, models: Sequence[dict], name: str) -> list[np.ndarray]:
    b = np.asarray(base[name], np.float64)
    return [np.asarray(m[name], np.float64) - b for m in models]


def task_arithmetic(base: dict, models: Sequence[dict], weights=None, workers: int = 1) -> dict:
    """``base + sum_i w_i (theta_i - base)``."""
    check_compatible([base, *models])
    w = _weights(weights, len(models), 1.0)
    return _per_tensor(base, lambda n: _combine(base[n], _task_vectors(base, models, n), w), workers)


# ---------------------------------------------------------------- TIES pieces

def trim_magnitude(delta: np.ndarray, k_pct: float) -> np.ndarray:
    """Keep the ``ceil(k_pct * n)`` largest-magnitude entries; ties go to the lower index."""
    flat = delta.reshape(-1)
    keep = math.ceil(k_pct * flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:keep]] = flat[order[:keep]]
    return out.reshape(delta.shape)


def elect_sign(deltas: Sequence[np.ndarray]) -> np.ndarray:
    """Majority sign of the unweighted sum; a zero sum elects +1."""
    total = np.sum(deltas, axis=0)
    return np.where(total < 0, -1.0, 1.0)


def disjoint_merge(deltas: Sequence[np.ndarray], w: np.ndarray, sign: np.ndarray) -> np.ndarray:
    """Weighted mean over the entries whose sign agrees with ``sign``.

    Zero entries never agree. A coordinate with no agreeing weight gets 0.
    """
    num = np.zeros_like(sign)
    den = np.zeros_like(sign)
    for wi, d in zip(w, deltas):
        agree = np.sign(d) == sign
        num += np.where(agree, wi * d, 0.0)
        den += np.where(agree, wi, 0.0)
    safe = np.where(den != 0, den, 1.0)
    return np.where(den != 0, num / safe, 0.0)


def _consensus(base: np.ndarray, deltas: list[np.ndarray], w: np.ndarray) -> np.ndarray:
    merged = disjoint_merge(deltas, w, elect_sign(deltas))
    return (np.asarray(base, np.float64) + merged).astype(base.dtype)


def ties(base: dict, models: Sequence[dict], weights=None, k_pct: float = 0.2, workers: int = 1) -> dict:
    if not 0 < k_pct <= 1:
        raise ConfigError(f"k_pct must lie in (0, 1], got {k_pct}")
    check_compatible([base, *models])
    w = _weights(weights, len(models), 1.0)

    def one(name):
        trimmed = [trim_magnitude(d, k_pct) for d in _task_vectors(base, models, name)]
        return _consensus(base[name], trimmed, w)

    return _per_tensor(base, one, workers)


# ---------------------------------------------------------------- stochastic drops

def drop_and_rescale(delta: np.ndarray, drop_prob, rng: np.random.Generator) -> np.ndarray:
    """Zero each entry with probability ``drop_prob`` (scalar or per entry); scale survivors by ``1/(1-p)``."""
    keep = rng.random(delta.shape) >= drop_prob
    return np.where(keep, delta / (1.0 - np.asarray(drop_prob, np.float64)), 0.0)


def della_probabilities(delta: np.ndarray, p: float, eps: float) -> np.ndarray:
    """Per-entry drop probabilities ``(p - eps/2) + eps/n * rank``; rank 0 is the largest |delta|."""
    flat = np.abs(delta.reshape(-1))
    n = flat.size
    ranks = np.empty(n, dtype=np.float64)
    ranks[np.argsort(-flat, kind="stable")] = np.arange(n)
    # centered form of the same line; fewer roundings than (p - eps/2) + eps*rank/n
    return (p + eps * ((2 * ranks - n) / (2 * n))).reshape(delta.shape)


def dare(base: dict, models: Sequence[dict], weights=None, p: float = 0.5, mode: str = "linear",
         seed: int = 0, workers: int = 1) -> dict:
    """Random drop-and-rescale of task vectors, then task arithmetic (``linear``)
    or sign election with disjoint merge (``ties``)."""
    if not 0 <= p < 1:
        raise ConfigError(f"drop rate must lie in [0, 1), got {p}")
    if mode not in ("linear", "ties"):
        raise ConfigError(f"unknown DARE mode {mode!r}")
    check_compatible([base, *models])
    w = _weights(weights, len(models), 1.0)

    def one(name):
        rng = rng_from_seed(seed, name)
        deltas = [drop_and_rescale(d, p, rng) for d in _task_vectors(base, models, name)]
        if mode == "linear":
            return _combine(base[name], deltas, w)
        return _consensus(base[name], deltas, w)

    return _per_tensor(base, one, workers)


def della(base: dict, models: Sequence[dict], weights=None, p: float = 0.5, eps: float = 0.1,
          seed: int = 0, workers: int = 1) -> dict:
    """Magnitude-ranked drop probabilities, per-entry rescale, then sign election and disjoint merge."""
    _check_della(p, eps)
    check_compatible([base, *models])
    w = _weights(weights, len(models), 1.0)

    def one(name):
        rng = rng_from_seed(seed, name)
        deltas = [drop_and_rescale(d, della_probabilities(d, p, eps), rng)
                  for d in _task_vectors(base, models, name)]
        return _consensus(base[name], deltas, w)

    return _per_tensor(base, one, workers)


def _check_della(p: float, eps: float) -> None:
    if eps < 0:
        raise ConfigError("epsilon must be >= 0")
    if p - eps / 2 < 0 or p + eps / 2 >= 1:
        raise ConfigError(f"DELLA needs p - eps/2 >= 0 and p + eps/2 < 1 (p={p}, eps={eps})")


# ---------------------------------------------------------------- dispatch

@dataclass
class MergeSpec:
    method: str
    weights: Optional[list[float]] = None
    k_pct: float = 0.2
    drop_rate: float = 0.5
    epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown merge method {self.method!r}; choose from {METHODS}")
        if self.method == "soup" and self.weights is not None:
            total = float(np.sum(self.weights))
            if total == 0:
                raise ConfigError("soup weights sum to zero")
            self.weights = [float(x) / total for x in self.weights]
        if self.method == "ties" and not 0 < self.k_pct <= 1:
            raise ConfigError("k_pct must lie in (0, 1]")
        if self.method in ("dare_linear", "dare_ties") and not 0 <= self.drop_rate < 1:
            raise ConfigError("drop_rate must lie in [0, 1)")
        if self.method == "della":
            _check_della(self.drop_rate, self.epsilon)

    @property
    def needs_base(self) -> bool:
        return self.method != "soup"

    @classmethod
    def from_dict(cls, d: dict) -> "MergeSpec":
        known = {"method", "weights", "k_pct", "drop_rate", "epsilon", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown merge spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "MergeSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read merge spec {path}: {exc}") from None


def merge(spec: MergeSpec, models: Sequence[dict], base: Optional[dict] = None, workers: int = 1) -> dict:
    if spec.needs_base and base is None:
        raise InputError(f"{spec.method} needs a base checkpoint")
    m = spec.method
    if m == "soup":
        return soup(models, spec.weights, workers)
    if m == "task_arithmetic":
        return task_arithmetic(base, models, spec.weights, workers)
    if m == "ties":
        return ties(base, models, spec.weights, spec.k_pct, workers)
    if m == "dare_linear":
        return dare(base, models, spec.weights, spec.drop_rate, "linear", spec.seed, workers)
    if m == "dare_ties":
        return dare(base, models, spec.weights, spec.drop_rate, "ties", spec.seed, workers)
    return della(base, models, spec.weights, spec.drop_rate, spec.epsilon, spec.seed, workers)
