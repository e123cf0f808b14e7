"""Length-normalized direct alignment losses.

Inputs are sequence log-probabilities already summed over tokens, so the
loss family is independent of any particular model. Per triple::

    u_w = beta * (logp_policy_chosen - logp_ref_chosen) / len_chosen
    u_l = beta * (logp_policy_rejected - logp_ref_rejected) / len_rejected
    loss = -[omega * f(u_w - u_l - margin) + lam * g(sigmoid(u_w) - sigmoid(u_l))]

averaged over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, ParseError

F_KINDS = ("log_sigmoid", "zero")
G_KINDS = ("identity", "zero")

# column order of the gradient array returned by ln_align_loss
GRAD_FIELDS = ("logp_policy_chosen", "logp_policy_rejected", "logp_ref_chosen", "logp_ref_rejected")


@dataclass(frozen=True)
class PreferenceTriple:
    logp_policy_chosen: float
    logp_policy_rejected: float
    logp_ref_chosen: float
    logp_ref_rejected: float
    len_chosen: int
    len_rejected: int
    prompt_len: int = 0

    def __post_init__(self):
        if self.len_chosen < 1 or self.len_rejected < 1:
            raise InputError("response lengths must be >= 1")
        for name in GRAD_FIELDS:
            if getattr(self, name) > 0:
                raise InputError(f"{name} must be a log-probability (<= 0)")


@dataclass(frozen=True)
class AlignConfig:
    omega: float = 1.0
    f_kind: str = "log_sigmoid"
    margin: float = 0.0
    lam: float = 0.0
    g_kind: str = "zero"
    beta: float = 5.0

    def __post_init__(self):
        if self.f_kind not in F_KINDS:
            raise ConfigError(f"f_kind must be one of {F_KINDS}")
        if self.g_kind not in G_KINDS:
            raise ConfigError(f"g_kind must be one of {G_KINDS}")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if not all(np.isfinite([self.omega, self.margin, self.lam])):
            raise ConfigError("weights must be finite")


PRESETS = {
    "dpo_ln": AlignConfig(omega=1.0, f_kind="log_sigmoid", margin=0.0, lam=0.0, g_kind="zero", beta=5.0),
    "apo_zero_ln": AlignConfig(omega=0.0, f_kind="zero", margin=0.0, lam=1.0, g_kind="identity", beta=5.0),
    "joint": AlignConfig(omega=1.0, f_kind="log_sigmoid", margin=0.1, lam=0.2, g_kind="identity", beta=5.0),
}


def preset(name: str, **overrides) -> AlignConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def implicit_reward(triple: PreferenceTriple, which: str, beta: float) -> float:
    if not beta > 0:
        raise ConfigError("beta must be positive")
    if which == "chosen":
        return beta * (triple.logp_policy_chosen - triple.logp_ref_chosen)
    if which == "rejected":
        return beta * (triple.logp_policy_rejected - triple.logp_ref_rejected)
    raise InputError("which must be 'chosen' or 'rejected'")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _as_columns(batch: Sequence[PreferenceTriple]) -> dict[str, np.ndarray]:
    if len(batch) == 0:
        raise InputError("empty preference batch")
    cols = {name: np.array([getattr(t, name) for t in batch], dtype=np.float64)
            for name in GRAD_FIELDS + ("len_chosen", "len_rejected")}
    return cols


def ln_align_loss(batch: Sequence[PreferenceTriple], config: AlignConfig) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient ``[n, 4]`` w.r.t. the log-probs in ``GRAD_FIELDS`` order."""
    c = _as_columns(batch)
    n = c["len_chosen"].size
    sw = config.beta / c["len_chosen"]
    sl = config.beta / c["len_rejected"]
    u_w = sw * (c["logp_policy_chosen"] - c["logp_ref_chosen"])
    u_l = sl * (c["logp_policy_rejected"] - c["logp_ref_rejected"])

    x = u_w - u_l - config.margin
    if config.f_kind == "log_sigmoid":
        f, df = _log_sigmoid(x), _sigmoid(-x)
    else:
        f = df = np.zeros(n)
    sig_w, sig_l = _sigmoid(u_w), _sigmoid(u_l)
    delta = sig_w - sig_l
    if config.g_kind == "identity":
        g, dg = delta, np.ones(n)
    else:
        g = dg = np.zeros(n)

    loss = -(config.omega * f + config.lam * g)
    # d loss / d u_w and d loss / d u_l
    d_uw = -(config.omega * df + config.lam * dg * sig_w * (1 - sig_w))
    d_ul = config.omega * df + config.lam * dg * sig_l * (1 - sig_l)
    grad = np.stack([d_uw * sw, d_ul * sl, -d_uw * sw, -d_ul * sl], axis=1) / n
    return float(loss.mean()), grad


def read_preferences(path) -> list[PreferenceTriple]:
    """Parse line-delimited JSON preference records."""
    required = ("len_chosen", "len_rejected") + GRAD_FIELDS
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
        missing = [k for k in required if k not in obj]
        if missing:
            raise ParseError(f"missing fields {missing}", lineno)
        try:
            out.append(PreferenceTriple(
                **{k: float(obj[k]) for k in GRAD_FIELDS},
                len_chosen=int(obj["len_chosen"]),
                len_rejected=int(obj["len_rejected"]),
                prompt_len=int(obj.get("prompt_len", 0)),
            ))
        except (InputError, TypeError, ValueError) as exc:
            raise ParseError(str(exc), lineno) from None
    return out
