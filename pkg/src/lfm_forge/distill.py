"""Decoupled, tempered Top-K distillation losses with analytic gradients.

A teacher is known only through its Top-K logits per position plus the
log-sum-exp of everything it left out (the "tail"). The forward KL splits
into a Bernoulli term on how much mass sits in the Top-K set and a
conditional KL inside the set; only the conditional part is tempered.

All loss arithmetic is float64. Gradients are with respect to the raw
student logits over the full vocabulary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, InputError, ParseError

PROB_FLOOR = 1e-12
_LOG_FLOOR = float(np.log(PROB_FLOOR))

TKD_MAGIC = b"TKD1"


def _lse(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return -np.inf
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(x - m))))


def _log_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x - _lse(x)


@dataclass(frozen=True)
class TopKRecord:
    """Teacher Top-K for one position: token ids, their logits, and the tail log-sum-exp."""

    indices: np.ndarray
    teacher_logits: np.ndarray
    vocab_size: int
    tail_lse: float = -np.inf

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        logits = np.asarray(self.teacher_logits, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "teacher_logits", logits)
        object.__setattr__(self, "tail_lse", float(self.tail_lse))
        K = idx.size
        if K < 1:
            raise InputError("a Top-K record needs at least one index")
        if K > self.vocab_size:
            raise InputError(f"K={K} exceeds vocabulary size {self.vocab_size}")
        if logits.size != K:
            raise InputError(f"{K} indices but {logits.size} teacher logits")
        if idx.min() < 0 or idx.max() >= self.vocab_size:
            raise InputError("Top-K index outside the vocabulary")
        if np.unique(idx).size != K:
            raise InputError("Top-K indices must be distinct")
        if K == self.vocab_size and self.tail_lse != -np.inf:
            raise InputError("a record covering the whole vocabulary cannot carry tail mass")

    @property
    def k(self) -> int:
        return self.indices.size

    def teacher_log_mass(self) -> tuple[float, float]:
        """``(log P_T(topk), log P_T(tail))``."""
        lse_top = _lse(self.teacher_logits)
        z = np.logaddexp(lse_top, self.tail_lse)
        return lse_top - z, self.tail_lse - z

    @property
    def teacher_mass(self) -> float:
        return float(np.exp(self.teacher_log_mass()[0]))

    @classmethod
    def from_logits(cls, logits, k: int) -> "TopKRecord":
        """Keep the ``k`` largest of a full teacher logit vector (ties to lower id)."""
        logits = np.asarray(logits, dtype=np.float64)
        order = np.argsort(-logits, kind="stable")
        top, rest = order[:k], order[k:]
        return cls(top, logits[top], logits.size, _lse(logits[rest]))

    @classmethod
    def from_distribution(cls, probs, indices) -> "TopKRecord":
        """Record for an explicit teacher distribution restricted to ``indices``."""
        probs = np.asarray(probs, dtype=np.float64)
        idx = np.asarray(indices, dtype=np.int64)
        mask = np.zeros(probs.size, bool)
        mask[idx] = True
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        return cls(idx, logp[idx], probs.size, _lse(logp[~mask]))


@dataclass(frozen=True)
class DtkBreakdown:
    binary_term: float
    conditional_term: float
    topk_mass_teacher: float
    topk_mass_student: float
    total: float
    clamped: bool = False


@dataclass
class _Split:
    """Student quantities shared by the forward and reverse objectives."""

    in_topk: np.ndarray
    log_b: float
    log_1mb: float
    cond_top: np.ndarray   # student softmax restricted to the Top-K
    cond_tail: np.ndarray  # student softmax restricted to the tail
    clamped: bool


def _split(student_logits: np.ndarray, record: TopKRecord) -> _Split:
    s = np.asarray(student_logits, dtype=np.float64).reshape(-1)
    if s.size != record.vocab_size:
        raise InputError(f"student has {s.size} logits, record vocabulary is {record.vocab_size}")
    in_topk = np.zeros(s.size, bool)
    in_topk[record.indices] = True
    z = _lse(s)
    lse_top = _lse(s[record.indices])
    lse_tail = _lse(s[~in_topk])
    log_b, log_1mb = lse_top - z, lse_tail - z
    clamped = False
    if log_b < _LOG_FLOOR:
        log_b, clamped = _LOG_FLOOR, True
    if record.k < record.vocab_size and log_1mb < _LOG_FLOOR:
        log_1mb, clamped = _LOG_FLOOR, True
    cond_top = np.exp(s[record.indices] - lse_top)
    cond_tail = np.exp(s[~in_topk] - lse_tail) if lse_tail > -np.inf else np.zeros((~in_topk).sum())
    return _Split(in_topk, log_b, log_1mb, cond_top, cond_tail, clamped)


def _scatter(record: TopKRecord, sp: _Split, on_top: np.ndarray, on_tail: np.ndarray) -> np.ndarray:
    grad = np.zeros(record.vocab_size)
    grad[record.indices] = on_top
    grad[~sp.in_topk] = on_tail
    return grad


def _bern_kl(log_p: float, log_1mp: float, log_q: float, log_1mq: float) -> float:
    """KL(Bern(p) || Bern(q)) from log-probabilities, with 0 log 0 = 0."""
    p, one_mp = np.exp(log_p), np.exp(log_1mp)
    out = 0.0
    if p > 0:
        out += p * (log_p - log_q)
    if one_mp > 0:
        out += one_mp * (log_1mp - log_1mq)
    return float(out)


def _tempered_conditionals(student_top: np.ndarray, record: TopKRecord, tau: float):
    log_qs = _log_softmax(student_top / tau)
    log_qt = _log_softmax(record.teacher_logits / tau)
    return log_qs, log_qt


def dtk_loss(student_logits, record: TopKRecord, tau: float = 1.0) -> tuple[DtkBreakdown, np.ndarray]:
    """Forward decoupled Top-K loss ``L_B + P_T(topk) * tau^2 * KL(p_t^tau || p_s^tau)``."""
    if not tau >= 1:
        raise DomainError(f"temperature must be >= 1, got {tau}")
    s = np.asarray(student_logits, dtype=np.float64).reshape(-1)
    sp = _split(s, record)
    log_a, log_1ma = record.teacher_log_mass()
    a, b = float(np.exp(log_a)), float(np.exp(sp.log_b))

    binary = _bern_kl(log_a, log_1ma, sp.log_b, sp.log_1mb)
    log_qs, log_qt = _tempered_conditionals(s[record.indices], record, tau)
    qt, qs = np.exp(log_qt), np.exp(log_qs)
    cond_kl = float(np.sum(qt * (log_qt - log_qs)))
    conditional = a * tau * tau * cond_kl

    # d L_B / d s_j reduces to (b - a) * cond_top_j inside and (a - b) * cond_tail_j outside
    grad = _scatter(
        record, sp,
        (b - a) * sp.cond_top + a * tau * (qs - qt),
        (a - b) * sp.cond_tail,
    )
    out = DtkBreakdown(binary, conditional, a, b, binary + conditional, sp.clamped)
    return out, grad


def reverse_dtk_loss(student_logits, record: TopKRecord, tau: float = 1.0,
                     variant: str = "lower_bound") -> tuple[DtkBreakdown, np.ndarray]:
    """Reverse-KL counterpart; the conditional term is weighted by the student's
    Top-K mass (``lower_bound``) or the teacher's (``teacher_weighted``)."""
    if variant not in ("lower_bound", "teacher_weighted"):
        raise InputError(f"unknown reverse variant {variant!r}")
    if not tau >= 1:
        raise DomainError(f"temperature must be >= 1, got {tau}")
    s = np.asarray(student_logits, dtype=np.float64).reshape(-1)
    sp = _split(s, record)
    log_a, log_1ma = record.teacher_log_mass()
    a, b = float(np.exp(log_a)), float(np.exp(sp.log_b))
    one_mb = float(np.exp(sp.log_1mb)) if record.k < record.vocab_size else 0.0

    binary = _bern_kl(sp.log_b, sp.log_1mb, log_a, log_1ma)
    log_qs, log_qt = _tempered_conditionals(s[record.indices], record, tau)
    qs = np.exp(log_qs)
    inner = float(np.sum(qs * (log_qs - log_qt)))
    rev = tau * tau * inner
    d_rev = tau * qs * (log_qs - log_qt - inner)

    # d b / d s_j = b (1 - b) cond_top_j inside, -b (1 - b) cond_tail_j outside
    var_b = b * one_mb
    if var_b > 0:
        d_binary = (sp.log_b - log_a) - (sp.log_1mb - log_1ma)
    else:
        d_binary = 0.0
    top = var_b * d_binary * sp.cond_top
    tail = -var_b * d_binary * sp.cond_tail
    if variant == "lower_bound":
        weight = b
        top = top + b * d_rev + rev * var_b * sp.cond_top
        tail = tail - rev * var_b * sp.cond_tail
    else:
        weight = a
        top = top + a * d_rev
    conditional = weight * rev
    out = DtkBreakdown(binary, conditional, a, b, binary + conditional, sp.clamped)
    return out, _scatter(record, sp, top, tail)


def full_forward_kl(teacher_probs, student_logits) -> float:
    """``sum_x P_T(x) log(P_T(x) / P_S(x))`` over the full vocabulary.

    Returns ``inf`` when the student assigns zero probability where the
    teacher does not.
    """
    p = np.asarray(teacher_probs, dtype=np.float64).reshape(-1)
    log_q = _log_softmax(student_logits)
    if p.size != log_q.size:
        raise InputError("teacher and student vocabularies differ")
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise InputError("teacher_probs must be a probability distribution")
    support = p > 0
    if np.any(np.isneginf(log_q[support])):
        return float("inf")
    return float(np.sum(p[support] * (np.log(p[support]) - log_q[support])))


def naive_truncated_tempered_kl(record: TopKRecord, student_logits, tau: float,
                                scaled: bool = True) -> float:
    """Temperature applied to a zero-tail truncated teacher over the full vocabulary.

    This is the unstable baseline: as ``tau`` grows the inner KL tends to
    ``log(|vocab| / K)`` instead of zero, so the ``tau^2``-scaled value blows up.
    """
    s = np.asarray(student_logits, dtype=np.float64).reshape(-1)
    log_pt = _log_softmax(record.teacher_logits / tau)
    log_ps = _log_softmax(s / tau)[record.indices]
    inner = float(np.sum(np.exp(log_pt) * (log_pt - log_ps)))
    return tau * tau * inner if scaled else inner


def cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    log_p = _log_softmax(logits)
    if not 0 <= label < log_p.size:
        raise InputError(f"label {label} outside vocabulary of {log_p.size}")
    grad = np.exp(log_p)
    grad[label] -= 1.0
    return float(-log_p[label]), grad


def kd_training_loss(student_logits, records: Sequence[TopKRecord], hard_labels,
                     tau: float = 2.0, alpha: float = 0.5) -> tuple[float, np.ndarray]:
    """Mean over positions of ``alpha * L_DTK + (1 - alpha) * CE(hard label)``."""
    if not 0 <= alpha <= 1:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    s = np.asarray(student_logits, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != len(records) or len(hard_labels) != len(records):
        raise InputError("need one record and one hard label per student row")
    L = s.shape[0]
    total = 0.0
    grad = np.zeros_like(s)
    for t in range(L):
        ce, g_ce = cross_entropy(s[t], int(hard_labels[t]))
        total += (1 - alpha) * ce
        grad[t] += (1 - alpha) * g_ce
        if alpha > 0:
            br, g = dtk_loss(s[t], records[t], tau)
            total += alpha * br.total
            grad[t] += alpha * g
    return total / L, grad / L


# ---------------------------------------------------------------- TKD1 files

_HEADER = struct.Struct("<4sIHQ")


def write_records(path, records: Sequence[TopKRecord]) -> None:
    if not records:
        raise InputError("no records to write")
    vocab, k = records[0].vocab_size, records[0].k
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TKD_MAGIC, vocab, k, len(records)))
        for r in records:
            if r.vocab_size != vocab or r.k != k:
                raise InputError("all records in a file share vocab_size and K")
            fh.write(r.indices.astype("<u4").tobytes())
            fh.write(r.teacher_logits.astype("<f4").tobytes())
            fh.write(np.array([r.tail_lse], "<f4").tobytes())


def read_records(path) -> list[TopKRecord]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, vocab, k, n = _HEADER.unpack_from(data)
    if magic != TKD_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    stride = 4 * k + 4 * k + 4
    if len(data) != _HEADER.size + n * stride:
        raise ParseError(f"{path}: expected {n} positions of {stride} bytes")
    out = []
    off = _HEADER.size
    for _ in range(n):
        idx = np.frombuffer(data, "<u4", k, off)
        logits = np.frombuffer(data, "<f4", k, off + 4 * k)
        tail = np.frombuffer(data, "<f4", 1, off + 8 * k)[0]
        out.append(TopKRecord(idx.astype(np.int64), logits.astype(np.float64), vocab, float(tail)))
        off += stride
    return out
