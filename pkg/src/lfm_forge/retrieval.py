"""Late-interaction retrieval: per-token embeddings, MaxSim scoring, and the
score-distillation objective used to train the projection head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .backbone import Model, hidden_states
from .errors import DegenerateInputError, DimensionError, InputError

QUERY_MAX_TOKENS = 32
DOC_MAX_TOKENS = 512
ROLES = ("query", "document")


@dataclass(frozen=True)
class TokenEmbeddings:
    vectors: np.ndarray  # [n_tokens, proj_dim], rows unit-norm
    role: str
    truncated: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise InputError(f"role must be one of {ROLES}")
        if self.vectors.ndim != 2:
            raise DimensionError("token embeddings must be [n_tokens, dim]")


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, np.finfo(x.dtype).tiny)


def encode(model: Model, projection: np.ndarray, tokens: Sequence[int], role: str = "document",
           max_tokens: Optional[int] = None) -> TokenEmbeddings:
    """Backbone hidden states, bias-free projection, then per-token L2 normalization.

    Inputs longer than the role's cap are truncated and flagged.
    """
    if role not in ROLES:
        raise InputError(f"role must be one of {ROLES}")
    cap = max_tokens or (QUERY_MAX_TOKENS if role == "query" else DOC_MAX_TOKENS)
    tokens = list(tokens)
    if not tokens:
        raise InputError(f"empty {role}")
    truncated = len(tokens) > cap
    tokens = tokens[:cap]
    if projection.shape[0] != model.config.d_model:
        raise DimensionError(f"projection expects width {projection.shape[0]}, model has {model.config.d_model}")
    h = hidden_states(model, tokens)
    return TokenEmbeddings(l2_normalize(h @ projection), role, truncated)


def maxsim_score(q: TokenEmbeddings, d: TokenEmbeddings) -> float:
    """Sum over query tokens of the best cosine similarity against any document token."""
    if q.role != "query" or d.role != "document":
        raise InputError("maxsim_score takes (query, document)")
    if q.vectors.shape[0] == 0 or d.vectors.shape[0] == 0:
        raise InputError("empty query or document")
    sim = np.asarray(q.vectors, np.float64) @ np.asarray(d.vectors, np.float64).T
    return float(sim.max(axis=1).sum())


def minmax_normalize(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if not hi > lo:
        raise DegenerateInputError("min-max normalization needs at least two distinct scores")
    return (s - lo) / (hi - lo)


@dataclass(frozen=True)
class ScoredCandidates:
    teacher_scores: np.ndarray
    student_scores: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.teacher_scores, np.float64).reshape(-1)
        s = np.asarray(self.student_scores, np.float64).reshape(-1)
        if t.size != s.size:
            raise InputError(f"{t.size} teacher scores but {s.size} student scores")
        if t.size < 2:
            raise InputError("need at least two candidates")
        object.__setattr__(self, "teacher_scores", t)
        object.__setattr__(self, "student_scores", s)


def distill_mse_loss(cands: ScoredCandidates, normalize_teacher: bool = True) -> tuple[float, np.ndarray]:
    """Mean squared error to the (min-max normalized) teacher scores, and its gradient."""
    t = minmax_normalize(cands.teacher_scores) if normalize_teacher else cands.teacher_scores
    diff = t - cands.student_scores
    m = diff.size
    return float(np.mean(diff**2)), -2.0 / m * diff


# ---------------------------------------------------------------- projection training

def _maxsim_backward(q: np.ndarray, d: np.ndarray):
    """Score and d(score)/d(q), d(score)/d(d) with the argmax held fixed."""
    sim = q @ d.T
    best = sim.argmax(axis=1)
    gq = d[best]
    gd = np.zeros_like(d)
    np.add.at(gd, best, q)
    return float(sim[np.arange(q.shape[0]), best].sum()), gq, gd


def _normalize_backward(u: np.ndarray, g: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    v = u / norm
    return (g - np.sum(g * v, axis=-1, keepdims=True) * v) / norm


def projection_loss_and_grad(projection: np.ndarray, query_hidden: np.ndarray,
                             doc_hidden: Sequence[np.ndarray], teacher_scores) -> tuple[float, np.ndarray]:
    """Score-distillation loss for one query group and its gradient w.r.t. the projection.

    The backbone is frozen: ``query_hidden`` and ``doc_hidden`` are its final
    hidden states. MaxSim is differentiated with the winning document token
    per query token held fixed.
    """
    P = np.asarray(projection, np.float64)
    hq = np.asarray(query_hidden, np.float64)
    uq = hq @ P
    q = l2_normalize(uq)
    scores, parts = [], []
    for hd in doc_hidden:
        hd = np.asarray(hd, np.float64)
        ud = hd @ P
        s, gq, gd = _maxsim_backward(q, l2_normalize(ud))
        scores.append(s)
        parts.append((hd, ud, gq, gd))
    loss, dscore = distill_mse_loss(ScoredCandidates(teacher_scores, scores))
    grad = np.zeros_like(P)
    gq_total = np.zeros_like(uq)
    for ds, (hd, ud, gq, gd) in zip(dscore, parts):
        gq_total += ds * gq
        grad += hd.T @ _normalize_backward(ud, ds * gd)
    grad += hq.T @ _normalize_backward(uq, gq_total)
    return loss, grad


def projection_step(projection: np.ndarray, query_hidden, doc_hidden, teacher_scores, lr: float = 0.1):
    """One plain gradient-descent step on the projection; returns ``(new_projection, loss_before)``."""
    loss, grad = projection_loss_and_grad(projection, query_hidden, doc_hidden, teacher_scores)
    return (np.asarray(projection, np.float64) - lr * grad).astype(np.float32), loss


# ---------------------------------------------------------------- document store

class DocumentIndex:
    """Immutable store of encoded documents keyed by id."""

    def __init__(self, docs: dict[str, np.ndarray]):
        self._docs = {k: np.asarray(v, np.float32) for k, v in docs.items()}

    def __len__(self):
        return len(self._docs)

    def __contains__(self, doc_id):
        return doc_id in self._docs

    def ids(self) -> list[str]:
        return list(self._docs)

    def embeddings(self, doc_id: str) -> TokenEmbeddings:
        return TokenEmbeddings(self._docs[doc_id], "document")

    def score(self, query: TokenEmbeddings) -> list[tuple[str, float]]:
        """All documents ranked by MaxSim score (descending, ties by id)."""
        scored = [(doc_id, maxsim_score(query, self.embeddings(doc_id))) for doc_id in self._docs]
        return sorted(scored, key=lambda kv: (-kv[1], kv[0]))

    def save(self, path) -> None:
        checkpoint.save(path, {f"doc/{k}": v for k, v in self._docs.items()})

    @classmethod
    def load(cls, path) -> "DocumentIndex":
        raw = checkpoint.load(path)
        bad = [k for k in raw if not k.startswith("doc/")]
        if bad:
            raise InputError(f"{path}: not a document store (unexpected tensor {bad[0]!r})")
        return cls({k[len("doc/"):]: v for k, v in raw.items()})
