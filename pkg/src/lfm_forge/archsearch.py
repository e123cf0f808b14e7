"""Architecture selection under device budgets: budget filtering, Pareto
dominance and hypervolume-improvement ranking, plus curriculum ordering of
training items by ensemble success rate."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, ParseError

MAX_EXACT_POINTS = 64

# (field, direction): +1 maximize, -1 minimize
DEFAULT_AXES = (("quality", 1), ("decode_ms_p50", -1), ("peak_mem_bytes", -1))


@dataclass(frozen=True)
class CandidatePoint:
    id: str
    quality: float
    ttft_ms: float
    decode_ms_p50: float
    decode_ms_p95: float
    peak_mem_bytes: float

    def __post_init__(self):
        for f in fields(self):
            if f.name == "id":
                continue
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise InputError(f"candidate {self.id}: {f.name}={v} must be finite and non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BudgetSpec:
    max_ttft_ms: float
    max_decode_ms: float
    max_peak_mem_bytes: float

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise InputError(f"budget {f.name} must be positive")

    @classmethod
    def load(cls, path) -> "BudgetSpec":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ParseError(f"cannot read budgets {path}: {exc}") from None


def read_candidates(path) -> list[CandidatePoint]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(CandidatePoint(**json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
        except (TypeError, InputError) as exc:
            raise ParseError(str(exc), lineno) from None
    return out


def filter_budgets(cands: Sequence[CandidatePoint], budget: BudgetSpec) -> list[CandidatePoint]:
    """Keep candidates within every budget; a value equal to its limit passes."""
    return [
        c for c in cands
        if c.ttft_ms <= budget.max_ttft_ms
        and c.decode_ms_p95 <= budget.max_decode_ms
        and c.peak_mem_bytes <= budget.max_peak_mem_bytes
    ]


def objectives(cands: Sequence[CandidatePoint], axes=DEFAULT_AXES) -> np.ndarray:
    """Candidates as rows in a pure maximization frame (costs negated)."""
    return np.array([[sign * getattr(c, name) for name, sign in axes] for c in cands], dtype=np.float64)


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a >= b) and np.any(a > b))


def nondominated_mask(points: np.ndarray) -> np.ndarray:
    n = len(points)
    keep = np.ones(n, bool)
    for i in range(n):
        ge = np.all(points >= points[i], axis=1)
        gt = np.any(points > points[i], axis=1)
        if np.any(ge & gt):
            keep[i] = False
    return keep


def pareto_front(cands: Sequence[CandidatePoint], axes=DEFAULT_AXES) -> list[CandidatePoint]:
    """Non-dominated candidates in input order. Exact duplicates are all kept."""
    if not cands:
        return []
    mask = nondominated_mask(objectives(cands, axes))
    return [c for c, k in zip(cands, mask) if k]


def _hv_recursive(points: np.ndarray, ref: np.ndarray) -> float:
    if len(points) == 0:
        return 0.0
    if points.shape[1] == 1:
        return float(points[:, 0].max() - ref[0])
    # sweep the last axis from the top; each slab is covered by the
    # lower-dimensional front of every point at or above it
    order = np.argsort(-points[:, -1], kind="stable")
    pts = points[order]
    total = 0.0
    for i in range(len(pts)):
        upper = pts[i, -1]
        lower = pts[i + 1, -1] if i + 1 < len(pts) else ref[-1]
        if upper <= lower:
            continue
        proj = pts[: i + 1, :-1]
        proj = proj[nondominated_mask(proj)]
        total += _hv_recursive(proj, ref[:-1]) * (upper - lower)
    return total


def hypervolume(points, reference, labels: Optional[Sequence[str]] = None) -> float:
    """Exact volume dominated by ``points`` (maximization frame) above ``reference``."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    if pts.size == 0:
        return 0.0
    if pts.shape[1] != ref.size:
        raise InputError(f"points have {pts.shape[1]} objectives, reference has {ref.size}")
    bad = np.nonzero(np.any(pts < ref, axis=1))[0]
    if bad.size:
        name = labels[bad[0]] if labels is not None else f"#{bad[0]}"
        raise InputError(f"point {name} does not dominate the reference point")
    front = np.unique(pts[nondominated_mask(pts)], axis=0)
    if len(front) > MAX_EXACT_POINTS:
        raise InputError(f"{len(front)} non-dominated points exceed the exact limit of {MAX_EXACT_POINTS}")
    return _hv_recursive(front, ref)


def default_reference(points) -> np.ndarray:
    """Componentwise worst value pushed out by 1% of its magnitude (or of the spread)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    worst = pts.min(axis=0)
    scale = np.maximum(np.abs(worst), pts.max(axis=0) - worst)
    margin = 0.01 * np.where(scale > 0, scale, 1.0)
    return worst - margin


def rank_by_hvi(front: Sequence[CandidatePoint], pool: Sequence[CandidatePoint],
                reference=None, axes=DEFAULT_AXES) -> list[tuple[CandidatePoint, float]]:
    """Pool candidates with their hypervolume improvement over ``front``, best first."""
    fp = objectives(front, axes) if front else np.zeros((0, len(axes)))
    pp = objectives(pool, axes) if pool else np.zeros((0, len(axes)))
    if reference is None:
        reference = default_reference(np.vstack([fp, pp]))
    ref = np.asarray(reference, dtype=np.float64)
    base = hypervolume(fp, ref, [c.id for c in front]) if len(fp) else 0.0
    ranked = []
    for c, p in zip(pool, pp):
        hv = hypervolume(np.vstack([fp, p[None]]), ref, [x.id for x in front] + [c.id])
        ranked.append((c, max(hv - base, 0.0)))
    ranked.sort(key=lambda cv: (-cv[1], cv[0].id))
    return ranked


def curriculum_order(outcomes) -> tuple[np.ndarray, np.ndarray]:
    """Per-item success rate across models and the easiest-first item order."""
    r = np.asarray(outcomes)
    if r.ndim != 2 or r.shape[1] < 1:
        raise InputError("outcomes must be an [items, models] matrix with at least one model")
    if not np.all((r == 0) | (r == 1)):
        raise InputError("outcomes must be binary")
    p = r.mean(axis=1, dtype=np.float64)
    return p, np.argsort(-p, kind="stable")
