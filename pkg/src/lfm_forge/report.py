"""Figures written next to the delimited command output."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .archsearch import CandidatePoint  # noqa: E402
from .bench import BenchReport  # noqa: E402


def write_rows(path, rows: Sequence[dict], delimiter: str = ",") -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter=delimiter)
        writer.writeheader()
        writer.writerows(rows)
    return path


def plot_bench(reports: Sequence[BenchReport], path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for rep in reports:
        ctx = list(rep.prefill_tok_per_s)
        axes[0].plot(ctx, [rep.prefill_tok_per_s[c] for c in ctx], marker="o", label=rep.model)
        axes[1].plot(ctx, [rep.decode_tok_per_s[c] for c in ctx], marker="o", label=rep.model)
    axes[0].set_title("prefill")
    axes[1].set_title(f"decode ({reports[0].n_decode} tokens)")
    for ax in axes:
        ax.set_xscale("log", base=2)
        ax.set_xlabel("context tokens")
        ax.set_ylabel("tokens / s")
        ax.grid(alpha=0.3)
    axes[1].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_pareto(cands: Sequence[CandidatePoint], front: Sequence[CandidatePoint], path) -> Path:
    front_ids = {c.id for c in front}
    fig, ax = plt.subplots(figsize=(5, 4))
    rest = [c for c in cands if c.id not in front_ids]
    mem = lambda cs: [c.peak_mem_bytes / 2**20 for c in cs]
    if rest:
        ax.scatter([c.decode_ms_p50 for c in rest], [c.quality for c in rest], s=[8 + m / 8 for m in mem(rest)],
                   c="0.7", label="dominated")
    if front:
        ax.scatter([c.decode_ms_p50 for c in front], [c.quality for c in front], s=[8 + m / 8 for m in mem(front)],
                   c="C3", label="front")
        for c in front:
            ax.annotate(c.id, (c.decode_ms_p50, c.quality), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("decode p50 (ms/token)")
    ax.set_ylabel("quality")
    ax.set_title("marker area ~ peak memory")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
