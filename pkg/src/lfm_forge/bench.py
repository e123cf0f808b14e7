"""Batch-1 prefill/decode throughput measurement.

Protocol: for each context length, prefill a seeded-random prompt of that
length, then decode ``n_decode`` tokens greedily. One untimed warmup run
precedes ``repeats`` timed runs; the report keeps the median of each rate.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Model, decode_step, prefill, state_nbytes
from .config import ModelConfig

SCHEMA_VERSION = 1


@dataclass
class RunTiming:
    context: int
    prefill_s: float
    decode_s: float
    state_bytes: int


@dataclass
class BenchReport:
    model: str
    n_decode: int
    repeats: int
    prefill_tok_per_s: dict[int, float]
    decode_tok_per_s: dict[int, float]
    peak_state_bytes: int
    runs: list[RunTiming] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["prefill_tok_per_s"] = {str(k): v for k, v in self.prefill_tok_per_s.items()}
        d["decode_tok_per_s"] = {str(k): v for k, v in self.decode_tok_per_s.items()}
        return d

    def table(self) -> str:
        lines = [f"model: {self.model}  (batch 1, {self.n_decode} decode tokens, median of {self.repeats})",
                 f"{'context':>8} {'prefill tok/s':>14} {'decode tok/s':>13}"]
        for ctx in self.prefill_tok_per_s:
            lines.append(f"{ctx:>8} {self.prefill_tok_per_s[ctx]:>14.1f} {self.decode_tok_per_s[ctx]:>13.2f}")
        lines.append(f"peak state bytes: {self.peak_state_bytes}")
        return "\n".join(lines)

    def rows(self) -> list[dict]:
        """One flat record per context length, for delimited output."""
        return [
            {"model": self.model, "context": ctx, "prefill_tok_per_s": self.prefill_tok_per_s[ctx],
             "decode_tok_per_s": self.decode_tok_per_s[ctx], "n_decode": self.n_decode, "repeats": self.repeats}
            for ctx in self.prefill_tok_per_s
        ]


def _one_run(model: Model, prompt: np.ndarray, n_decode: int) -> RunTiming:
    t0 = time.perf_counter()
    logits, state = prefill(model, prompt)
    t1 = time.perf_counter()
    token = int(np.argmax(logits[-1]))
    for _ in range(n_decode):
        token = int(np.argmax(decode_step(model, token, state)))
    t2 = time.perf_counter()
    return RunTiming(len(prompt), t1 - t0, t2 - t1, state_nbytes(model.config, state))


def run_bench(model: Model, context_lengths=(1024, 4096), n_decode: int = 100, repeats: int = 5,
              seed: int = 0, name: str = "model", warmup: bool = True) -> BenchReport:
    cfg = model.config
    for ctx in context_lengths:
        if ctx + n_decode > cfg.context_limit:
            raise ValueError(f"context {ctx} + {n_decode} decode tokens exceeds context_limit {cfg.context_limit}")
    rng = np.random.default_rng(seed)
    prefill_rate, decode_rate, runs = {}, {}, []
    peak = 0
    for ctx in context_lengths:
        prompt = rng.integers(0, cfg.vocab_size, ctx)
        if warmup:
            _one_run(model, prompt, n_decode)
        timings = [_one_run(model, prompt, n_decode) for _ in range(repeats)]
        runs.extend(timings)
        prefill_rate[ctx] = statistics.median(ctx / t.prefill_s for t in timings)
        decode_rate[ctx] = statistics.median(n_decode / t.decode_s for t in timings)
        peak = max(peak, max(t.state_bytes for t in timings))
    return BenchReport(name, n_decode, repeats, prefill_rate, decode_rate, peak, runs)


def trend_pair(width: int = 256, n_layers: int = 8, context_limit: int = 4200) -> dict[str, ModelConfig]:
    """A conv-only and an attention-only model of equal width and near-equal size.

    Attention layers use one KV group per head so both layer kinds carry
    about ``4 * width**2`` mixer parameters.
    """
    heads = width // 64
    common = dict(n_layers=n_layers, d_model=width, ff_dim=2 * width, n_heads=heads, n_kv_groups=heads,
                  head_size=64, conv_kernel=3, vocab_size=512, context_limit=context_limit)
    return {
        "conv": ModelConfig(attn_layer_indices=(), **common),
        "attention": ModelConfig(attn_layer_indices=tuple(range(n_layers)), **common),
    }
