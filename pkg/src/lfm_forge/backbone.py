"""Hybrid decoder stack: gated short convolutions, grouped-query attention,
SwiGLU or mixture-of-experts feed-forward, with prefill and streaming decode.

Every layer is pre-norm residual::

    h = h + mixer(rms_norm(h))       # gated conv or GQA
    h = h + ffn(rms_norm(h))         # SwiGLU, or MoE after the dense prefix
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .errors import CapacityError, ConfigError, DimensionError, InputError
from .tensor import DTYPE, as_tensor, conv_valid, rms_norm, rng_from_seed, rope_rotate, softmax_last, swiglu

# query rows per attention tile during prefill; bounds the score matrix size
_QUERY_TILE = 512


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    _blocks: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        missing, wrong = check_params(self.config, self.params)
        if missing or wrong:
            raise ConfigError(f"parameters do not match config: missing={missing[:10]} wrong_shape={wrong[:10]}")

    def block(self, prefix: str) -> dict[str, np.ndarray]:
        """Parameters under ``prefix.`` keyed by their short names."""
        cached = self._blocks.get(prefix)
        if cached is None:
            p = prefix + "."
            cached = {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}
            self._blocks[prefix] = cached
        return cached

    @property
    def head(self) -> np.ndarray:
        if self.config.tie_embeddings:
            return self.params["embed"].T
        return self.params["lm_head"]

    def with_params(self, updates: dict[str, np.ndarray]) -> "Model":
        params = dict(self.params)
        params.update(updates)
        return Model(self.config, params)


@dataclass
class SessionState:
    """Per-session decode caches. Single owner; not thread-safe."""

    position: int = 0
    conv: dict[int, np.ndarray] = field(default_factory=dict)
    keys: dict[int, np.ndarray] = field(default_factory=dict)
    values: dict[int, np.ndarray] = field(default_factory=dict)
    moe_load: dict[int, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "SessionState":
        return copy.deepcopy(self)

    def kv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Live keys/values for ``layer`` as ``[groups, position, head_size]`` views."""
        return self.keys[layer][:, : self.position], self.values[layer][:, : self.position]


def new_session(config: ModelConfig) -> SessionState:
    state = SessionState()
    for i in range(config.n_layers):
        if config.is_attention(i):
            shape = (config.n_kv_groups, 0, config.head_size)
            state.keys[i] = np.zeros(shape, DTYPE)
            state.values[i] = np.zeros(shape, DTYPE)
        else:
            state.conv[i] = np.zeros((config.conv_kernel - 1, config.d_model), DTYPE)
        if config.is_moe(i):
            state.moe_load[i] = np.zeros(config.moe.n_experts, dtype=np.int64)
    return state


def state_floats(config: ModelConfig, state: SessionState) -> int:
    """Floats held by ``state``: ``(k-1)*d`` per conv layer plus ``2*groups*head_size`` per cached position."""
    total = 0
    for i in range(config.n_layers):
        if config.is_attention(i):
            total += 2 * config.n_kv_groups * config.head_size * state.position
        else:
            total += state.conv[i].size
    return total


def state_nbytes(config: ModelConfig, state: SessionState) -> int:
    return state_floats(config, state) * np.dtype(DTYPE).itemsize


# ---------------------------------------------------------------- parameters

def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V, k = config.d_model, config.ff_dim, config.vocab_size, config.conv_kernel
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.op_norm"] = (d,)
        if config.is_attention(i):
            shapes[f"{p}.attn.q_proj"] = (d, config.attn_width)
            shapes[f"{p}.attn.k_proj"] = (d, config.kv_width)
            shapes[f"{p}.attn.v_proj"] = (d, config.kv_width)
            shapes[f"{p}.attn.o_proj"] = (config.attn_width, d)
            shapes[f"{p}.attn.q_norm"] = (config.head_size,)
            shapes[f"{p}.attn.k_norm"] = (config.head_size,)
        else:
            shapes[f"{p}.conv.in_proj"] = (d, 3 * d)
            shapes[f"{p}.conv.conv_weight"] = (d, k)
            shapes[f"{p}.conv.conv_bias"] = (d,)
            shapes[f"{p}.conv.out_proj"] = (d, d)
        shapes[f"{p}.ffn_norm"] = (d,)
        if config.is_moe(i):
            m = config.moe
            shapes[f"{p}.moe.router"] = (d, m.n_experts)
            shapes[f"{p}.moe.router_bias"] = (m.n_experts,)
            for e in range(m.n_experts):
                shapes[f"{p}.moe.experts.{e}.w_gate"] = (d, m.expert_ff_dim)
                shapes[f"{p}.moe.experts.{e}.w_up"] = (d, m.expert_ff_dim)
                shapes[f"{p}.moe.experts.{e}.w_down"] = (m.expert_ff_dim, d)
        else:
            shapes[f"{p}.ffn.w_gate"] = (d, f)
            shapes[f"{p}.ffn.w_up"] = (d, f)
            shapes[f"{p}.ffn.w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    if not config.tie_embeddings:
        shapes["lm_head"] = (d, V)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def check_params(config: ModelConfig, params: dict) -> tuple[list[str], list[str]]:
    """Names missing from ``params`` and names present with the wrong shape."""
    missing, wrong = [], []
    for name, shape in param_shapes(config).items():
        if name not in params:
            missing.append(name)
        elif tuple(params[name].shape) != shape:
            wrong.append(name)
    return missing, wrong


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Allocate parameters: linear weights ~ N(0, 1/fan_in), norm gains 1, biases 0."""
    config.validate()
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("op_norm", "ffn_norm", "final_norm", "q_norm", "k_norm"):
            value = np.ones(shape, DTYPE)
        elif leaf in ("conv_bias", "router_bias"):
            value = np.zeros(shape, DTYPE)
        else:
            rng = rng_from_seed(seed, name)
            # embedding rows are looked up, not multiplied; unit variance
            fan_in = 1 if name == "embed" else shape[-1] if leaf == "conv_weight" else shape[0]
            value = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(DTYPE)
        params[name] = value
    return Model(config, params)


# ---------------------------------------------------------------- blocks

def gated_conv_block(h, w: dict, history: Optional[np.ndarray] = None) -> np.ndarray:
    """``(B, C, h~) = in_proj(h); y = B*h~; z = conv(y); o = out_proj(C*z)``."""
    return _gated_conv(as_tensor(h), w, history)[0]


def _gated_conv(h: np.ndarray, w: dict, history: Optional[np.ndarray]):
    d = h.shape[-1]
    if w["in_proj"].shape != (d, 3 * d):
        raise DimensionError(f"gated_conv_block: input width {d} does not match in_proj {w['in_proj'].shape}")
    proj = h @ w["in_proj"]
    b, c, h_tilde = proj[:, :d], proj[:, d : 2 * d], proj[:, 2 * d :]
    y = b * h_tilde
    k = w["conv_weight"].shape[1]
    if history is None:
        history = np.zeros((k - 1, d), DTYPE)
    padded = np.concatenate([history, y], axis=0)
    z = conv_valid(padded, w["conv_weight"], w["conv_bias"])
    o = (c * z) @ w["out_proj"]
    return o, padded[padded.shape[0] - (k - 1) :]


def gqa_block(h, w: dict, config: ModelConfig, state: Optional[SessionState] = None,
              layer: Optional[int] = None) -> np.ndarray:
    """Causal grouped-query attention with QK-Norm then RoPE.

    Without ``state`` the block attends within ``h`` alone. With ``state`` the
    new keys/values are appended to the layer's cache and queries start at
    ``state.position`` (the caller advances the position).
    """
    h = as_tensor(h)
    L = h.shape[0]
    H, G, s = config.n_heads, config.n_kv_groups, config.head_size
    start = 0 if state is None else state.position
    if start + L > config.context_limit:
        raise CapacityError(f"position {start + L} exceeds context_limit {config.context_limit}")
    positions = np.arange(start, start + L)
    q = (h @ w["q_proj"]).reshape(L, H, s)
    k = (h @ w["k_proj"]).reshape(L, G, s)
    v = (h @ w["v_proj"]).reshape(L, G, s)
    q = rope_rotate(rms_norm(q, w["q_norm"], config.norm_eps), config.rope_base, positions)
    k = rope_rotate(rms_norm(k, w["k_norm"], config.norm_eps), config.rope_base, positions)
    k = k.transpose(1, 0, 2)
    v = v.transpose(1, 0, 2)
    if state is None:
        keys, vals = k, v
    else:
        keys, vals = _append_kv(state, layer, k, v, start + L)
    out = _attend(q, keys, vals, positions, G)
    return out.reshape(L, H * s) @ w["o_proj"]


def _append_kv(state: SessionState, layer: int, k: np.ndarray, v: np.ndarray, new_len: int):
    kc, vc = state.keys[layer], state.values[layer]
    cap = kc.shape[1]
    if new_len > cap:
        # amortized doubling; only [:position] is live
        new_cap = max(new_len, 2 * cap, 16)
        grow = lambda a: np.concatenate([a, np.zeros((a.shape[0], new_cap - cap, a.shape[2]), DTYPE)], axis=1)
        kc, vc = grow(kc), grow(vc)
        state.keys[layer], state.values[layer] = kc, vc
    start = new_len - k.shape[1]
    kc[:, start:new_len] = k
    vc[:, start:new_len] = v
    return kc[:, :new_len], vc[:, :new_len]


def _attend(q: np.ndarray, keys: np.ndarray, vals: np.ndarray, positions: np.ndarray, G: int) -> np.ndarray:
    """``q[L,H,s]`` against ``keys/vals[G,T,s]``; query row t sees keys ``<= positions[t]``."""
    L, H, s = q.shape
    r = H // G
    scale = DTYPE(1.0 / np.sqrt(s))
    # [G, r, L, s]: head h reads group h // r
    qg = q.transpose(1, 0, 2).reshape(G, r, L, s)
    out = np.empty((G, r, L, s), DTYPE)
    key_pos = np.arange(keys.shape[1])
    for t0 in range(0, L, _QUERY_TILE):
        t1 = min(L, t0 + _QUERY_TILE)
        hi = positions[t1 - 1] + 1
        scores = np.matmul(qg[:, :, t0:t1], keys[:, None, :hi].swapaxes(-1, -2)) * scale
        if positions[t0] + 1 >= hi:
            # the earliest query in the tile already sees every key
            probs = softmax_last(scores)
        else:
            probs = softmax_last(scores, key_pos[None, :hi] <= positions[t0:t1, None])
        out[:, :, t0:t1] = np.matmul(probs.astype(DTYPE, copy=False), vals[:, None, :hi])
    return out.reshape(H, L, s).transpose(1, 0, 2)


def moe_ffn(x, w: dict, top_k: int):
    """Sparse SwiGLU experts behind a normalized sigmoid router.

    The routing bias shifts which experts are selected but never the gate
    values, which are the selected raw sigmoid scores renormalized to sum 1.
    Returns ``(output, load)`` where ``load[e]`` counts tokens routed to ``e``.
    """
    x = as_tensor(x)
    router = w["router"]
    E = router.shape[1]
    if not 1 <= top_k <= E:
        raise ConfigError(f"top_k={top_k} must lie in [1, {E}]")
    selected, gates = route(x @ router, w["router_bias"], top_k)
    out = np.zeros_like(x)
    load = np.zeros(E, dtype=np.int64)
    for e in range(E):
        rows, slot = np.nonzero(selected == e)
        load[e] = rows.size
        if rows.size == 0:
            continue
        ew = (w[f"experts.{e}.w_gate"], w[f"experts.{e}.w_up"], w[f"experts.{e}.w_down"])
        y = swiglu(x[rows], *ew)
        out[rows] += gates[rows, slot][:, None] * y
    return out, load


def route(logits: np.ndarray, bias: np.ndarray, top_k: int):
    """Top-k expert ids per token and their renormalized sigmoid gates."""
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    # stable sort: equal biased scores prefer the lower expert index
    selected = np.argsort(-(scores + bias), axis=-1, kind="stable")[:, :top_k]
    raw = np.take_along_axis(scores, selected, axis=-1)
    gates = (raw / raw.sum(axis=-1, keepdims=True)).astype(DTYPE)
    return selected, gates


def update_router_bias(load, bias, step: float) -> np.ndarray:
    """Raise the bias of under-loaded experts and lower it for overloaded ones."""
    load = np.asarray(load, dtype=np.float64)
    return (np.asarray(bias) + step * np.sign(load.mean() - load)).astype(DTYPE)


# ---------------------------------------------------------------- model forward

def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        bad = ids[(ids < 0) | (ids >= config.vocab_size)][0]
        raise InputError(f"token id {bad} outside vocabulary of {config.vocab_size}")
    return ids


def hidden_states(model: Model, tokens, state: Optional[SessionState] = None) -> np.ndarray:
    """Final-norm hidden states ``[L, d]`` for ``tokens``, advancing ``state`` if given."""
    cfg = model.config
    ids = _check_tokens(cfg, tokens)
    L = ids.size
    if L < 1:
        raise InputError("at least one token is required")
    start = 0 if state is None else state.position
    if start + L > cfg.context_limit:
        raise CapacityError(f"{start + L} positions exceed context_limit {cfg.context_limit}")
    h = model.params["embed"][ids]
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        x = rms_norm(h, model.params[f"{p}.op_norm"], cfg.norm_eps)
        if cfg.is_attention(i):
            o = gqa_block(x, model.block(f"{p}.attn"), cfg, state, i)
        else:
            o, hist = _gated_conv(x, model.block(f"{p}.conv"), None if state is None else state.conv[i])
            if state is not None:
                state.conv[i] = hist.copy()
        h = h + o
        x = rms_norm(h, model.params[f"{p}.ffn_norm"], cfg.norm_eps)
        if cfg.is_moe(i):
            f, load = moe_ffn(x, model.block(f"{p}.moe"), cfg.moe.top_k)
            if state is not None:
                state.moe_load[i] += load
        else:
            ffn = model.block(f"{p}.ffn")
            f = swiglu(x, ffn["w_gate"], ffn["w_up"], ffn["w_down"])
        h = h + f
    if state is not None:
        state.position += L
    return rms_norm(h, model.params["final_norm"], cfg.norm_eps)


def extend(model: Model, tokens, state: SessionState) -> np.ndarray:
    """Feed a chunk of tokens through an existing session; returns ``[L, vocab]`` logits."""
    return hidden_states(model, tokens, state) @ model.head


def prefill(model: Model, tokens) -> tuple[np.ndarray, SessionState]:
    state = new_session(model.config)
    logits = extend(model, tokens, state)
    return logits, state


def decode_step(model: Model, token: int, state: SessionState) -> np.ndarray:
    if state.position >= model.config.context_limit:
        raise CapacityError(f"session is full at {state.position} positions")
    return extend(model, [token], state)[0]


def recompute_logits(model: Model, tokens: Sequence[int]) -> np.ndarray:
    """Cache-free full forward; the oracle that streaming decode must reproduce."""
    return hidden_states(model, tokens, None) @ model.head
