import json

import numpy as np
import pytest

from lfm_forge.backbone import (
    build_model,
    decode_step,
    extend,
    gated_conv_block,
    gqa_block,
    moe_ffn,
    new_session,
    param_count,
    prefill,
    recompute_logits,
    route,
    state_floats,
    update_router_bias,
)
from lfm_forge.config import ModelConfig, MoEConfig, evenly_spaced, toy_config
from lfm_forge.errors import CapacityError, ConfigError, InputError
from oracles import attention_oracle, conv_oracle, forward_oracle, moe_oracle, param_count_formula


def _tokens(n, vocab=256, seed=0):
    return np.random.default_rng(seed).integers(0, vocab, n)


# --- configuration

def test_table_shaped_config_param_count():
    cfg = ModelConfig(n_layers=16, d_model=64, ff_dim=192, n_heads=4, n_kv_groups=2, head_size=16,
                      attn_layer_indices=(2, 5, 8, 10, 12, 14), conv_kernel=3, vocab_size=300)
    model = build_model(cfg, 0)
    expected = param_count_formula(16, 64, 192, 4, 2, 16, 6, 3, 300)
    assert param_count(cfg) == expected
    assert sum(v.size for v in model.params.values()) == expected


def test_build_is_deterministic():
    a = build_model(toy_config(), 3).params
    b = build_model(toy_config(), 3).params
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_model(toy_config(), 4).params
    assert not np.array_equal(a["embed"], c["embed"])


def test_config_errors():
    with pytest.raises(ConfigError):
        toy_config(n_heads=5, n_kv_groups=2)
    with pytest.raises(ConfigError):
        toy_config(attn_layer_indices=(4,))
    with pytest.raises(ConfigError):
        toy_config(head_size=15)
    with pytest.raises(ConfigError):
        MoEConfig(n_experts=4, top_k=5, expert_ff_dim=8).validate()


def test_config_json_round_trip(tmp_path):
    cfg = toy_config(moe=MoEConfig(n_experts=4, top_k=2, expert_ff_dim=32))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    assert ModelConfig.load(path) == cfg
    d = json.loads(cfg.to_json())
    d["bogus"] = 1
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(d)


def test_attention_count_spreads_evenly():
    assert evenly_spaced(16, 3) == (4, 8, 12)
    d = toy_config().to_dict()
    d["attn_layer_indices"] = 1
    assert ModelConfig.from_dict(d).attn_layer_indices == (2,)


# --- blocks

def test_gated_conv_identity_configuration():
    d, k = 4, 3
    h = np.random.default_rng(0).standard_normal((6, d)).astype(np.float32)
    eye = np.eye(d, dtype=np.float32)
    # the projections carry no bias, so B = C = 1 needs an all-ones input
    ones = np.ones((6, d), np.float32)
    w = {
        "in_proj": np.concatenate([eye, eye, eye], axis=1),
        "conv_weight": np.eye(1, k, dtype=np.float32).repeat(d, axis=0),
        "conv_bias": np.zeros(d, np.float32),
        "out_proj": eye,
    }
    np.testing.assert_allclose(gated_conv_block(ones, w), ones)
    # same weights on a general input: B = C = h~ = h, so o = h**3
    np.testing.assert_allclose(gated_conv_block(h, w), h**3, rtol=1e-5)


def test_gated_conv_zero_input():
    model = build_model(toy_config(), 1)
    w = model.block("layers.0.conv")
    out = gated_conv_block(np.zeros((5, 64)), w)
    np.testing.assert_array_equal(out, 0.0)


def test_gated_conv_matches_oracle():
    rng = np.random.default_rng(5)
    d, k = 4, 3
    w = {
        "in_proj": rng.standard_normal((d, 3 * d)).astype(np.float32),
        "conv_weight": rng.standard_normal((d, k)).astype(np.float32),
        "conv_bias": rng.standard_normal(d).astype(np.float32),
        "out_proj": rng.standard_normal((d, d)).astype(np.float32),
    }
    h = rng.standard_normal((8, d)).astype(np.float32)
    ref = conv_oracle(h.astype(np.float64), {k_: v.astype(np.float64) for k_, v in w.items()})
    np.testing.assert_allclose(gated_conv_block(h, w), ref, atol=1e-5)


@pytest.mark.parametrize("groups", [4, 2, 1])
def test_gqa_matches_per_head_oracle(groups):
    cfg = toy_config(n_kv_groups=groups)
    w = build_model(cfg, 2).block("layers.2.attn")
    h = np.random.default_rng(1).standard_normal((12, 64)).astype(np.float32)
    ref = attention_oracle(h.astype(np.float64), {k: v.astype(np.float64) for k, v in w.items()}, cfg)
    np.testing.assert_allclose(gqa_block(h, w, cfg), ref, atol=1e-5)


def test_gqa_single_position_is_value_path():
    cfg = toy_config()
    w = build_model(cfg, 2).block("layers.2.attn")
    h = np.random.default_rng(1).standard_normal((1, 64)).astype(np.float32)
    v = (h @ w["v_proj"]).reshape(cfg.n_kv_groups, cfg.head_size)
    per_head = np.concatenate([v[hd // (cfg.n_heads // cfg.n_kv_groups)] for hd in range(cfg.n_heads)])
    np.testing.assert_allclose(gqa_block(h, w, cfg)[0], per_head @ w["o_proj"], atol=1e-5)


def test_gqa_causal():
    cfg = toy_config()
    w = build_model(cfg, 2).block("layers.2.attn")
    rng = np.random.default_rng(4)
    h = rng.standard_normal((10, 64)).astype(np.float32)
    h2 = h.copy()
    h2[6] += 1.0
    np.testing.assert_array_equal(gqa_block(h, w, cfg)[:6], gqa_block(h2, w, cfg)[:6])


# --- mixture of experts

def _moe_weights(E, d, f, rng, same=False):
    w = {"router": rng.standard_normal((d, E)).astype(np.float32), "router_bias": np.zeros(E, np.float32)}
    shared = [rng.standard_normal(s).astype(np.float32) for s in ((d, f), (d, f), (f, d))]
    for e in range(E):
        mats = shared if same else [rng.standard_normal(m.shape).astype(np.float32) for m in shared]
        for name, m in zip(("w_gate", "w_up", "w_down"), mats):
            w[f"experts.{e}.{name}"] = m
    return w


def test_moe_identical_experts_are_transparent():
    rng = np.random.default_rng(0)
    w = _moe_weights(4, 8, 16, rng, same=True)
    x = rng.standard_normal((5, 8)).astype(np.float32)
    from lfm_forge.tensor import swiglu

    out, _ = moe_ffn(x, w, 3)
    np.testing.assert_allclose(out, swiglu(x, w["experts.0.w_gate"], w["experts.0.w_up"], w["experts.0.w_down"]),
                               atol=1e-5)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def test_route_examples():
    sel, gates = route(_logit(np.array([[0.9, 0.1]])), np.zeros(2), 1)
    assert sel.tolist() == [[0]] and gates[0, 0] == 1.0
    sel, gates = route(_logit(np.array([[0.8, 0.6, 0.1, 0.05]])), np.zeros(4), 2)
    assert sel.tolist() == [[0, 1]]
    np.testing.assert_allclose(gates[0], [0.8 / 1.4, 0.6 / 1.4], rtol=1e-6)


def test_route_bias_changes_selection_not_gates():
    logits = _logit(np.array([[0.8, 0.6, 0.1]]))
    sel, gates = route(logits, np.array([0.0, 0.0, 1.0]), 2)
    assert sel.tolist() == [[2, 0]]
    np.testing.assert_allclose(gates[0], [0.1 / 0.9, 0.8 / 0.9], rtol=1e-6)


def test_moe_matches_oracle_and_counts_load():
    rng = np.random.default_rng(3)
    w = _moe_weights(4, 8, 16, rng)
    w["router_bias"] = np.array([0.0, 0.3, -0.2, 0.1], np.float32)
    x = rng.standard_normal((20, 8)).astype(np.float32)
    out, load = moe_ffn(x, w, 2)
    ref = moe_oracle(x.astype(np.float64), {k: v.astype(np.float64) for k, v in w.items()}, 2)
    np.testing.assert_allclose(out, ref, atol=1e-5)
    assert load.sum() == 40


def test_update_router_bias_examples():
    np.testing.assert_array_equal(update_router_bias([5, 5, 5], np.zeros(3), 0.1), 0.0)
    np.testing.assert_allclose(update_router_bias([10, 0], np.zeros(2), 0.01), [-0.01, 0.01])


def test_router_bias_balances_skewed_stream():
    rng = np.random.default_rng(0)
    E, d = 4, 8
    router = rng.standard_normal((d, E))
    x = rng.standard_normal((512, d)) + 1.5 * router[:, 0] / np.linalg.norm(router[:, 0])
    bias = np.zeros(E)
    variances = []
    for _ in range(60):
        sel, _ = route(x @ router, bias, 1)
        load = np.bincount(sel.ravel(), minlength=E)
        variances.append(load.var())
        bias = update_router_bias(load, bias, 0.02).astype(np.float64)
    # a running minimum never rises and ends far below the start
    running = np.minimum.accumulate(variances)
    assert running[-1] < 0.1 * variances[0]
    assert np.mean(variances[-10:]) < 0.2 * variances[0]


# --- prefill and decode

@pytest.fixture(scope="module")
def small_model():
    cfg = ModelConfig(n_layers=2, d_model=32, ff_dim=64, n_heads=2, n_kv_groups=1, head_size=16,
                      attn_layer_indices=(1,), conv_kernel=3, vocab_size=64, context_limit=512)
    return build_model(cfg, 7)


def test_prefill_matches_recompute_oracle(small_model):
    toks = _tokens(20, 64, 1)
    logits, _ = prefill(small_model, toks)
    np.testing.assert_allclose(logits, forward_oracle(small_model, toks), atol=1e-5)


def test_moe_model_matches_oracle():
    cfg = toy_config(n_layers=4, moe=MoEConfig(n_experts=4, top_k=2, expert_ff_dim=32, n_dense_prefix_layers=2))
    model = build_model(cfg, 2)
    toks = _tokens(9)
    logits, state = prefill(model, toks)
    np.testing.assert_allclose(logits, forward_oracle(model, toks), atol=1e-4)
    assert state.moe_load[3].sum() == 18


def test_tied_embeddings():
    model = build_model(toy_config(tie_embeddings=True), 1)
    assert "lm_head" not in model.params
    toks = _tokens(5)
    np.testing.assert_allclose(prefill(model, toks)[0], forward_oracle(model, toks), atol=1e-4)


def test_prefill_deterministic_and_causal(small_model):
    toks = _tokens(30, 64, 2)
    a, _ = prefill(small_model, toks)
    b, _ = prefill(small_model, toks)
    np.testing.assert_array_equal(a, b)
    for t in (0, 7, 29):
        np.testing.assert_allclose(prefill(small_model, toks[: t + 1])[0][-1], a[t], atol=1e-5)


def test_decode_after_prefill_matches_prefill():
    model = build_model(toy_config(), 0)
    toks = _tokens(100)
    full, _ = prefill(model, toks)
    _, state = prefill(model, toks[:99])
    np.testing.assert_allclose(decode_step(model, toks[99], state), full[-1], atol=1e-5)


def test_hundred_decodes_after_long_prefill():
    model = build_model(toy_config(context_limit=1200), 0)
    toks = _tokens(1124, seed=9)
    ref = recompute_logits(model, toks)
    _, state = prefill(model, toks[:1024])
    worst = 0.0
    for i in range(100):
        out = decode_step(model, toks[1024 + i], state)
        worst = max(worst, float(np.abs(out - ref[1024 + i]).max()))
    assert worst <= 1e-5


def test_chunked_extend_matches_prefill():
    model = build_model(toy_config(), 0)
    toks = _tokens(50, seed=3)
    full, _ = prefill(model, toks)
    state = new_session(model.config)
    pieces = [extend(model, toks[a:b], state) for a, b in ((0, 17), (17, 18), (18, 50))]
    np.testing.assert_allclose(np.concatenate(pieces), full, atol=1e-5)
    assert state.position == 50
    assert state.kv(2)[0].shape == (2, 50, 16)


def test_conv_only_state_is_constant():
    cfg = toy_config(attn_layer_indices=())
    model = build_model(cfg, 0)
    _, state = prefill(model, _tokens(3))
    sizes = []
    for t in range(20):
        decode_step(model, t, state)
        sizes.append(state_floats(cfg, state))
    assert len(set(sizes)) == 1 and sizes[0] == 4 * 2 * 64


def test_context_limit_and_bad_tokens():
    model = build_model(toy_config(context_limit=8), 0)
    _, state = prefill(model, _tokens(8))
    with pytest.raises(CapacityError):
        decode_step(model, 1, state)
    with pytest.raises(InputError):
        prefill(model, [300])
    with pytest.raises(InputError):
        prefill(model, [])
