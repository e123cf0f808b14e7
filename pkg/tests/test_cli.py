import json
import math
import statistics

import numpy as np
import pytest

from lfm_forge import checkpoint
from lfm_forge.align import GRAD_FIELDS
from lfm_forge.backbone import build_model, recompute_logits
from lfm_forge.bench import run_bench, trend_pair
from lfm_forge.cli import generate, main
from lfm_forge.config import toy_config
from lfm_forge.distill import TopKRecord, write_records


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(toy_config(context_limit=256).to_json())
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --- bench

def test_bench_report_holds_medians_of_runs():
    model = build_model(toy_config(context_limit=256), 0)
    rep = run_bench(model, (32, 64), n_decode=5, repeats=5)
    assert len(rep.runs) == 10
    for ctx in (32, 64):
        runs = [r for r in rep.runs if r.context == ctx]
        assert len(runs) == 5
        assert rep.decode_tok_per_s[ctx] == statistics.median(5 / r.decode_s for r in runs)
        assert rep.prefill_tok_per_s[ctx] == statistics.median(ctx / r.prefill_s for r in runs)
    assert rep.to_json()["schema_version"] == 1


def test_bench_rejects_context_past_limit():
    model = build_model(toy_config(context_limit=64), 0)
    with pytest.raises(ValueError):
        run_bench(model, (60,), n_decode=10, repeats=1)


def test_trend_pair_is_size_matched():
    from lfm_forge.backbone import param_count

    pair = trend_pair()
    conv, attn = param_count(pair["conv"]), param_count(pair["attention"])
    assert pair["conv"].d_model == pair["attention"].d_model
    assert abs(conv - attn) / conv < 0.01


def test_cli_bench_writes_table_csv_and_plot(capsys, tmp_path, cfg_path):
    out_dir = tmp_path / "bench"
    code, out, _ = run(capsys, "bench", "--config", cfg_path, "--contexts", 16, 32, "--n-decode", 4,
                       "--repeats", 2, "--out-dir", out_dir)
    assert code == 0 and "decode tok/s" in out
    assert (out_dir / "bench.png").stat().st_size > 0
    lines = (out_dir / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("model,context") and len(lines) == 3
    code, out, _ = run(capsys, "bench", "--config", cfg_path, "--contexts", 16, "--n-decode", 2,
                       "--repeats", 3, "--json", "--dump-runs")
    doc = json.loads(out)
    assert doc["schema_version"] == 1 and len(doc["reports"][0]["runs"]) == 3


# --- generate

def test_generate_matches_recompute_oracle():
    model = build_model(toy_config(), 1)
    prompt = [3, 1, 4, 1, 5]
    assert generate(model, prompt, 0) == []
    ids = generate(model, prompt, 12)
    assert ids == generate(model, prompt, 12)
    seq = list(prompt)
    for _ in range(12):
        seq.append(int(np.argmax(recompute_logits(model, seq)[-1])))
    assert ids == seq[len(prompt):]


def test_cli_generate(capsys, cfg_path):
    code, out, _ = run(capsys, "generate", "--config", cfg_path, "--ids", "1,2,3", "--n-tokens", 0)
    assert code == 0 and out.strip() == ""
    code, out, _ = run(capsys, "generate", "--config", cfg_path, "--prompt", "hi", "--n-tokens", 4, "--json")
    doc = json.loads(out)
    assert doc["prompt_ids"] == [104, 105] and len(doc["ids"]) == 4
    code, _, err = run(capsys, "generate", "--config", cfg_path, "--ids", "999")
    assert code == 1 and "outside vocabulary" in err


# --- init and merge

def test_cli_init_and_checkpoint_load(capsys, tmp_path, cfg_path):
    ck = tmp_path / "m.lft"
    assert run(capsys, "init", "--config", cfg_path, "--out", ck, "--seed", 3)[0] == 0
    a = run(capsys, "generate", "--config", cfg_path, "--checkpoint", ck, "--ids", "5", "--n-tokens", 3)[1]
    b = run(capsys, "generate", "--config", cfg_path, "--seed", 3, "--ids", "5", "--n-tokens", 3)[1]
    assert a == b
    params = checkpoint.load(ck)
    params.pop("final_norm")
    checkpoint.save(ck, params)
    code, _, err = run(capsys, "generate", "--config", cfg_path, "--checkpoint", ck, "--ids", "5")
    assert code == 1 and "missing      final_norm" in err


def _spec(tmp_path, **spec):
    path = tmp_path / f"{spec['method']}.json"
    path.write_text(json.dumps(spec))
    return path


def test_cli_merge(capsys, tmp_path):
    rng = np.random.default_rng(0)
    m = {"a": rng.standard_normal((4, 3)).astype(np.float32), "b": rng.standard_normal(5).astype(np.float32)}
    base = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in m.items()}
    for name, ck in (("m", m), ("base", base)):
        checkpoint.save(tmp_path / f"{name}.lft", ck)
    out = tmp_path / "out.lft"
    assert run(capsys, "merge", "--spec", _spec(tmp_path, method="soup"), "--output", out,
               tmp_path / "m.lft", tmp_path / "m.lft")[0] == 0
    assert out.read_bytes() == (tmp_path / "m.lft").read_bytes()

    run(capsys, "merge", "--spec", _spec(tmp_path, method="dare_linear", drop_rate=0.0), "--base",
        tmp_path / "base.lft", "--output", out, tmp_path / "m.lft")
    dare_bytes = out.read_bytes()
    run(capsys, "merge", "--spec", _spec(tmp_path, method="task_arithmetic"), "--base", tmp_path / "base.lft",
        "--output", out, tmp_path / "m.lft")
    assert out.read_bytes() == dare_bytes

    checkpoint.save(tmp_path / "z.lft", {"w": np.zeros(4, np.float32)})
    checkpoint.save(tmp_path / "t1.lft", {"w": np.array([2, -1, 0.5, 0], np.float32)})
    checkpoint.save(tmp_path / "t2.lft", {"w": np.array([-1.5, -2, 1, 0.2], np.float32)})
    run(capsys, "merge", "--spec", _spec(tmp_path, method="ties", k_pct=0.5), "--base", tmp_path / "z.lft",
        "--output", out, tmp_path / "t1.lft", tmp_path / "t2.lft")
    np.testing.assert_array_equal(checkpoint.load(out)["w"], [2, -1.5, 0, 0])

    code, _, err = run(capsys, "merge", "--spec", _spec(tmp_path, method="soup"), "--output", out,
                       tmp_path / "m.lft", tmp_path / "z.lft")
    assert code == 1 and "incompatible tensors" in err


# --- loss

def test_cli_loss_dtk(capsys, tmp_path):
    rng = np.random.default_rng(0)
    T = (rng.standard_normal((3, 8)) * 2).astype(np.float32)
    write_records(tmp_path / "full.tkd", [TopKRecord.from_logits(t, 8) for t in T])
    checkpoint.save(tmp_path / "student.lft", {"logits": T})
    code, out, _ = run(capsys, "loss", "dtk", "--data", tmp_path / "full.tkd", "--student", tmp_path / "student.lft",
                       "--tau", 1, "--alpha", 1, "--json")
    assert code == 0 and abs(json.loads(out)["loss"]) < 1e-6

    write_records(tmp_path / "top3.tkd", [TopKRecord.from_logits(t, 3) for t in T])
    checkpoint.save(tmp_path / "s2.lft", {"logits": rng.standard_normal((3, 8)).astype(np.float32)})
    code, out, _ = run(capsys, "loss", "dtk", "--data", tmp_path / "top3.tkd", "--student", tmp_path / "s2.lft",
                       "--labels", "1,2,3", "--check-grad", "--json")
    doc = json.loads(out)
    assert doc["grad_ok"] and doc["grad_max_rel_error"] <= 1e-4


def test_cli_loss_align(capsys, tmp_path):
    same = dict(zip(GRAD_FIELDS, (-3.0, -4.0, -3.0, -4.0)), len_chosen=2, len_rejected=5)
    path = tmp_path / "prefs.jsonl"
    path.write_text(json.dumps(same) + "\n")
    code, out, _ = run(capsys, "loss", "align", "--data", path, "--preset", "dpo_ln", "--json")
    assert json.loads(out)["loss"] == pytest.approx(math.log(2))
    rng = np.random.default_rng(1)
    lines = []
    for _ in range(5):
        ref = -rng.uniform(2, 6, 2)
        lines.append(json.dumps(dict(zip(GRAD_FIELDS, (*(ref + rng.normal(0, 0.2, 2)).clip(max=0), *ref)),
                                     len_chosen=3, len_rejected=4)))
    path.write_text("\n".join(lines))
    code, out, _ = run(capsys, "loss", "align", "--data", path, "--preset", "joint", "--check-grad", "--json")
    assert json.loads(out)["grad_ok"]


def test_cli_loss_retrieval(capsys, tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text(json.dumps({"teacher": [1, 3, 2], "student": [0.1, 0.7, 0.4]}) + "\n"
                    + json.dumps({"teacher": [5, 1], "student": [0.2, 0.3]}) + "\n")
    code, out, _ = run(capsys, "loss", "retrieval", "--data", path, "--check-grad", "--json")
    doc = json.loads(out)
    assert code == 0 and doc["groups"] == 2 and doc["grad_ok"]
    path.write_text('{"teacher": [1]}\n')
    code, _, err = run(capsys, "loss", "retrieval", "--data", path)
    assert code == 1 and "line 1" in err


# --- pareto, curriculum, retrieve

def test_cli_pareto(capsys, tmp_path):
    rows = [dict(id="a", quality=0.9, ttft_ms=5, decode_ms_p50=10, decode_ms_p95=12, peak_mem_bytes=100),
            dict(id="b", quality=0.8, ttft_ms=5, decode_ms_p50=12, decode_ms_p95=14, peak_mem_bytes=120),
            dict(id="c", quality=0.95, ttft_ms=5, decode_ms_p50=20, decode_ms_p95=30, peak_mem_bytes=100)]
    cpath = tmp_path / "c.jsonl"
    cpath.write_text("\n".join(json.dumps(r) for r in rows))
    bpath = tmp_path / "b.json"
    bpath.write_text(json.dumps(dict(max_ttft_ms=10, max_decode_ms=14, max_peak_mem_bytes=1000)))
    code, out, _ = run(capsys, "pareto", "filter", "--candidates", cpath, "--budgets", bpath, "--json")
    assert [r["id"] for r in json.loads(out)["candidates"]] == ["a", "b"]
    code, out, _ = run(capsys, "pareto", "front", "--candidates", cpath, "--plot", tmp_path / "f.png",
                       "--out", tmp_path / "f.csv")
    assert [line.split("\t")[0] for line in out.splitlines()] == ["a", "c"]
    assert (tmp_path / "f.png").exists() and (tmp_path / "f.csv").read_text().startswith("id,")
    code, out, _ = run(capsys, "pareto", "hvi", "--candidates", cpath, "--json")
    hvi = {r["id"]: r["hvi"] for r in json.loads(out)["candidates"]}
    assert hvi["b"] == 0.0
    assert run(capsys, "pareto", "filter", "--candidates", cpath)[0] == 2


def test_cli_curriculum(capsys, tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("1 0 0\n1 1 1\n1 1 0\n")
    code, out, _ = run(capsys, "curriculum", "--outcomes", path, "--json")
    assert json.loads(out)["order"] == [1, 2, 0]


def test_cli_retrieve(capsys, tmp_path, cfg_path):
    docs = tmp_path / "docs.jsonl"
    docs.write_text("\n".join(json.dumps({"id": i, "text": t}) for i, t in
                              enumerate(["the cat sat", "stock prices fell", "a cat and a hat"])))
    store = tmp_path / "store.lft"
    code, out, _ = run(capsys, "retrieve", "encode", "--config", cfg_path, "--docs", docs, "--store", store)
    assert code == 0 and "encoded 3" in out
    code, out, _ = run(capsys, "retrieve", "score", "--config", cfg_path, "--store", store, "--query", "cat", "--json")
    results = json.loads(out)["results"]
    assert sorted(r["id"] for r in results) == ["0", "1", "2"]
    assert all(r["score"] <= 3 + 1e-6 for r in results)
    assert run(capsys, "retrieve", "score", "--config", cfg_path, "--store", store)[0] == 2
