"""Command-line front end (``lfm-forge``).

Results go to stdout, diagnostics to stderr. Exit status is 0 on success,
1 on a handled error and 2 on bad usage.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import archsearch, checkpoint, tokenizer
from .align import GRAD_FIELDS, ln_align_loss, preset, read_preferences
from .backbone import Model, build_model, check_params, decode_step, prefill
from .bench import SCHEMA_VERSION, run_bench, trend_pair
from .config import ModelConfig
from .distill import dtk_loss, kd_training_loss, read_records
from .errors import ForgeError, InputError, ParseError
from .merge import MergeSpec, merge
from .retrieval import DocumentIndex, ScoredCandidates, distill_mse_loss, encode
from .tensor import fd_gradient, max_relative_error


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps({"schema_version": SCHEMA_VERSION, **payload}, indent=2))
    else:
        print(text)


def _load_model(config_path, checkpoint_path=None, seed=0) -> Model:
    cfg = ModelConfig.load(config_path)
    if checkpoint_path is None:
        return build_model(cfg, seed)
    params = checkpoint.load(checkpoint_path)
    missing, wrong = check_params(cfg, params)
    extra = sorted(set(params) - set(build_model_names(cfg)))
    if missing or wrong or extra:
        lines = ["checkpoint does not match config:"]
        lines += [f"  missing      {n}" for n in missing[:10]]
        lines += [f"  wrong shape  {n}" for n in wrong[:10]]
        lines += [f"  unexpected   {n}" for n in extra[:10]]
        raise InputError("\n".join(lines))
    return Model(cfg, params)


def build_model_names(cfg: ModelConfig):
    from .backbone import param_shapes

    return param_shapes(cfg).keys()


# ---------------------------------------------------------------- commands

def cmd_init(args) -> int:
    model = build_model(ModelConfig.load(args.config), args.seed)
    checkpoint.save(args.out, model.params)
    _emit(args, {"tensors": len(model.params), "output": str(args.out)},
          f"wrote {len(model.params)} tensors to {args.out}")
    return 0


def cmd_bench(args) -> int:
    if args.pair:
        models = {name: build_model(cfg, args.seed) for name, cfg in trend_pair().items()}
    elif args.config:
        models = {Path(args.config).stem: _load_model(args.config, args.checkpoint, args.seed)}
    else:
        raise InputError("bench needs --config or --pair")
    reports = [
        run_bench(m, args.contexts, args.n_decode, args.repeats, args.seed, name)
        for name, m in models.items()
    ]
    if args.out_dir:
        from .report import plot_bench, write_rows

        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "bench.csv", [row for r in reports for row in r.rows()])
        (out / "bench.json").write_text(json.dumps([r.to_json() for r in reports], indent=2))
        plot_bench(reports, out / "bench.png")
        print(f"wrote {out / 'bench.csv'}, {out / 'bench.json'}, {out / 'bench.png'}", file=sys.stderr)
    payload = {"reports": [r.to_json() for r in reports]}
    if not args.dump_runs:
        for r in payload["reports"]:
            r.pop("runs")
    _emit(args, payload, "\n\n".join(r.table() for r in reports))
    return 0


def generate(model: Model, prompt_ids, n_tokens: int) -> list[int]:
    """Greedy argmax continuation of ``prompt_ids``."""
    if n_tokens <= 0:
        return []
    logits, state = prefill(model, prompt_ids)
    out = [int(np.argmax(logits[-1]))]
    while len(out) < n_tokens:
        out.append(int(np.argmax(decode_step(model, out[-1], state))))
    return out


def cmd_generate(args) -> int:
    model = _load_model(args.config, args.checkpoint, args.seed)
    if args.ids is not None:
        prompt = [int(x) for x in args.ids.split(",") if x.strip()]
    else:
        prompt = tokenizer.encode(args.prompt or "")
    if not prompt:
        raise InputError("empty prompt")
    ids = generate(model, prompt, args.n_tokens)
    _emit(args, {"prompt_ids": prompt, "ids": ids}, " ".join(map(str, ids)))
    return 0


def cmd_merge(args) -> int:
    spec = MergeSpec.load(args.spec)
    models = [checkpoint.load(p) for p in args.inputs]
    base = checkpoint.load(args.base) if args.base else None
    merged = merge(spec, models, base, workers=args.workers)
    checkpoint.save(args.output, merged)
    summary = {"tensors": len(merged), "method": spec.method, "seed": spec.seed, "output": str(args.output)}
    _emit(args, summary, f"merged {len(merged)} tensors with {spec.method} (seed {spec.seed}) -> {args.output}")
    return 0


def _loss_dtk(args):
    records = read_records(args.data)
    V = records[0].vocab_size
    if args.student:
        student = checkpoint.load(args.student).get("logits")
        if student is None:
            raise InputError(f"{args.student}: no tensor named 'logits'")
    else:
        student = np.zeros((len(records), V), np.float32)
    student = np.asarray(student, np.float64)
    if student.shape != (len(records), V):
        raise InputError(f"student logits {student.shape} do not match {len(records)} records over {V} tokens")
    labels = [int(x) for x in args.labels.split(",")] if args.labels else None
    alpha = args.alpha if labels is not None else 1.0
    if labels is None and args.alpha < 1:
        raise InputError("--alpha below 1 needs --labels")

    def total(x):
        return kd_training_loss(x, records, labels or [0] * len(records), args.tau, alpha)

    value, grad = total(student)
    parts = [dtk_loss(student[t], records[t], args.tau)[0] for t in range(len(records))]
    payload = {
        "kind": "dtk", "loss": value, "tau": args.tau, "alpha": alpha,
        "binary_term": float(np.mean([p.binary_term for p in parts])),
        "conditional_term": float(np.mean([p.conditional_term for p in parts])),
        "clamped": any(p.clamped for p in parts),
    }
    return payload, (lambda x: total(x.reshape(student.shape))[0]), student.reshape(-1), grad.reshape(-1)


def _loss_align(args):
    batch = read_preferences(args.data)
    cfg = preset(args.preset, **({"beta": args.beta} if args.beta else {}))
    value, grad = ln_align_loss(batch, cfg)
    x0 = np.array([[getattr(t, f) for f in GRAD_FIELDS] for t in batch])

    def f(x):
        x = x.reshape(x0.shape)
        moved = [t.__class__(**{**t.__dict__, **dict(zip(GRAD_FIELDS, row))}) for t, row in zip(batch, x)]
        return ln_align_loss(moved, cfg)[0]

    payload = {"kind": "align", "preset": args.preset, "loss": value, "beta": cfg.beta, "n": len(batch)}
    return payload, f, x0.reshape(-1), grad.reshape(-1)


def _loss_retrieval(args):
    groups = []
    for lineno, line in enumerate(Path(args.data).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            groups.append(ScoredCandidates(obj["teacher"], obj["student"]))
        except (json.JSONDecodeError, KeyError, InputError) as exc:
            raise ParseError(f"bad retrieval record: {exc}", lineno) from None
    if not groups:
        raise InputError("no retrieval records")
    sizes = [g.student_scores.size for g in groups]
    x0 = np.concatenate([g.student_scores for g in groups])
    splits = np.cumsum(sizes)[:-1]

    def evaluate(x):
        vals, grads = zip(*(distill_mse_loss(ScoredCandidates(g.teacher_scores, s))
                            for g, s in zip(groups, np.split(x, splits))))
        return float(np.mean(vals)), np.concatenate(grads) / len(groups)

    value, grad = evaluate(x0)
    return {"kind": "retrieval", "loss": value, "groups": len(groups)}, (lambda x: evaluate(x)[0]), x0, grad


def cmd_loss(args) -> int:
    handler = {"dtk": _loss_dtk, "align": _loss_align, "retrieval": _loss_retrieval}[args.kind]
    payload, f, x0, grad = handler(args)
    if args.check_grad:
        fd = fd_gradient(f, x0, args.fd_step)
        payload["grad_max_rel_error"] = max_relative_error(grad, fd)
        payload["grad_ok"] = payload["grad_max_rel_error"] <= 1e-4
    text = "\n".join(f"{k}: {v}" for k, v in payload.items())
    _emit(args, payload, text)
    return 0


def _candidate_rows(cands, hvi=None):
    rows = []
    for i, c in enumerate(cands):
        row = c.to_dict()
        if hvi is not None:
            row["hvi"] = hvi[i]
        rows.append(row)
    return rows


def cmd_pareto(args) -> int:
    cands = archsearch.read_candidates(args.candidates)
    if args.action == "filter":
        kept = archsearch.filter_budgets(cands, archsearch.BudgetSpec.load(args.budgets))
        rows = _candidate_rows(kept)
    elif args.action == "front":
        kept = archsearch.pareto_front(cands)
        rows = _candidate_rows(kept)
        if args.plot:
            from .report import plot_pareto

            plot_pareto(cands, kept, args.plot)
            print(f"wrote {args.plot}", file=sys.stderr)
    else:
        front = archsearch.read_candidates(args.front) if args.front else archsearch.pareto_front(cands)
        ref = [float(x) for x in args.reference.split(",")] if args.reference else None
        ranked = archsearch.rank_by_hvi(front, cands, ref)
        rows = _candidate_rows([c for c, _ in ranked], [v for _, v in ranked])
    if args.out:
        from .report import write_rows

        write_rows(args.out, rows)
    if args.json:
        _emit(args, {"action": args.action, "candidates": rows}, "")
    else:
        for row in rows:
            extra = f"\t{row['hvi']:.6g}" if "hvi" in row else ""
            print(f"{row['id']}\t{row['quality']}\t{row['decode_ms_p50']}\t{row['peak_mem_bytes']}{extra}")
    return 0


def cmd_curriculum(args) -> int:
    try:
        matrix = np.loadtxt(args.outcomes, delimiter=args.delimiter, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read outcome matrix {args.outcomes}: {exc}") from None
    p, order = archsearch.curriculum_order(matrix)
    payload = {"p": p.tolist(), "order": order.tolist()}
    _emit(args, payload, "\n".join(f"{i}\t{p[i]:.6g}" for i in order))
    return 0


def _projection(args, model: Model) -> np.ndarray:
    if args.projection:
        proj = checkpoint.load(args.projection).get("projection")
        if proj is None:
            raise InputError(f"{args.projection}: no tensor named 'projection'")
        return proj
    rng = np.random.default_rng(args.seed)
    d = model.config.d_model
    return (rng.standard_normal((d, args.dim)) / np.sqrt(d)).astype(np.float32)


def _read_docs(path):
    docs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ids = obj["ids"] if "ids" in obj else tokenizer.encode(obj["text"])
            docs.append((str(obj["id"]), ids))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad document record: {exc}", lineno) from None
    return docs


def cmd_retrieve(args) -> int:
    model = _load_model(args.config, args.checkpoint, args.seed)
    proj = _projection(args, model)
    if args.action == "encode":
        store, truncated = {}, []
        for doc_id, ids in _read_docs(args.docs):
            emb = encode(model, proj, ids, "document")
            store[doc_id] = emb.vectors
            if emb.truncated:
                truncated.append(doc_id)
        DocumentIndex(store).save(args.store)
        for doc_id in truncated:
            print(f"warning: document {doc_id} truncated", file=sys.stderr)
        _emit(args, {"documents": len(store), "truncated": truncated, "store": str(args.store)},
              f"encoded {len(store)} documents -> {args.store}")
        return 0
    index = DocumentIndex.load(args.store)
    ids = [int(x) for x in args.query_ids.split(",")] if args.query_ids else tokenizer.encode(args.query or "")
    q = encode(model, proj, ids, "query")
    if q.truncated:
        print("warning: query truncated", file=sys.stderr)
    ranked = index.score(q)[: args.top]
    _emit(args, {"results": [{"id": i, "score": s} for i, s in ranked]},
          "\n".join(f"{i}\t{s:.6f}" for i, s in ranked))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    parser = argparse.ArgumentParser(prog="lfm-forge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="build a model and write its checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("bench", parents=[common], help="prefill/decode throughput at batch 1")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--pair", action="store_true", help="benchmark the built-in conv/attention pair")
    p.add_argument("--contexts", type=int, nargs="+", default=[1024, 4096])
    p.add_argument("--n-decode", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dump-runs", action="store_true", help="include per-run timings in --json output")
    p.add_argument("--out-dir", help="write bench.csv, bench.json and bench.png here")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("generate", parents=[common], help="greedy decoding")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--prompt", help="text, byte-tokenized")
    g.add_argument("--ids", help="comma-separated token ids")
    p.add_argument("--n-tokens", type=int, default=16)
    p.add_argument("--greedy", action="store_true", default=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("merge", parents=[common], help="merge LFT1 checkpoints")
    p.add_argument("--spec", required=True)
    p.add_argument("--base")
    p.add_argument("--output", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("loss", parents=[common], help="evaluate a loss on a data file")
    p.add_argument("kind", choices=["dtk", "align", "retrieval"])
    p.add_argument("--data", required=True)
    p.add_argument("--check-grad", action="store_true")
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--student", help="dtk: LFT1 file with a 'logits' tensor [positions, vocab]")
    p.add_argument("--labels", help="dtk: comma-separated hard labels")
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--preset", default="dpo_ln", choices=["dpo_ln", "apo_zero_ln", "joint"])
    p.add_argument("--beta", type=float)
    p.set_defaults(fn=cmd_loss)

    p = sub.add_parser("pareto", parents=[common], help="budget filter, Pareto front, HVI ranking")
    p.add_argument("action", choices=["filter", "front", "hvi"])
    p.add_argument("--candidates", required=True)
    p.add_argument("--budgets")
    p.add_argument("--front", help="hvi: front file (default: front of --candidates)")
    p.add_argument("--reference", help="hvi: comma-separated reference point in the maximization frame")
    p.add_argument("--out", help="also write the rows as CSV")
    p.add_argument("--plot", help="front: write a scatter plot")
    p.set_defaults(fn=cmd_pareto)

    p = sub.add_parser("curriculum", parents=[common], help="order items by ensemble success rate")
    p.add_argument("--outcomes", required=True, help="0/1 matrix, one row per item")
    p.add_argument("--delimiter", default=None)
    p.set_defaults(fn=cmd_curriculum)

    p = sub.add_parser("retrieve", parents=[common], help="late-interaction encode/score")
    p.add_argument("action", choices=["encode", "score"])
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--projection", help="LFT1 file with a 'projection' tensor [d_model, dim]")
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--store", required=True)
    p.add_argument("--docs", help="encode: JSONL with id and text or ids")
    p.add_argument("--query")
    p.add_argument("--query-ids")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(fn=cmd_retrieve)
    return parser


def _thread_limit():
    n = os.environ.get("LFM_FORGE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "retrieve":
        if args.action == "encode" and not args.docs:
            print("error: retrieve encode needs --docs", file=sys.stderr)
            return 2
        if args.action == "score" and args.query is None and args.query_ids is None:
            print("error: retrieve score needs --query or --query-ids", file=sys.stderr)
            return 2
    if args.command == "pareto" and args.action == "filter" and not args.budgets:
        print("error: pareto filter needs --budgets", file=sys.stderr)
        return 2
    try:
        with _thread_limit():
            return args.fn(args)
    except (ForgeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
