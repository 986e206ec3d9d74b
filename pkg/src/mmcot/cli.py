"""Command-line surface: gen-data, train, sample, eval, ablate, report.

Seeds fall back to the MMCOT_SEED environment variable when a command's
--seed flag is omitted. Commands accepting --config read defaults from a JSON
file; explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import world
from .ablation import AblationTable, ablate_losses
from .codec import Codebook, load_codebook, save_codebook
from .datagen import ComplexityProfile, CorruptionModel, generate_dataset
from .evaluation import build_eval_suite, evaluate, read_suite, write_suite
from .model import ModelConfig, TinyMultimodalLM, load_checkpoint
from .reporting import report as write_report
from .sampler import (
    PRESETS,
    SampleParams,
    default_schedule,
    generate_trace,
    uniform_schedule,
)
from .traces import read_traces, trace_to_json, write_traces
from .training import TrainConfig, train
from .utils import configure_threads, resolve_seed
from .vocab import default_vocab
from .world import GenevalCategory


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _parse_kv_floats(text: str) -> dict:
    out = {}
    for part in text.split(","):
        k, v = part.split("=")
        out[k.strip()] = float(v)
    return out


def _schedule_for(preset: str, mode: str):
    if preset == "default":
        return default_schedule(mode)
    if preset == "subgoal":
        from .sampler import DecodeSchedule

        return DecodeSchedule(thinking=PRESETS["subgoal-images"], final=PRESETS["subgoal-final"])
    if preset in PRESETS:
        return uniform_schedule(PRESETS[preset])
    raise SystemExit(f"unknown preset {preset!r}")


def cmd_gen_data(args) -> int:
    seed = resolve_seed(args.seed)
    codebook = Codebook.from_seed()
    if args.mode == "suite":
        counts_text = args.counts or ",".join(f"{c.value}=20" for c in GenevalCategory)
        counts = {GenevalCategory(k): int(v) for k, v in _parse_kv_floats(counts_text).items()}
        exclude = set()
        if args.exclude_from:
            exclude = {t.prompt for t in read_traces(args.exclude_from)}
        items = build_eval_suite(counts, seed=seed, canvas_size=args.canvas_size,
                                 exclude_prompts=frozenset(exclude))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_suite(items, out / "suite.jsonl")
        print(f"wrote {len(items)} suite items to {out / 'suite.jsonl'}")
        return 0
    if args.kinds:
        profile = ComplexityProfile(kind_weights=_parse_kv_floats(args.kinds),
                                    canvas_size=args.canvas_size)
    elif args.mode == "stage1":
        profile = ComplexityProfile.only("single", canvas_size=args.canvas_size)
    else:
        profile = ComplexityProfile(canvas_size=args.canvas_size)
    corruption = CorruptionModel(flaw_rate=args.flaw_rate, seed=seed)
    exclude = set()
    if args.exclude_from:
        exclude = {t.prompt for t in read_traces(args.exclude_from)}
    manifest = generate_dataset(
        args.mode, args.n, seed, args.out, codebook,
        profile=profile, corruption=corruption, exclude_prompts=frozenset(exclude),
    )
    print(f"emitted {manifest.n_emitted}/{manifest.n_requested} traces "
          f"(pass rate {manifest.filter_pass_rate:.3f}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    mcfg_d = cfg.get("model", {})
    tcfg_d = cfg.get("train", {})
    configure_threads(_pick(args.threads, cfg, "threads", 1))
    seed = resolve_seed(args.seed if args.seed is not None else tcfg_d.get("seed"))
    traces = []
    for path in args.data:
        traces.extend(read_traces(path))
    if not traces:
        raise SystemExit("no training traces found")
    canvas = _pick(args.canvas_size, cfg, "canvas_size", world.DEFAULT_CANVAS)
    block_len = canvas * canvas
    vocab = default_vocab()
    codebook = Codebook.from_seed()
    stage = _pick(args.stage, tcfg_d, "stage", 1)
    defaults = TrainConfig.desk_default(stage)
    tcfg = TrainConfig(
        steps=_pick(args.steps, tcfg_d, "steps", defaults.steps),
        batch_size=_pick(args.batch_size, tcfg_d, "batch_size", defaults.batch_size),
        stage=stage,
        lr=_pick(args.lr, tcfg_d, "lr", 1e-5),
        lam=_pick(getattr(args, "lam"), tcfg_d, "lambda", 1.0),
        seed=seed,
        grad_clip=_pick(None, tcfg_d, "grad_clip", 1.0),
        checkpoint_every=_pick(args.checkpoint_every, tcfg_d, "checkpoint_every", 0),
    )
    if args.init_ckpt:
        model, _ = load_checkpoint(args.init_ckpt)
    else:
        mcfg = ModelConfig(
            vocab_size=vocab.size,
            layers=_pick(args.layers, mcfg_d, "layers", 4),
            heads=_pick(args.heads, mcfg_d, "heads", 4),
            hidden_dim=_pick(args.hidden_dim, mcfg_d, "hidden_dim", 128),
            feedforward_dim=_pick(args.ff_dim, mcfg_d, "feedforward_dim", 512),
            context_length=_pick(args.context_length, mcfg_d, "context_length", 512),
            proj_dim=codebook.feature_dim,
            seed=seed,
            dtype=_pick(args.dtype, mcfg_d, "dtype", "float32"),
        )
        model = TinyMultimodalLM(mcfg)
    out = Path(args.out)
    result = train(model, traces, vocab, codebook, block_len, tcfg, out,
                   resume_from=args.resume)
    save_codebook(codebook, out / "codebook.bin")
    (out / "train_info.json").write_text(json.dumps(
        {"canvas_size": canvas, "steps": tcfg.steps, "seed": seed, "stage": stage},
        sort_keys=True, indent=2) + "\n")
    print(f"trained {result.steps_done} steps; final loss {result.final_loss:.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def _load_model_ctx(ckpt_path: str):
    model, extra = load_checkpoint(ckpt_path)
    ckpt_dir = Path(ckpt_path).parent
    cb_path = ckpt_dir / "codebook.bin"
    codebook = load_codebook(cb_path) if cb_path.exists() else Codebook.from_seed()
    info_path = ckpt_dir / "train_info.json"
    canvas = world.DEFAULT_CANVAS
    if info_path.exists():
        canvas = json.loads(info_path.read_text()).get("canvas_size", canvas)
    return model, codebook, canvas


def cmd_sample(args) -> int:
    configure_threads(args.threads or 1)
    seed = resolve_seed(args.seed)
    model, codebook, canvas = _load_model_ctx(args.ckpt)
    if args.canvas_size:
        canvas = args.canvas_size
    vocab = default_vocab(num_visual=codebook.num_entries)
    schedule = _schedule_for(args.preset, args.mode)
    result = generate_trace(
        model, vocab, args.prompt, args.mode, canvas * canvas,
        schedule=schedule,
        params=SampleParams(temperature=args.temperature, top_k=args.top_k, seed=seed),
        length_cap=args.cap,
    )
    if not result.ok:
        print(f"generation incomplete: {result.diagnostic}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write(trace_to_json(result.trace) + "\n")
    if args.png_dir:
        png_dir = Path(args.png_dir)
        png_dir.mkdir(parents=True, exist_ok=True)
        img_idx = 0
        from .codec import decode_tokens

        for seg in result.trace.segments:
            if seg.tokens is None:
                continue
            grid, _ = decode_tokens(seg.tokens, canvas, codebook)
            world.grid_to_png(grid, png_dir / f"{img_idx:02d}_{seg.kind.value}.png")
            img_idx += 1
    print(f"wrote trace to {out}")
    return 0


def cmd_eval(args) -> int:
    configure_threads(args.threads or 1)
    seed = resolve_seed(args.seed)
    model, codebook, canvas = _load_model_ctx(args.ckpt)
    vocab = default_vocab(num_visual=codebook.num_entries)
    suite = read_suite(args.suite)
    schedule = _schedule_for(args.preset, args.mode)
    report_obj, traces = evaluate(
        model, vocab, codebook, suite, args.mode, canvas * canvas,
        schedule=schedule,
        params=SampleParams(temperature=args.temperature, seed=seed),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_traces([t for t in traces if t is not None], out / "traces.jsonl")
    grid_rows = min(len(traces), args.grid_rows)
    write_report(report_obj, out, traces=traces[:grid_rows], codebook=codebook,
                 canvas_size=canvas, label=Path(args.ckpt).stem)
    print(report_obj.to_json())
    return 0


def cmd_ablate(args) -> int:
    configure_threads(args.threads or 1)
    seed = resolve_seed(args.seed)
    traces = read_traces(args.data)
    suite = read_suite(args.suite)
    vocab = default_vocab()
    codebook = Codebook.from_seed()
    canvas = args.canvas_size or world.DEFAULT_CANVAS
    mcfg = ModelConfig(
        vocab_size=vocab.size, layers=args.layers, heads=args.heads,
        hidden_dim=args.hidden_dim, feedforward_dim=args.ff_dim,
        context_length=args.context_length, proj_dim=codebook.feature_dim,
        seed=seed, dtype="float32",
    )
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, stage=1,
                       lr=args.lr, seed=seed)
    lam_grid = [float(x) for x in args.lambdas.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    out = Path(args.out)
    table = ablate_losses(mcfg, tcfg, traces, suite, vocab, codebook,
                          canvas * canvas, lam_grid=lam_grid, seeds=seeds, out_dir=out)
    write_report(table, out)
    print(table.to_json())
    return 0


def cmd_report(args) -> int:
    payload = json.loads(Path(args.src).read_text())
    out = Path(args.out)
    if "rows" in payload:
        from .ablation import AblationRow

        table = AblationTable(
            rows=tuple(
                AblationRow(r["label"], r["lambda"], r["per_category"], r["overall"], r["error"])
                for r in payload["rows"]
            ),
            seeds=tuple(payload["seeds"]),
        )
        write_report(table, out)
    else:
        from .evaluation import EvalReport

        rep = EvalReport(
            mode=payload["mode"], n_items=payload["n_items"],
            per_category=payload["per_category"],
            category_counts=payload["category_counts"],
            overall=payload["overall"], ungrammatical=payload["ungrammatical"],
            hypo_per_category=payload.get("hypo_per_category"),
            hypo_overall=payload.get("hypo_overall"),
            note=payload.get("note", ""),
        )
        traces = None
        codebook = None
        if args.traces:
            traces = read_traces(args.traces)
            codebook = Codebook.from_seed()
        write_report(rep, out, traces=traces, codebook=codebook,
                     canvas_size=args.canvas_size or world.DEFAULT_CANVAS)
    print(f"wrote report under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmcot")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic trace datasets or eval suites")
    g.add_argument("--mode", required=True,
                   choices=["stage1", "direct", "subgoal", "critique", "suite"])
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--canvas-size", type=int, default=world.DEFAULT_CANVAS)
    g.add_argument("--kinds", help="scene mix, e.g. two=0.5,single=0.5")
    g.add_argument("--counts", help="suite mode: per-category counts, e.g. two_obj=60")
    g.add_argument("--flaw-rate", type=float, default=0.85)
    g.add_argument("--exclude-from", help="trace file whose prompts are excluded")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on trace files")
    t.add_argument("--data", action="append", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with model/train defaults")
    t.add_argument("--stage", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--init-ckpt")
    t.add_argument("--resume")
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--canvas-size", type=int, default=None)
    t.add_argument("--layers", type=int, default=None)
    t.add_argument("--heads", type=int, default=None)
    t.add_argument("--hidden-dim", type=int, default=None)
    t.add_argument("--ff-dim", type=int, default=None)
    t.add_argument("--context-length", type=int, default=None)
    t.add_argument("--dtype", choices=["float32", "float64"], default=None)
    t.add_argument("--threads", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="decode one trace from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--mode", required=True, choices=["direct", "subgoal", "critique"])
    s.add_argument("--preset", default="default",
                   choices=["default", "subgoal", "critique", "conditional",
                            "subgoal-images", "subgoal-final"])
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--png-dir")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--top-k", type=int, default=None)
    s.add_argument("--cap", type=int, default=None)
    s.add_argument("--canvas-size", type=int, default=None)
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="score a checkpoint on a suite")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--suite", required=True)
    e.add_argument("--mode", required=True, choices=["direct", "subgoal", "critique"])
    e.add_argument("--preset", default="default",
                   choices=["default", "subgoal", "critique", "conditional",
                            "subgoal-images", "subgoal-final"])
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--grid-rows", type=int, default=16)
    e.add_argument("--threads", type=int, default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="loss-weight ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--suite", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--lambdas", default="0,0.5,1,5")
    a.add_argument("--seeds", default="0")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--steps", type=int, default=600)
    a.add_argument("--batch-size", type=int, default=16)
    a.add_argument("--lr", type=float, default=3e-4)
    a.add_argument("--canvas-size", type=int, default=None)
    a.add_argument("--layers", type=int, default=3)
    a.add_argument("--heads", type=int, default=4)
    a.add_argument("--hidden-dim", type=int, default=96)
    a.add_argument("--ff-dim", type=int, default=384)
    a.add_argument("--context-length", type=int, default=512)
    a.add_argument("--threads", type=int, default=None)
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("report", help="re-render markdown from a saved JSON report")
    r.add_argument("--src", required=True, help="eval_report.json or ablation.json")
    r.add_argument("--out", required=True)
    r.add_argument("--traces")
    r.add_argument("--canvas-size", type=int, default=None)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
