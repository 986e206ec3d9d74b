"""Desk-scale directional experiments.

Two claims are reproduced in miniature on the synthetic world:

  subgoal:  train a direct baseline and a subgoal thinker from one shared
            first-stage checkpoint on identical scene pools; compare two-object
            scores on a held-out suite.
  critique: train a critique thinker whose hypothesis images imitate a flawed
            first-round generator; compare hypothesis vs final overall scores.

Both runs are deterministic given the config and write results.json + reports
under their output directory.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .codec import Codebook
from .datagen import (
    ComplexityProfile,
    CorruptionModel,
    brainstorm_prompts,
    make_critique_trace,
    make_direct_trace,
    make_subgoal_trace,
    quality_filter,
)
from .evaluation import build_eval_suite, evaluate, write_suite
from .model import ModelConfig, TinyMultimodalLM, load_checkpoint, save_checkpoint
from .reporting import report as write_report
from .sampler import PRESETS, SampleParams, default_schedule, uniform_schedule
from .traces import MODE_CRITIQUE, MODE_DIRECT, MODE_SUBGOAL, write_traces
from .training import TrainConfig, train
from .utils import configure_threads
from .vocab import default_vocab
from .world import DEFAULT_CANVAS, GenevalCategory


@dataclass(frozen=True)
class DeskConfig:
    canvas_size: int = DEFAULT_CANVAS
    # model
    layers: int = 4
    heads: int = 4
    hidden_dim: int = 128
    feedforward_dim: int = 512
    context_length: int = 512
    dtype: str = "float32"
    model_seed: int = 0
    # data
    stage1_n: int = 2000
    stage2_n: int = 2000
    data_seed: int = 101
    stage1_kinds: dict = field(default_factory=lambda: {"single": 0.5, "counting": 0.5})
    stage2_kinds: dict = field(
        default_factory=lambda: {
            "single": 0.10, "two": 0.35, "counting": 0.15,
            "position": 0.15, "color_attri": 0.15, "three": 0.10,
        }
    )
    flaw_rate: float = 0.85
    # training
    stage1_steps: int = 3000
    stage1_batch: int = 32
    stage2_steps: int = 1500
    stage2_batch: int = 16
    lr: float = 3e-4
    lam: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2)
    # evaluation
    suite_seed: int = 7001
    suite_counts: dict = field(
        default_factory=lambda: {
            GenevalCategory.SINGLE_OBJ: 20,
            GenevalCategory.TWO_OBJ: 60,
            GenevalCategory.COUNTING: 30,
            GenevalCategory.COLORS: 30,
            GenevalCategory.POSITION: 30,
            GenevalCategory.COLOR_ATTRI: 30,
        }
    )
    eval_temperature: float = 1.0
    eval_seed: int = 5000
    eval_preset: str = "conditional"  # conditional | paper
    threads: int = 2

    @property
    def block_len(self) -> int:
        return self.canvas_size * self.canvas_size

    def model_config(self, vocab_size: int, proj_dim: int, seed: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, layers=self.layers, heads=self.heads,
            hidden_dim=self.hidden_dim, feedforward_dim=self.feedforward_dim,
            context_length=self.context_length, proj_dim=proj_dim,
            seed=seed, dtype=self.dtype,
        )

    def schedule_for(self, mode: str):
        if self.eval_preset == "paper":
            return default_schedule(mode)
        return uniform_schedule(PRESETS[self.eval_preset])

    def json_counts(self) -> dict:
        d = asdict(self)
        d["suite_counts"] = {c.value: n for c, n in self.suite_counts.items()}
        return d


def _stage2_scenes(cfg: DeskConfig, codebook: Codebook):
    profile = ComplexityProfile(kind_weights=cfg.stage2_kinds, canvas_size=cfg.canvas_size)
    return brainstorm_prompts(cfg.stage2_n, seed=cfg.data_seed + 1, profile=profile)


def _filtered(traces, scenes, codebook, block_len):
    out = []
    for trace, spec in zip(traces, scenes):
        keep, _ = quality_filter(trace, spec, codebook, block_len)
        if keep:
            out.append(trace)
    return out


def prepare_stage1(cfg: DeskConfig, out_dir):
    """Shared first-stage checkpoint plus the prompt pools both claims reuse."""
    configure_threads(cfg.threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = default_vocab()
    codebook = Codebook.from_seed()
    profile1 = ComplexityProfile(kind_weights=cfg.stage1_kinds, canvas_size=cfg.canvas_size)
    stage1_scenes = brainstorm_prompts(cfg.stage1_n, seed=cfg.data_seed, profile=profile1)
    stage1_traces = [make_direct_trace(s, codebook) for s, _ in stage1_scenes]
    write_traces(stage1_traces, out_dir / "stage1_traces.jsonl")

    ckpt = out_dir / "stage1.pt"
    if not ckpt.exists():
        model = TinyMultimodalLM(
            cfg.model_config(vocab.size, codebook.feature_dim, cfg.model_seed)
        )
        t1 = TrainConfig(steps=cfg.stage1_steps, batch_size=cfg.stage1_batch, stage=1,
                         lr=cfg.lr, lam=cfg.lam, seed=cfg.model_seed)
        train(model, stage1_traces, vocab, codebook, cfg.block_len, t1, out_dir / "stage1_run")
        save_checkpoint(ckpt, model, extra={"stage": 1})
    prompts1 = {p for _, p in stage1_scenes}
    return vocab, codebook, ckpt, prompts1


def _held_out_suite(cfg: DeskConfig, training_prompts: set[str], out_dir: Path):
    suite = build_eval_suite(
        cfg.suite_counts, seed=cfg.suite_seed, canvas_size=cfg.canvas_size,
        exclude_prompts=frozenset(training_prompts),
    )
    write_suite(suite, out_dir / "suite.jsonl")
    return suite


def run_subgoal_claim(out_dir, cfg: DeskConfig = DeskConfig(), stage1_dir=None) -> dict:
    """Direct baseline vs subgoal thinker, same stage-1 start, same scenes."""
    t0 = time.time()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab, codebook, stage1_ckpt, prompts1 = prepare_stage1(cfg, stage1_dir or out_dir)
    scenes2 = _stage2_scenes(cfg, codebook)
    direct_traces = _filtered(
        [make_direct_trace(s, codebook) for s, _ in scenes2],
        [s for s, _ in scenes2], codebook, cfg.block_len)
    subgoal_traces = _filtered(
        [make_subgoal_trace(s, codebook) for s, _ in scenes2],
        [s for s, _ in scenes2], codebook, cfg.block_len)
    write_traces(direct_traces, out_dir / "stage2_direct.jsonl")
    write_traces(subgoal_traces, out_dir / "stage2_subgoal.jsonl")
    prompts2 = {p for _, p in scenes2}
    suite = _held_out_suite(cfg, prompts1 | prompts2, out_dir)

    per_seed = []
    for seed in cfg.seeds:
        row = {"seed": seed}
        for mode, traces in ((MODE_DIRECT, direct_traces), (MODE_SUBGOAL, subgoal_traces)):
            model, _ = load_checkpoint(stage1_ckpt)
            t2 = TrainConfig(steps=cfg.stage2_steps, batch_size=cfg.stage2_batch,
                             stage=2, lr=cfg.lr, lam=cfg.lam, seed=seed)
            run_dir = out_dir / f"{mode}_seed{seed}"
            train(model, traces, vocab, codebook, cfg.block_len, t2, run_dir)
            rep, traces_out = evaluate(
                model, vocab, codebook, suite, mode, cfg.block_len,
                schedule=cfg.schedule_for(mode),
                params=SampleParams(temperature=cfg.eval_temperature, seed=cfg.eval_seed),
            )
            write_report(rep, run_dir / "eval", traces=traces_out[:12],
                         codebook=codebook, canvas_size=cfg.canvas_size, label=mode)
            row[mode] = rep.to_dict()
        per_seed.append(row)

    two = GenevalCategory.TWO_OBJ.value
    direct_two = [r[MODE_DIRECT]["per_category"].get(two, 0.0) for r in per_seed]
    subgoal_two = [r[MODE_SUBGOAL]["per_category"].get(two, 0.0) for r in per_seed]
    results = {
        "claim": "subgoal",
        "config": cfg.json_counts(),
        "per_seed": per_seed,
        "direct_two_obj_mean": round(float(np.mean(direct_two)), 4),
        "subgoal_two_obj_mean": round(float(np.mean(subgoal_two)), 4),
        "gap": round(float(np.mean(subgoal_two) - np.mean(direct_two)), 4),
        "threshold": 0.05,
        "runtime_seconds": round(time.time() - t0, 1),
    }
    results["passed"] = results["gap"] >= results["threshold"]
    (out_dir / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


def run_critique_claim(out_dir, cfg: DeskConfig = DeskConfig(), stage1_dir=None) -> dict:
    """Critique thinker: final images must outscore its own hypothesis images."""
    t0 = time.time()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab, codebook, stage1_ckpt, prompts1 = prepare_stage1(cfg, stage1_dir or out_dir)
    scenes2 = _stage2_scenes(cfg, codebook)
    corruption = CorruptionModel(flaw_rate=cfg.flaw_rate, seed=cfg.data_seed + 2)
    critique_traces = []
    kept_scenes = []
    for idx, (spec, _) in enumerate(scenes2):
        rng = np.random.default_rng(np.random.SeedSequence((corruption.seed, idx)))
        trace = make_critique_trace(spec, corruption, codebook, rng)
        keep, _ = quality_filter(trace, spec, codebook, cfg.block_len)
        if keep:
            critique_traces.append(trace)
            kept_scenes.append(spec)
    write_traces(critique_traces, out_dir / "stage2_critique.jsonl")
    prompts2 = {t.prompt for t in critique_traces}
    suite = _held_out_suite(cfg, prompts1 | prompts2, out_dir)

    per_seed = []
    for seed in cfg.seeds:
        model, _ = load_checkpoint(stage1_ckpt)
        t2 = TrainConfig(steps=cfg.stage2_steps, batch_size=cfg.stage2_batch,
                         stage=2, lr=cfg.lr, lam=cfg.lam, seed=seed)
        run_dir = out_dir / f"critique_seed{seed}"
        train(model, critique_traces, vocab, codebook, cfg.block_len, t2, run_dir)
        rep, traces_out = evaluate(
            model, vocab, codebook, suite, MODE_CRITIQUE, cfg.block_len,
            schedule=cfg.schedule_for(MODE_CRITIQUE),
            params=SampleParams(temperature=cfg.eval_temperature, seed=cfg.eval_seed),
        )
        write_report(rep, run_dir / "eval", traces=traces_out[:12],
                     codebook=codebook, canvas_size=cfg.canvas_size, label="critique")
        per_seed.append({"seed": seed, "report": rep.to_dict()})

    final = [r["report"]["overall"] for r in per_seed]
    hypo = [r["report"]["hypo_overall"] for r in per_seed]
    results = {
        "claim": "critique",
        "config": cfg.json_counts(),
        "per_seed": per_seed,
        "hypo_overall_mean": round(float(np.mean(hypo)), 4),
        "final_overall_mean": round(float(np.mean(final)), 4),
        "gap": round(float(np.mean(final) - np.mean(hypo)), 4),
        "threshold": 0.02,
        "runtime_seconds": round(time.time() - t0, 1),
    }
    results["passed"] = results["gap"] >= results["threshold"]
    (out_dir / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results
