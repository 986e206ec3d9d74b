#!/usr/bin/env python3
"""Full-scale one-seed calibration: train the three stage-2 arms at desk size,
then sweep evaluation temperature on the saved checkpoints."""
import json
import sys
import time
from pathlib import Path

import numpy as np

from mmcot.codec import Codebook
from mmcot.datagen import CorruptionModel, make_critique_trace, make_direct_trace, make_subgoal_trace, quality_filter
from mmcot.evaluation import build_eval_suite, evaluate, write_suite
from mmcot.experiments import DeskConfig, _stage2_scenes, prepare_stage1
from mmcot.model import load_checkpoint
from mmcot.sampler import PRESETS, SampleParams, default_schedule, uniform_schedule
from mmcot.traces import MODE_CRITIQUE, MODE_DIRECT, MODE_SUBGOAL
from mmcot.training import TrainConfig, train
from mmcot.world import GenevalCategory


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/cal_full")
    cfg = DeskConfig(seeds=(0,))
    vocab, codebook, stage1_ckpt, prompts1 = prepare_stage1(cfg, out / "stage1")
    print("stage1 done", flush=True)
    scenes2 = _stage2_scenes(cfg, codebook)
    prompts2 = {p for _, p in scenes2}
    suite = build_eval_suite(cfg.suite_counts, seed=cfg.suite_seed,
                             exclude_prompts=frozenset(prompts1 | prompts2))
    write_suite(suite, out / "suite.jsonl")

    corruption = CorruptionModel(flaw_rate=cfg.flaw_rate, seed=cfg.data_seed + 2)
    datasets = {}
    datasets[MODE_DIRECT] = [make_direct_trace(s, codebook) for s, _ in scenes2]
    datasets[MODE_SUBGOAL] = [make_subgoal_trace(s, codebook) for s, _ in scenes2]
    crit = []
    for idx, (spec, _) in enumerate(scenes2):
        rng = np.random.default_rng(np.random.SeedSequence((corruption.seed, idx)))
        crit.append(make_critique_trace(spec, corruption, codebook, rng))
    datasets[MODE_CRITIQUE] = crit

    ckpts = {}
    for mode, traces in datasets.items():
        t0 = time.time()
        model, _ = load_checkpoint(stage1_ckpt)
        t2 = TrainConfig(steps=cfg.stage2_steps, batch_size=cfg.stage2_batch,
                         stage=2, lr=cfg.lr, lam=cfg.lam, seed=0)
        run_dir = out / f"{mode}_run"
        res = train(model, traces, vocab, codebook, cfg.block_len, t2, run_dir)
        ckpts[mode] = res.checkpoint_path
        print(f"{mode} trained in {time.time()-t0:.0f}s final loss {res.final_loss:.3f}",
              flush=True)

    results = {}
    for mode in (MODE_DIRECT, MODE_SUBGOAL, MODE_CRITIQUE):
        model, _ = load_checkpoint(ckpts[mode])
        for temp in (1.0, 0.8, 0.6, 0.0):
            t0 = time.time()
            rep, _ = evaluate(
                model, vocab, codebook, suite, mode, cfg.block_len,
                schedule=uniform_schedule(PRESETS["conditional"]),
                params=SampleParams(temperature=temp, seed=cfg.eval_seed))
            key = f"{mode}@t{temp}"
            results[key] = rep.to_dict()
            print(f"{key}: overall={rep.overall} two_obj={rep.per_category.get('two_obj')} "
                  f"hypo={rep.hypo_overall} ungram={rep.ungrammatical} "
                  f"({time.time()-t0:.0f}s)", flush=True)
    (out / "sweep.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    # paper-preset spot check at the best-looking temperature
    for mode in (MODE_SUBGOAL, MODE_CRITIQUE):
        model, _ = load_checkpoint(ckpts[mode])
        rep, _ = evaluate(model, vocab, codebook, suite, mode, cfg.block_len,
                          schedule=default_schedule(mode),
                          params=SampleParams(temperature=0.8, seed=cfg.eval_seed))
        print(f"{mode}@paper-presets t0.8: overall={rep.overall} "
              f"two_obj={rep.per_category.get('two_obj')} hypo={rep.hypo_overall} "
              f"ungram={rep.ungrammatical}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
