#!/usr/bin/env python3
"""Quick scaled-down pass over both desk experiments to sanity-check learning
dynamics and timing before committing to the full configuration."""
import argparse
import json
import sys
from pathlib import Path

from mmcot.experiments import DeskConfig, run_critique_claim, run_subgoal_claim
from mmcot.world import GenevalCategory


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/mmcot_calibration")
    ap.add_argument("--stage1-steps", type=int, default=800)
    ap.add_argument("--stage2-steps", type=int, default=500)
    ap.add_argument("--stage2-n", type=int, default=400)
    ap.add_argument("--temperature", type=float, default=1.0)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--preset", default="conditional")
    ap.add_argument("--flaw-rate", type=float, default=0.85)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--skip-critique", action="store_true")
    ap.add_argument("--skip-subgoal", action="store_true")
    args = ap.parse_args()

    cfg = DeskConfig(
        stage1_steps=args.stage1_steps,
        stage2_steps=args.stage2_steps,
        stage2_n=args.stage2_n,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        eval_temperature=args.temperature,
        eval_preset=args.preset,
        flaw_rate=args.flaw_rate,
        lr=args.lr,
        suite_counts={
            GenevalCategory.SINGLE_OBJ: 10,
            GenevalCategory.TWO_OBJ: 30,
            GenevalCategory.COUNTING: 10,
            GenevalCategory.COLORS: 10,
            GenevalCategory.POSITION: 10,
            GenevalCategory.COLOR_ATTRI: 10,
        },
    )
    out = Path(args.out)
    if not args.skip_subgoal:
        res = run_subgoal_claim(out / "subgoal", cfg)
        print("SUBGOAL:", json.dumps({k: res[k] for k in
              ("direct_two_obj_mean", "subgoal_two_obj_mean", "gap", "passed",
               "runtime_seconds")}, indent=2))
        for row in res["per_seed"]:
            print("  seed", row["seed"],
                  "direct:", row["direct"]["per_category"],
                  "ungram:", row["direct"]["ungrammatical"])
            print("  seed", row["seed"],
                  "subgoal:", row["subgoal"]["per_category"],
                  "ungram:", row["subgoal"]["ungrammatical"])
    if not args.skip_critique:
        res = run_critique_claim(out / "critique", cfg)
        print("CRITIQUE:", json.dumps({k: res[k] for k in
              ("hypo_overall_mean", "final_overall_mean", "gap", "passed",
               "runtime_seconds")}, indent=2))
        for row in res["per_seed"]:
            print("  seed", row["seed"], "final:", row["report"]["per_category"])
            print("  seed", row["seed"], "hypo:", row["report"]["hypo_per_category"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
