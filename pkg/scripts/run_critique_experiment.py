#!/usr/bin/env python3
"""Desk-scale critique experiment: a critique thinker trained on simulated
flawed first attempts must produce final images that outscore its own
hypothesis images on a held-out suite, averaged over three seeds."""
import argparse
import json
import sys
from pathlib import Path

from mmcot.experiments import DeskConfig, run_critique_claim


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/critique_experiment")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()
    cfg = DeskConfig(seeds=tuple(int(s) for s in args.seeds.split(",")),
                     threads=args.threads)
    results = run_critique_claim(Path(args.out), cfg)
    print(json.dumps(results, indent=2, sort_keys=True))
    print(f"\nfinal overall {results['final_overall_mean']} vs "
          f"hypothesis {results['hypo_overall_mean']} "
          f"(gap {results['gap']}, need >= {results['threshold']}): "
          f"{'PASS' if results['passed'] else 'FAIL'}")
    return 0 if results["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
