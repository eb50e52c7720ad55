"""Final-loop error of baselines, full LoopQ and its ablations over several seeds.

    python scripts/ablation.py --seeds 10 --out runs/ablation
"""
import argparse
import json
from pathlib import Path

import numpy as np

from loopqlab import io
from loopqlab.experiments import AblationConfig, ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--budget", type=int, default=2)
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()

    out = Path(args.out)
    cfg = AblationConfig(steps=args.steps, slt_budget=args.budget)
    runs = []
    for seed in range(args.seeds):
        r = ablation(seed, cfg)
        runs.append(r)
        errs = "  ".join(f"{k}={v:.4f}" for k, v in r["errors"].items())
        print(f"seed {seed}: {errs}  baselines ok={r['baseline_order']} "
              f"ablations ok={r['ablation_order']} ({r['seconds']:.0f}s)", flush=True)
    io.write_json(out / "ablation.json", runs)
    both = sum(r["baseline_order"] and r["ablation_order"] for r in runs)
    print(f"\nboth orderings hold on {both}/{len(runs)} seeds")
    for k in runs[0]["errors"]:
        v = [r["errors"][k] for r in runs]
        print(f"  {k:15s} median {np.median(v):.4f}  mean {np.mean(v):.4f}")
    io.write_manifest(out, "scripts/ablation.py", json.loads(json.dumps(vars(args))), None,
                      {"ablation": out / "ablation.json"})


if __name__ == "__main__":
    main()
