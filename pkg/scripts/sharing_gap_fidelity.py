"""Compare the sharing-gap ranking with brute-force untie-and-recalibrate gains.

    python scripts/sharing_gap_fidelity.py --seeds 10
"""
import argparse
from pathlib import Path

from loopqlab import io
from loopqlab.experiments import FidelityConfig, sharing_gap_fidelity


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--recal-steps", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", default="runs/sharing_gap")
    args = p.parse_args()

    cfg = FidelityConfig(recal_steps=args.recal_steps, recal_lr=args.lr)
    rows, runs = [], []
    for seed in range(args.seeds):
        r = sharing_gap_fidelity(seed, cfg)
        runs.append(r)
        print(f"seed {seed}: top score {r['top_score']:10s} top gain {r['top_gain']:10s} "
              f"match={r['match']} ({r['seconds']:.0f}s)", flush=True)
        for k in r["scores"]:
            rows.append({"seed": seed, "group": k, "score": r["scores"][k], "gain": r["gains"][k]})
    out = Path(args.out)
    io.write_json(out / "fidelity.json", runs)
    with (out / "scores.csv").open("w") as fh:
        fh.write("seed,group,score,gain\n")
        for r in rows:
            fh.write(f"{r['seed']},{r['group']},{r['score']!r},{r['gain']!r}\n")
    print(f"\ntop-1 agreement {sum(r['match'] for r in runs)}/{len(runs)}")


if __name__ == "__main__":
    main()
