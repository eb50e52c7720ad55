"""Held-out calibration loss of full LoopQ as the calibration set grows.

    python scripts/calib_size.py --seeds 5 --sizes 16 32 64 128
"""
import argparse
from pathlib import Path

import numpy as np

from loopqlab import io
from loopqlab.experiments import CalibSizeConfig, calib_size_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64, 128])
    p.add_argument("--epochs", type=int, default=32, help="steps = epochs * size / batch")
    p.add_argument("--steps", type=int, default=None,
                   help="fixed step count for every size (overrides --epochs)")
    p.add_argument("--out", default="runs/calib_size")
    args = p.parse_args()

    cfg = CalibSizeConfig(sizes=tuple(args.sizes), epochs=args.epochs)
    if args.steps is not None:
        cfg.epochs, cfg.steps = None, args.steps
    table = []
    for seed in range(args.seeds):
        r = calib_size_sweep(seed, cfg)
        for row in r["rows"]:
            table.append({"seed": seed, "size": row["size"], "steps": row["steps"],
                          "held_out": row["held_out"]["total"],
                          "calib_initial": row["report"].initial["total"],
                          "calib_final": row["report"].final["total"]})
        print(f"seed {seed}: " + "  ".join(f"{t['size']}:{t['held_out']:.5f}"
                                           for t in table if t["seed"] == seed), flush=True)
    io.write_json(Path(args.out) / "calib_size.json", table)
    for n in args.sizes:
        v = [t["held_out"] for t in table if t["size"] == n]
        print(f"size {n:4d}: median held-out loss {np.median(v):.5f}")


if __name__ == "__main__":
    main()
