"""Per-(loop, layer) error trajectories and activation drift on the pretrained toy.

Writes one trajectory CSV per arm plus a drift CSV, ready for external plotting.

    python scripts/error_trajectory.py --seed 0 --out runs/trajectory
"""
import argparse
from pathlib import Path

from loopqlab import io
from loopqlab.analysis import drift_stats, verify_prop2
from loopqlab.calibrate import OptConfig
from loopqlab.experiments import AblationConfig
from loopqlab.pipeline import ArmConfig, build_model, evaluate_arm, make_data, quantize_arm


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arms", nargs="+", default=["symmetric", "learned_affine", "loopq"])
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", default="runs/trajectory")
    args = p.parse_args()

    cfg = AblationConfig()
    out = Path(args.out)
    toks = make_data(cfg.model, cfg.data, args.seed)
    model, curve = build_model(cfg.model, cfg.data, args.seed, toks)
    print(f"pretrained {len(curve)} steps, loss {curve[0]:.3f} -> {curve[-1]:.3f}")
    io.write_csv(out / "drift.csv", "drift", drift_stats(model, toks["eval"]).rows())
    for kind in args.arms:
        arm = ArmConfig(kind, slt_budget=cfg.slt_budget)
        res = quantize_arm(model, cfg.spec, arm, toks["calib"],
                           opt=OptConfig(steps=args.steps, seed=args.seed), seed=args.seed)
        traj = evaluate_arm(model, res, toks["eval"])
        io.write_csv(out / f"trajectory_{kind}.csv", "trajectory", traj.rows())
        ok = verify_prop2(traj).ok
        print(f"{kind:15s} final-loop error {traj.final_loop_error():.4f}  "
              f"per-loop exit error {[round(float(x), 4) for x in traj.rel_err[:, -1]]}  bound ok={ok}")


if __name__ == "__main__":
    main()
