"""Command-line entry point: ``loopqlab <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .analysis import (VerificationError, drift_stats, measure_error_trajectory,
                       verify_prop1, verify_prop1_covariance, verify_prop2)
from .io import Checkpoint, ExperimentConfig
from .looplm import ConfigError
from .pipeline import ArmConfig, build_model, evaluate_arm, make_data, quantize_arm

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3


def _config(args) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    base = ExperimentConfig.from_dict(raw).to_dict()
    return ExperimentConfig.from_dict(io.apply_overrides(base, getattr(args, "set", None)))


def _out_dir(args, cfg: ExperimentConfig | None, name: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    elif cfg is not None and cfg.output_dir:
        out = Path(cfg.output_dir)
    else:
        out = io.output_root() / name
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "generate")
    model, curve = build_model(cfg.model, cfg.data, cfg.seed)
    ck = out / "model.lqb"
    io.save_checkpoint(ck, Checkpoint(model, seeds={"model": cfg.seed},
                                      meta={"config": cfg.to_dict()}))
    outputs = {"checkpoint": ck}
    if curve:
        outputs["pretrain"] = io.write_csv(out / "pretrain.csv", "pretrain",
                                           [{"step": i, "loss": v} for i, v in enumerate(curve)])
    io.write_json(out / "summary.json", {"weights_sha256": io.weights_hash(model),
                                         "pretrain_loss": curve})
    io.write_manifest(out, "generate", cfg, cfg.seed, outputs)
    print(f"wrote {ck}")
    return EXIT_OK


def _load_model(path, cfg: ExperimentConfig):
    ck = io.load_checkpoint(path)
    if ck.model.config != cfg.model:
        cfg.model = ck.model.config
        cfg.validate()
    return ck.model


def cmd_quantize(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint, cfg)
    out = _out_dir(args, cfg, "quantize")
    data = make_data(cfg.model, cfg.data, cfg.seed)
    opt = cfg.optim
    res = quantize_arm(model, cfg.quant, cfg.arm, data["calib"], cfg.loss, opt, seed=cfg.seed)
    ck = out / "quantized.lqb"
    io.save_checkpoint(ck, Checkpoint(model, res.scheme, res.adapters,
                                      seeds={"model": cfg.seed, "calibration": opt.seed},
                                      meta={"arm": asdict(cfg.arm)}))
    traj = evaluate_arm(model, res, data["eval"])
    report = {"arm": cfg.arm.kind, "seed": cfg.seed, **res.summary(),
              "final_loop_error": traj.final_loop_error(), "trajectory": traj.to_dict()}
    outputs = {"checkpoint": ck, "report": io.write_json(out / "report.json", report)}
    if res.calibration is not None:
        outputs["calibration"] = io.write_csv(out / "calibration.csv", "calibration",
                                              res.calibration.steps)
    io.write_manifest(out, "quantize", cfg, cfg.seed, outputs)
    print(f"{cfg.arm.kind}: final-loop relative error {traj.final_loop_error():.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    fp = _load_model(args.fp, cfg)
    q = io.load_checkpoint(args.quantized)
    if io.weights_hash(q.model) != io.weights_hash(fp):
        raise ConfigError("quantized checkpoint was built from different weights")
    out = _out_dir(args, cfg, "analyze")
    tokens = make_data(cfg.model, cfg.data, cfg.seed)["eval"]
    traj = measure_error_trajectory(fp, q.scheme, q.adapters, tokens)
    verdict = verify_prop2(traj)
    drift = drift_stats(fp, tokens)
    outputs = {"trajectory": io.write_csv(out / "trajectory.csv", "trajectory", traj.rows()),
               "drift": io.write_csv(out / "drift.csv", "drift", drift.rows())}
    outputs["summary"] = io.write_json(out / "summary.json", {
        "final_loop_error": traj.final_loop_error(), "trajectory": traj.to_dict(),
        "recursion_bound": verdict.to_dict()})
    io.write_manifest(out, "analyze", cfg, cfg.seed, outputs)
    print(f"final-loop relative error {traj.final_loop_error():.6f}; bound holds: {verdict.ok}")
    return EXIT_OK if verdict.ok else EXIT_VERIFY


def cmd_verify(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "verify")
    results: dict = {}
    ok = True
    seeds = list(range(args.seeds))
    if 1 in args.props:
        rep = verify_prop1((1.0, args.drift_scale), bits=cfg.quant.bits_a or 4, n=args.samples,
                           seed=cfg.seed)
        cov = verify_prop1_covariance(np.diag([4.0, 0.25]),
                                      _rotated(np.diag([4.0, 0.25]), 40.0), seed=cfg.seed)
        p1_ok = rep.margin > 0 and rep.z >= 5 and cov.excess > 0
        results["prop1"] = {"scale_drift": rep.to_dict(), "covariance_drift": cov.to_dict(),
                            "ok": p1_ok}
        ok &= p1_ok
    if 2 in args.props:
        runs = []
        for s in seeds:
            model, _ = build_model(cfg.model, cfg.data, s)
            data = make_data(cfg.model, cfg.data, s)
            for kind in args.arms:
                arm = ArmConfig(**{**asdict(cfg.arm), "kind": kind})
                res = quantize_arm(model, cfg.quant, arm, data["calib"], cfg.loss, cfg.optim, s)
                v = verify_prop2(evaluate_arm(model, res, data["eval"]))
                runs.append({"seed": s, "arm": kind, **v.to_dict()})
                ok &= v.ok
        results["prop2"] = {"runs": runs, "ok": all(r["ok"] for r in runs)}
    results["ok"] = bool(ok)
    path = io.write_json(out / "verdict.json", results)
    io.write_manifest(out, "verify", cfg, cfg.seed, {"verdict": path})
    print(f"verification {'passed' if ok else 'FAILED'}: {path}")
    return EXIT_OK if ok else EXIT_VERIFY


def _rotated(cov: np.ndarray, deg: float) -> np.ndarray:
    th = np.deg2rad(deg)
    r = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return r @ cov @ r.T


def sweep_rows(cfg: ExperimentConfig, axis: str, values: list, seeds: list[int]) -> list[dict]:
    rows = []
    for s in seeds:
        base = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": s})
        model, _ = build_model(base.model, base.data, s)
        cached = None
        for v in values:
            c = ExperimentConfig.from_dict(base.to_dict())
            if axis == "calib_size":
                c.data.calib_samples = int(v)
            elif axis == "budget":
                c.arm.slt_budget = int(v)
            data = make_data(c.model, c.data, s)
            if axis != "loops" or cached is None:
                cached = quantize_arm(model, c.quant, c.arm, data["calib"], c.loss, c.optim, s)
            res = cached
            T_eval = int(v) if axis == "loops" else None
            traj = evaluate_arm(model, res, data["eval"], T=T_eval)
            cal = res.calibration
            rows.append({"axis": axis, "value": v, "seed": s, "arm": c.arm.kind,
                         "final_loop_error": traj.final_loop_error(),
                         "calib_loss_initial": cal.initial["total"] if cal else "",
                         "calib_loss_final": cal.final["total"] if cal else "",
                         "selected": ";".join(res.selected)})
    return rows


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "sweep")
    try:
        values = [int(v) for v in args.values]
    except ValueError as exc:
        raise ConfigError(f"sweep values must be integers: {exc}") from exc
    rows = sweep_rows(cfg, args.axis, values, list(range(cfg.seed, cfg.seed + args.seeds)))
    path = io.write_csv(out / "sweep.csv", "sweep", rows)
    io.write_manifest(out, f"sweep:{args.axis}", cfg, cfg.seed, {"sweep": path})
    for r in rows:
        print(f"{r['axis']}={r['value']} seed={r['seed']}: {r['final_loop_error']:.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        raise ConfigError(f"no such directory {root}")
    rows = []
    for rp in sorted(root.rglob("report.json")):
        r = json.loads(rp.read_text())
        rows.append({"run": str(rp.parent.relative_to(root)), "arm": r.get("arm", ""),
                     "seed": r.get("seed", ""), "final_loop_error": r.get("final_loop_error", ""),
                     "calib_loss_final": (r.get("calibration") or {}).get("final", {}).get("total", "")})
    path = io.write_csv(root / "report.csv", "report", rows)
    for r in rows:
        print(f"{r['run']:<30} {r['arm']:<16} {r['final_loop_error']}")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loopqlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment config JSON")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config field, e.g. model.T=6")
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default ${io.OUT_ENV} or ./runs)")

    sp = sub.add_parser("generate", help="build and optionally pretrain a toy model")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("quantize", help="quantize a checkpoint with one arm")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("analyze", help="error trajectory and drift reports")
    common(sp)
    sp.add_argument("--fp", required=True, help="full-precision checkpoint")
    sp.add_argument("--quantized", required=True, help="quantized checkpoint")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("verify", help="numerical checks of the propagation results")
    common(sp)
    sp.add_argument("--props", type=int, nargs="+", default=[1, 2], choices=[1, 2])
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--arms", nargs="+", default=["symmetric", "loopq"])
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--drift-scale", type=float, default=4.0)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sweep", help="sweep loops, calibration size or SLT budget")
    common(sp)
    sp.add_argument("--axis", required=True, choices=["loops", "calib_size", "budget"])
    sp.add_argument("--values", nargs="+", required=True)
    sp.add_argument("--seeds", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="aggregate report.json files under a directory")
    sp.add_argument("--dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
