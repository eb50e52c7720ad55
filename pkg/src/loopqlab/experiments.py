"""Desk-scale experiment protocols shared by the acceptance suite and ``scripts/``.

Each function runs one seed and returns plain dicts so results can be logged
as JSON and aggregated across seeds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .calibrate import CalibProblem, OptConfig, run_calibration
from .looplm import LoopedModel, ModelConfig
from .methods.slt import sharing_gap_scores, untie
from .pipeline import ArmConfig, DataConfig, build_model, evaluate_arm, make_data, quantize_arm
from .quant import QuantScheme, QuantSpec, collect_activation_stats, new_scheme, scales_from_stats


def _top(d: dict[str, float]) -> str:
    return max(sorted(d), key=d.get)


# ---------------------------------------------------------------------------
# sharing-gap fidelity
# ---------------------------------------------------------------------------

@dataclass
class FidelityConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d=16, d_ff=32, T=3, L=2))
    data: DataConfig = field(default_factory=lambda: DataConfig(pretrain_steps=300,
                                                                calib_samples=32, seq_len=16))
    spec: QuantSpec = field(default_factory=lambda: QuantSpec(4, 4, 16))
    score_batches: int = 4
    recal_steps: int = 150
    recal_lr: float = 1e-3


def untie_gains(model: LoopedModel, scheme: QuantScheme, problem: CalibProblem, steps: int,
                lr: float, seed: int = 0) -> dict[str, float]:
    """Brute-force value of untying each group.

    For every group, its transform is recalibrated twice under an identical
    budget: once shared across loops and once untied into per-loop copies.
    The gain is the drop in full calibration loss of the untied run relative
    to the shared run. All other parameters stay frozen.
    """
    gains = {}
    for key in scheme.groups:
        opt = OptConfig(steps=steps, batch_size=len(problem), seed=seed, train_scales=False,
                        lr_transform=lr, only_groups=[key])
        shared = run_calibration(model, scheme, None, problem, opt=opt)[2].final["total"]
        untied = run_calibration(model, untie(scheme, [key]), None, problem,
                                 opt=opt)[2].final["total"]
        gains[key] = shared - untied
    return gains


def sharing_gap_fidelity(seed: int, cfg: FidelityConfig | None = None) -> dict:
    """Does the top sharing-gap group match the top brute-force untie gain?"""
    cfg = cfg or FidelityConfig()
    start = time.perf_counter()
    toks = make_data(cfg.model, cfg.data, seed)
    model, _ = build_model(cfg.model, cfg.data, seed, toks)
    problem = CalibProblem(model, toks["calib"])
    scheme = new_scheme(model, cfg.spec, "affine")
    scheme = scales_from_stats(scheme, collect_activation_stats(model, scheme, toks["calib"]))
    n = len(problem)
    size = max(1, n // cfg.score_batches)
    batches = [np.arange(i * size, min((i + 1) * size, n)) for i in range(cfg.score_batches)]
    scores = sharing_gap_scores(problem, scheme, None, batches, problem.mu(scheme, None)).scores
    gains = untie_gains(model, scheme, problem, cfg.recal_steps, cfg.recal_lr, seed)
    return {"seed": seed, "scores": scores, "gains": gains, "top_score": _top(scores),
            "top_gain": _top(gains), "match": _top(scores) == _top(gains),
            "seconds": time.perf_counter() - start}


# ---------------------------------------------------------------------------
# end-to-end ordering and ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d=32, T=4, L=2))
    data: DataConfig = field(default_factory=lambda: DataConfig(pretrain_steps=300,
                                                                calib_samples=32,
                                                                eval_samples=32))
    spec: QuantSpec = field(default_factory=lambda: QuantSpec(4, 4, 32))
    steps: int = 100
    slt_budget: int = 2


def ablation_arms(budget: int) -> dict[str, ArmConfig]:
    return {"symmetric": ArmConfig("symmetric"),
            "learned_affine": ArmConfig("learned_affine"),
            "loopq": ArmConfig(slt_budget=budget),
            "no_las": ArmConfig(las=False, slt_budget=budget),
            "no_slt": ArmConfig(slt=False),
            "no_cta": ArmConfig(cta=False, slt_budget=budget)}


def ablation(seed: int, cfg: AblationConfig | None = None) -> dict:
    """Final-loop relative error for the baselines, full LoopQ and its ablations."""
    cfg = cfg or AblationConfig()
    start = time.perf_counter()
    toks = make_data(cfg.model, cfg.data, seed)
    model, _ = build_model(cfg.model, cfg.data, seed, toks)
    err = {}
    for name, arm in ablation_arms(cfg.slt_budget).items():
        res = quantize_arm(model, cfg.spec, arm, toks["calib"],
                           opt=OptConfig(steps=cfg.steps, seed=seed), seed=seed)
        err[name] = evaluate_arm(model, res, toks["eval"]).final_loop_error()
    baselines = err["loopq"] < err["learned_affine"] < err["symmetric"]
    ablations = err["no_las"] > err["no_slt"] > err["no_cta"]
    return {"seed": seed, "errors": err, "baseline_order": baselines,
            "ablation_order": ablations, "seconds": time.perf_counter() - start}


# ---------------------------------------------------------------------------
# calibration-set size
# ---------------------------------------------------------------------------

@dataclass
class CalibSizeConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d=16, d_ff=32, T=3, L=2))
    data: DataConfig = field(default_factory=lambda: DataConfig(pretrain_steps=300,
                                                                eval_samples=32, seq_len=16))
    spec: QuantSpec = field(default_factory=lambda: QuantSpec(4, 4, 16))
    sizes: tuple[int, ...] = (16, 32, 64, 128)
    epochs: int | None = 32     # steps = epochs * size / batch_size
    steps: int = 100            # used when epochs is None
    batch_size: int = 16


def calib_size_sweep(seed: int, cfg: CalibSizeConfig | None = None) -> dict:
    """Held-out trajectory loss of full LoopQ for growing calibration sets.

    Calibration draws the first ``n`` sequences of one fixed stream, so larger
    sets contain the smaller ones. By default every size trains for the same
    number of epochs, so larger sets also get more optimizer steps. The
    held-out loss weights both hidden targets equally, so it is the same
    function for every student.
    """
    cfg = cfg or CalibSizeConfig()
    data = DataConfig(**{**cfg.data.__dict__, "calib_samples": max(cfg.sizes)})
    toks = make_data(cfg.model, data, seed)
    model, _ = build_model(cfg.model, data, seed, toks)
    held_out = CalibProblem(model, toks["eval"])
    rows = []
    for n in cfg.sizes:
        steps = cfg.steps if cfg.epochs is None else max(1, cfg.epochs * n // cfg.batch_size)
        res = quantize_arm(model, cfg.spec, ArmConfig(), toks["calib"][:n],
                           opt=OptConfig(steps=steps, batch_size=cfg.batch_size, seed=seed),
                           seed=seed)
        rows.append({"size": n, "steps": steps,
                     "held_out": held_out.full_loss(res.scheme, res.adapters, None),
                     "report": res.calibration})
    return {"seed": seed, "rows": rows}
