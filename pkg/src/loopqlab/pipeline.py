"""Arm orchestration: scale init, LAS, SLT rounds, CTA attach, then calibration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import ErrorTrajectory, measure_error_trajectory
from .calibrate import CalibLossConfig, CalibProblem, CalibrationReport, OptConfig, run_calibration
from .data import zipf_markov_streams
from .looplm import ConfigError, LoopedModel, ModelConfig, init_model, pretrain
from .methods.baselines import BaselineKind, apply_baseline
from .methods.cta import TransitionAdapterParams
from .methods.las import enable_las
from .methods.slt import (SharingGapReport, select_loop_dependent, sharing_gap_scores,
                          transform_fraction, untie)
from .quant import QuantScheme, QuantSpec, collect_activation_stats, new_scheme, scales_from_stats

ARM_KINDS = ("symmetric", "smooth_scale", "rotation", "learned_affine", "loopq")


@dataclass
class ArmConfig:
    """Which method to run. Toggles and budgets apply to ``kind="loopq"`` only."""

    kind: str = "loopq"
    las: bool = True
    slt: bool = True
    cta: bool = True
    slt_budget: int = 1
    slt_rounds: int = 1
    slt_recal_steps: int = 20
    slt_batches: int = 4
    cta_rank: int = 8
    transform: str = "affine"   # "affine" or "kronecker"

    def __post_init__(self):
        if self.kind not in ARM_KINDS:
            raise ConfigError(f"unknown arm {self.kind!r}; expected one of {ARM_KINDS}")
        if self.transform not in ("affine", "kronecker"):
            raise ConfigError("transform must be 'affine' or 'kronecker'")
        if self.slt_budget < 0 or self.slt_rounds < 1 or self.cta_rank < 0:
            raise ConfigError("slt_budget >= 0, slt_rounds >= 1 and cta_rank >= 0 required")


@dataclass
class DataConfig:
    calib_samples: int = 64
    eval_samples: int = 32
    seq_len: int = 32
    pretrain_steps: int = 0
    pretrain_batch: int = 16
    pretrain_lr: float = 3e-3
    pretrain_samples: int = 512
    source_seed: int = 1234


@dataclass
class ArmResult:
    scheme: QuantScheme | None
    adapters: TransitionAdapterParams | None
    calibration: CalibrationReport | None = None
    sharing_gap: list[dict] = field(default_factory=list)
    selected: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"selected": list(self.selected),
               "loop_transform_fraction": transform_fraction(self.scheme) if self.scheme else 0.0,
               "parameters": self.scheme.count_parameters() if self.scheme else {},
               "adapter_parameters": self.adapters.num_parameters() if self.adapters else {},
               "sharing_gap": self.sharing_gap}
        if self.calibration is not None:
            out["calibration"] = {"initial": self.calibration.initial,
                                  "final": self.calibration.final,
                                  "digest": self.calibration.digest()}
        return out


def make_data(model_cfg: ModelConfig, data: DataConfig, seed: int) -> dict[str, np.ndarray]:
    """Disjoint pretrain / calibration / evaluation streams from one seeded source."""
    mk = lambda num, s: zipf_markov_streams(num, data.seq_len, model_cfg.vocab, seed=s,
                                            source_seed=data.source_seed)
    return {"pretrain": mk(data.pretrain_samples, 3 * seed + 100_000),
            "calib": mk(data.calib_samples, 3 * seed + 100_001),
            "eval": mk(data.eval_samples, 3 * seed + 100_002)}


def build_model(model_cfg: ModelConfig, data: DataConfig, seed: int,
                tokens: dict[str, np.ndarray] | None = None) -> tuple[LoopedModel, list[float]]:
    model = init_model(model_cfg, seed)
    curve: list[float] = []
    if data.pretrain_steps > 0:
        tokens = tokens or make_data(model_cfg, data, seed)
        curve = pretrain(model, tokens["pretrain"], data.pretrain_steps,
                         batch_size=data.pretrain_batch, lr=data.pretrain_lr, seed=seed)
    return model, curve


def _batches(n: int, bs: int, count: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    bs = min(bs, n)
    return [np.sort(rng.choice(n, bs, replace=False)) for _ in range(count)]


def quantize_arm(model: LoopedModel, spec: QuantSpec, arm: ArmConfig, calib: np.ndarray,
                 loss_cfg: CalibLossConfig | None = None, opt: OptConfig | None = None,
                 seed: int = 0) -> ArmResult:
    """Run one arm end to end. Inputs are not mutated."""
    for g in model.config.groups:
        spec.check_dim(model.config.group_in_dim(g))
    loss_cfg = loss_cfg or CalibLossConfig()
    opt = opt or OptConfig(seed=seed)
    kron = None

    if arm.kind in ("symmetric", "smooth_scale", "rotation"):
        return ArmResult(apply_baseline(arm.kind, model, spec, calib, seed=seed), None)

    problem = CalibProblem(model, calib, loss_cfg)
    calibrate = lambda s, a=None, o=opt: run_calibration(model, s, a, problem, opt=o)

    if arm.kind == "learned_affine":
        out: dict = {}

        def cal(s):
            s2, _, rep = calibrate(s)
            out["report"] = rep
            return s2
        scheme = apply_baseline(BaselineKind.learned_affine, model, spec, calib, seed=seed,
                                calibration=cal)
        return ArmResult(scheme, None, out.get("report"))

    # LoopQ: scale init -> LAS -> SLT -> CTA -> joint calibration
    if arm.transform == "kronecker":
        from .quant import kron_split
        kron = kron_split(model.d)
    scheme = new_scheme(model, spec, arm.transform, seed=seed, kron_dims=kron)
    stats = collect_activation_stats(model, scheme, calib, spec.act_percentile)
    scheme = scales_from_stats(scheme, stats)
    if arm.las:
        scheme = enable_las(scheme, stats)

    selected: list[str] = []
    gap_log: list[dict] = []
    if arm.slt and arm.slt_budget > 0:
        batches = _batches(len(calib), opt.batch_size, arm.slt_batches, seed + 17)
        state = {"scheme": scheme}

        def score(current: QuantScheme) -> SharingGapReport:
            rep = sharing_gap_scores(problem, current, None, batches, problem.mu(current, None))
            gap_log.append(rep.to_dict())
            return rep

        def rescore(chosen: list[str]) -> SharingGapReport:
            s = untie(state["scheme"], chosen)
            if arm.slt_recal_steps > 0:
                brief = OptConfig(**{**asdict(opt), "steps": arm.slt_recal_steps})
                s, _, _ = calibrate(s, None, brief)
            state["scheme"] = s
            return score(s)

        selected = select_loop_dependent(score(scheme), arm.slt_budget, arm.slt_rounds, rescore)
        scheme = untie(state["scheme"], selected)

    adapters = None
    if arm.cta:
        adapters = TransitionAdapterParams.init(model.T, model.d, rank=arm.cta_rank, seed=seed)
    scheme, adapters, report = calibrate(scheme, adapters)
    return ArmResult(scheme, adapters, report, gap_log, selected)


def evaluate_arm(model: LoopedModel, result: ArmResult, tokens: np.ndarray,
                 T: int | None = None) -> ErrorTrajectory:
    if T is not None and T != model.T and result.scheme is not None:
        result.scheme.extrapolate = True
        if result.adapters is not None:
            result.adapters.extrapolate = True
    m = model if T is None else model.with_loops(T)
    return measure_error_trajectory(m, result.scheme, result.adapters, tokens, T=T)
