"""Trajectory-aware distillation calibration with adaptive final-target weights."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node, NumericError
from .looplm import LoopedModel, Trajectory, forward
from .methods.cta import TransitionAdapterParams, apply_cta, cta_transition
from .optim import Adam, clip_grad_norm, cosine_factor
from .quant import QuantizedLinear, QuantScheme


class CalibrationError(RuntimeError):
    pass


@dataclass
class CalibLossConfig:
    lam: float = 0.1
    kl_temperature: float = 1.0
    teacher_topk: int = 1000
    mu_update_interval: int = 100
    mu_eps: float = 1e-8
    adaptive_mu: bool = True  # False: plain equal weighting of both hidden targets
    norm: str = "mean"        # "mean" or "sum" for the squared norms

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.mu_update_interval < 1:
            raise ValueError("mu_update_interval must be >= 1")
        if self.norm not in ("mean", "sum"):
            raise ValueError("norm must be 'mean' or 'sum'")


@dataclass
class OptConfig:
    steps: int = 200
    batch_size: int = 16
    lr_scale: float = 5e-3
    lr_transform: float = 1e-3
    lr_adapter: float = 1e-3
    grad_clip: float = 1.0
    cosine: bool = True
    seed: int = 0
    train_scales: bool = True
    train_transforms: bool = True
    train_adapters: bool = True
    scale_floor: float = 1e-6
    only_groups: list[str] | None = None  # restrict training to these group keys


# ---------------------------------------------------------------------------
# teacher trajectories
# ---------------------------------------------------------------------------

@dataclass
class Teacher:
    """Cached full-precision trajectory arrays for a set of sequences.

    ``hidden[t]`` is H_{t,L}, ``loop_in[t]`` is H_{t,0}; ``final`` is H_T.
    """

    hidden: np.ndarray   # (T, N, n, d)
    loop_in: np.ndarray  # (T, N, n, d)
    logits: np.ndarray   # (N, n, V)

    @property
    def final(self) -> np.ndarray:
        return self.hidden[-1]

    @property
    def T(self) -> int:
        return self.hidden.shape[0]

    def subset(self, idx) -> "Teacher":
        return Teacher(self.hidden[:, idx], self.loop_in[:, idx], self.logits[idx])

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "Teacher":
        return cls(np.stack([row[-1].value for row in traj.states]),
                   np.stack([row[0].value for row in traj.states]),
                   traj.logits.value)

    @classmethod
    def from_model(cls, model: LoopedModel, tokens: np.ndarray, batch_size: int = 64,
                   T: int | None = None) -> "Teacher":
        parts = [cls.from_trajectory(forward(model, tokens[i:i + batch_size], record=False, T=T))
                 for i in range(0, len(tokens), batch_size)]
        return cls(np.concatenate([p.hidden for p in parts], axis=1),
                   np.concatenate([p.loop_in for p in parts], axis=1),
                   np.concatenate([p.logits for p in parts], axis=0))


def _as_teacher(fp) -> Teacher:
    return fp if isinstance(fp, Teacher) else Teacher.from_trajectory(fp)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossTerms:
    total: Node
    kl: Node
    hidden: Node
    final: Node
    transition: Node
    lam: float

    def values(self) -> dict[str, float]:
        return {"total": self.total.item(), "kl": self.kl.item(), "hidden": self.hidden.item(),
                "final": self.final.item(), "transition": self.transition.item()}


def _sqnorm(diff: Node, norm: str) -> Node:
    return ad.mean(ad.square(diff)) if norm == "mean" else ad.sum(ad.square(diff))


def _sqnorm_np(diff: np.ndarray, norm: str) -> float:
    return float(np.mean(diff * diff) if norm == "mean" else np.sum(diff * diff))


def kl_divergence(teacher_logits: np.ndarray, student_logits: Node, temperature: float = 1.0,
                  topk: int | None = None) -> Node:
    """Mean over tokens of KL(softmax(Z/tau) || softmax(Z~/tau)) on the teacher's top-k."""
    z = np.asarray(teacher_logits) / temperature
    zs = student_logits * (1.0 / temperature)
    V = z.shape[-1]
    if topk is not None and topk < V:
        idx = np.argsort(-z, axis=-1, kind="stable")[..., :topk]
        z = np.take_along_axis(z, idx, axis=-1)
        lead = np.indices(idx.shape[:-1])
        zs = zs[tuple(lead[..., None][i] for i in range(lead.shape[0])) + (idx,)]
    logp = z - z.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    logq = ad.log_softmax(zs, axis=-1)
    per_tok = ad.sum((logp - logq) * p, axis=-1)
    return ad.mean(per_tok)


def trajectory_loss(fp, q: Trajectory, cfg: CalibLossConfig, mu=None,
                    adapters: TransitionAdapterParams | None = None,
                    adapter_nodes: dict[str, Node] | None = None) -> LossTerms:
    """KL + lambda * (loop-wise hidden + final-target + transition terms).

    ``mu=None`` gives the plain objective (both hidden targets weighted 1);
    otherwise loop t uses (1 - mu_t) and mu_t. Transition predictions are
    A_t(H~_{t,L}) if ``adapters`` is given, else ``q.states[t+1][0]``.
    """
    fp = _as_teacher(fp)
    T = q.T
    if fp.T != T or fp.hidden.shape[1:] != q.final.shape:
        raise ContractError(f"teacher/student mismatch: {fp.hidden.shape} vs T={T}, {q.final.shape}")
    kl = kl_divergence(fp.logits, q.logits, cfg.kl_temperature, cfg.teacher_topk)
    hidden_terms, final_terms, trans_terms = [], [], []
    for t in range(T):
        ht = q.states[t][-1]
        w_loop, w_final = (1.0, 1.0) if mu is None else (1.0 - mu[t], mu[t])
        hidden_terms.append(_sqnorm(ht - fp.hidden[t], cfg.norm) * w_loop)
        final_terms.append(_sqnorm(ht - fp.final, cfg.norm) * w_final)
        if t < T - 1:
            pred = apply_cta(adapters, ht, t, adapter_nodes) if adapters is not None \
                else q.states[t + 1][0]
            trans_terms.append(_sqnorm(pred - fp.loop_in[t + 1], cfg.norm))
    zero = Node(0.0, check=False)
    hidden = _sum_nodes(hidden_terms)
    final = _sum_nodes(final_terms)
    trans = _sum_nodes(trans_terms) if trans_terms else zero
    total = kl + (hidden + final + trans) * cfg.lam
    return LossTerms(total, kl, hidden, final, trans, cfg.lam)


def _sum_nodes(nodes):
    out = nodes[0]
    for n in nodes[1:]:
        out = out + n
    return out


def compute_mu(fp, q_hidden, eps: float = 1e-8, norm: str = "mean") -> np.ndarray:
    """Adaptive trust weights for the final teacher target.

    mu_t = ||H_T - H_{t,L}||^2 / (||H_T - H_{t,L}||^2 + sum_{t'>=t} ||H_{t',L} - H~_{t',L}||^2 + eps)
    ``q_hidden`` is a trajectory or an array (T, ...) of student H~_{t,L}.
    """
    fp = _as_teacher(fp)
    if isinstance(q_hidden, Trajectory):
        q_hidden = np.stack([row[-1].value for row in q_hidden.states])
    T = fp.T
    dist = np.array([_sqnorm_np(fp.final - fp.hidden[t], norm) for t in range(T)])
    mism = np.array([_sqnorm_np(fp.hidden[t] - q_hidden[t], norm) for t in range(T)])
    tail = np.cumsum(mism[::-1])[::-1]
    return dist / (dist + tail + eps)


# ---------------------------------------------------------------------------
# calibration problem
# ---------------------------------------------------------------------------

class CalibProblem:
    """Model + calibration tokens + cached teacher, producing losses for a scheme."""

    def __init__(self, model: LoopedModel, tokens: np.ndarray, cfg: CalibLossConfig | None = None,
                 teacher: Teacher | None = None):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or len(tokens) == 0:
            raise ContractError("calibration needs at least one sequence")
        self.model = model
        self.tokens = tokens
        self.cfg = cfg or CalibLossConfig()
        self.teacher = teacher if teacher is not None else Teacher.from_model(model, tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def student(self, scheme: QuantScheme, adapters, idx, nodes=None) -> Trajectory:
        return forward(self.model, self.tokens[idx], record=False,
                       linear=QuantizedLinear(scheme, nodes),
                       transition=cta_transition(adapters, nodes))

    def loss(self, scheme, adapters, idx, nodes=None, mu=None) -> LossTerms:
        q = self.student(scheme, adapters, idx, nodes)
        return trajectory_loss(self.teacher.subset(idx), q, self.cfg, mu)

    def student_hidden(self, scheme, adapters, batch_size: int = 64) -> np.ndarray:
        outs = []
        for i in range(0, len(self), batch_size):
            q = self.student(scheme, adapters, slice(i, i + batch_size))
            outs.append(np.stack([row[-1].value for row in q.states]))
        return np.concatenate(outs, axis=1)

    def mu(self, scheme, adapters) -> np.ndarray | None:
        if not self.cfg.adaptive_mu:
            return None
        return compute_mu(self.teacher, self.student_hidden(scheme, adapters),
                          self.cfg.mu_eps, self.cfg.norm)

    def full_loss(self, scheme, adapters, mu, batch_size: int = 64) -> dict[str, float]:
        """Loss terms averaged over the whole calibration set (sample-weighted)."""
        acc: dict[str, float] = {}
        for i in range(0, len(self), batch_size):
            sl = slice(i, min(i + batch_size, len(self)))
            w = (sl.stop - sl.start) / len(self)
            for k, v in self.loss(scheme, adapters, sl, None, mu).values().items():
                acc[k] = acc.get(k, 0.0) + w * v
        return acc


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class CalibrationReport:
    steps: list[dict] = field(default_factory=list)
    initial: dict[str, float] = field(default_factory=dict)
    final: dict[str, float] = field(default_factory=dict)
    mu_initial: list[float] | None = None
    mu_final: list[float] | None = None
    param_norms: dict[str, float] = field(default_factory=dict)
    condition_numbers: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Content hash excluding wall-clock timing."""
        d = self.to_dict()
        d.pop("wall_clock")
        blob = json.dumps(d, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()


def _group_of(name: str) -> str:
    layer, group = name.split(".")[:2]
    return f"{layer}.{group}"


def trainable_parameters(scheme: QuantScheme, adapters: TransitionAdapterParams | None,
                         opt: OptConfig) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    params: dict[str, np.ndarray] = {}
    lrs: dict[str, float] = {}
    for name, arr in scheme.parameters().items():
        if opt.only_groups is not None and _group_of(name) not in opt.only_groups:
            continue
        kind = scheme.param_kind(name)
        if kind == "scale" and opt.train_scales and scheme.spec.bits_a:
            params[name], lrs[name] = arr, opt.lr_scale
        elif kind == "transform" and opt.train_transforms:
            params[name], lrs[name] = arr, opt.lr_transform
    if adapters is not None and opt.train_adapters and opt.only_groups is None:
        for name, arr in adapters.parameters().items():
            params[name], lrs[name] = arr, opt.lr_adapter
    return params, lrs


def run_calibration(model: LoopedModel, scheme: QuantScheme,
                    adapters: TransitionAdapterParams | None, tokens: np.ndarray | CalibProblem,
                    cfg: CalibLossConfig | None = None, opt: OptConfig | None = None
                    ) -> tuple[QuantScheme, TransitionAdapterParams | None, CalibrationReport]:
    """Jointly optimize transforms, scales and adapters along the loop trajectory.

    Inputs are not mutated; updated copies are returned.
    """
    opt = opt or OptConfig()
    problem = tokens if isinstance(tokens, CalibProblem) else CalibProblem(model, tokens, cfg)
    cfg = problem.cfg
    scheme = scheme.copy()
    adapters = adapters.copy() if adapters is not None else None
    report = CalibrationReport()
    start = time.perf_counter()

    mu = problem.mu(scheme, adapters)
    mu0 = mu
    report.mu_initial = None if mu is None else mu.tolist()
    report.initial = problem.full_loss(scheme, adapters, mu0)
    params, lrs = trainable_parameters(scheme, adapters, opt)
    optim = Adam(lrs)
    rng = np.random.default_rng(opt.seed)
    N = len(problem)
    bs = min(opt.batch_size, N)
    order = np.array([], dtype=int)
    last_finite = None
    for step in range(opt.steps):
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(N)])
        idx, order = np.sort(order[:bs]), order[bs:]
        if step > 0 and step % cfg.mu_update_interval == 0 and mu is not None:
            mu = problem.mu(scheme, adapters)
        nodes = {k: Node(v, requires_grad=True, check=False) for k, v in params.items()}
        try:
            terms = problem.loss(scheme, adapters, idx, nodes, mu)
            terms.total.backward()
        except NumericError as exc:
            raise CalibrationError(f"non-finite loss at step {step}; last finite step: "
                                   f"{last_finite}") from exc
        vals = terms.values()
        last_finite = {"step": step, **vals}
        grads = {k: n.grad if n.grad is not None else np.zeros_like(n.value)
                 for k, n in nodes.items()}
        gnorm = clip_grad_norm(grads, opt.grad_clip)
        lr_mult = cosine_factor(step, opt.steps) if opt.cosine else 1.0
        optim.step(params, grads, lr_mult)
        for name, arr in params.items():
            if name.endswith(".c"):
                np.maximum(arr, opt.scale_floor, out=arr)
        scheme.invalidate()
        report.steps.append({"step": step, **vals, "lam": cfg.lam, "grad_norm": gnorm,
                             "lr_mult": lr_mult})

    if opt.steps > 0:
        mu = problem.mu(scheme, adapters)
    report.mu_final = None if mu is None else mu.tolist()
    report.final = problem.full_loss(scheme, adapters, mu0)
    report.param_norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
    report.condition_numbers = {k: g.transform.condition_number()
                                for k, g in scheme.groups.items() if g.transform.trainable}
    report.wall_clock = time.perf_counter() - start
    return scheme, adapters, report


def estimate_fisher(problem: CalibProblem, scheme: QuantScheme, adapters, batches,
                    names: list[str] | None = None, mu=None) -> dict[str, np.ndarray]:
    """Diagonal empirical Fisher: mean over batches of squared loss gradients."""
    batches = list(batches)
    if not batches:
        raise ContractError("need at least one batch")
    params = {**scheme.parameters(trainable_only=False),
              **(adapters.parameters() if adapters is not None else {})}
    if names is not None:
        params = {k: params[k] for k in names}
    acc = {k: np.zeros_like(v) for k, v in params.items()}
    for idx in batches:
        nodes = {k: Node(v, requires_grad=True, check=False) for k, v in params.items()}
        problem.loss(scheme, adapters, idx, nodes, mu).total.backward()
        for k, n in nodes.items():
            if n.grad is not None:
                acc[k] += n.grad * n.grad
    return {k: v / len(batches) for k, v in acc.items()}
