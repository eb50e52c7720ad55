"""Desk-scale looped transformer: one shared stack of L layers applied T times."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node, NumericError

# Transform-weight groups of a block, in execution order.
BLOCK_GROUPS = ("qkv", "o_proj", "up_gate", "down")
LINEAR_GROUPS = ("linear",)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab: int = 256
    d: int = 32
    n_heads: int = 2
    d_ff: int = 64
    T: int = 4
    L: int = 2
    norm_eps: float = 1e-6
    init_std: float | None = None  # None -> 0.02 / sqrt(L)
    embed_std: float = 1.0
    mode: str = "block"  # "block" or "linear" (single matrix per layer)

    def validate(self) -> None:
        if self.T < 1 or self.L < 1:
            raise ConfigError("T and L must be >= 1")
        if self.d < 1 or self.vocab < 1:
            raise ConfigError("d and vocab must be >= 1")
        if self.mode not in ("block", "linear"):
            raise ConfigError(f"unknown model mode {self.mode!r}")
        if self.mode == "block":
            if self.n_heads < 1 or self.d % self.n_heads:
                raise ConfigError("d must be divisible by n_heads")
            if self.d_ff < 1:
                raise ConfigError("d_ff must be >= 1")

    @property
    def groups(self) -> tuple[str, ...]:
        return BLOCK_GROUPS if self.mode == "block" else LINEAR_GROUPS

    def group_in_dim(self, group: str) -> int:
        return self.d_ff if group == "down" else self.d


@dataclass
class LoopedModel:
    """Weights of a looped model. ``weights`` maps parameter names to arrays.

    Layer parameters are named ``"{layer}.{kind}"`` where kind is one of the
    transform-weight groups (``qkv``, ``o_proj``, ``up_gate``, ``down``) or a
    norm gain (``attn_norm``, ``mlp_norm``). The linear toy mode keeps a single
    ``"{layer}.linear"`` matrix per layer.
    """

    config: ModelConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.config.T

    @property
    def L(self) -> int:
        return self.config.L

    @property
    def d(self) -> int:
        return self.config.d

    def group_weight_name(self, layer: int, group: str) -> str:
        return f"{layer}.{group}"

    def num_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def copy(self) -> "LoopedModel":
        return LoopedModel(ModelConfig(**asdict(self.config)),
                           {k: v.copy() for k, v in self.weights.items()})

    def with_loops(self, T: int) -> "LoopedModel":
        """Same weights, different loop count (weights are shared, not copied)."""
        cfg = ModelConfig(**{**asdict(self.config), "T": T})
        cfg.validate()
        return LoopedModel(cfg, self.weights)


def init_model(config: ModelConfig, seed: int) -> LoopedModel:
    config.validate()
    rng = np.random.default_rng(seed)
    std = config.init_std if config.init_std is not None else 0.02 / np.sqrt(config.L)
    d, V = config.d, config.vocab
    w: dict[str, np.ndarray] = {
        "embed": rng.normal(0.0, config.embed_std, (V, d)),
        "proj": rng.normal(0.0, 1.0 / np.sqrt(d), (V, d)),
    }
    if config.mode == "block":
        w["final_norm"] = np.ones(d)
    for layer in range(config.L):
        if config.mode == "linear":
            w[f"{layer}.linear"] = rng.normal(0.0, std, (d, d))
            continue
        w[f"{layer}.attn_norm"] = np.ones(d)
        w[f"{layer}.qkv"] = rng.normal(0.0, std, (3 * d, d))
        w[f"{layer}.o_proj"] = rng.normal(0.0, std, (d, d))
        w[f"{layer}.mlp_norm"] = np.ones(d)
        w[f"{layer}.up_gate"] = rng.normal(0.0, std, (2 * config.d_ff, d))
        w[f"{layer}.down"] = rng.normal(0.0, std, (d, config.d_ff))
    return LoopedModel(config, w)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

class LinearFn(Protocol):
    def __call__(self, layer: int, group: str, t: int, x: Node, weight: Node) -> Node: ...


def fp_linear(layer: int, group: str, t: int, x: Node, weight: Node) -> Node:
    return ad.matmul(x, ad.swapaxes(weight, -1, -2))


TransitionFn = Callable[[int, Node], Node]


@dataclass
class Trajectory:
    """Hidden states ``states[t][l]`` for t in [0, T), l in [0, L] and logits.

    ``states[t][L]`` and ``states[t + 1][0]`` are the same object unless a
    transition map (adapter) sits between loops.
    """

    states: list[list[Node]]
    logits: Node

    @property
    def T(self) -> int:
        return len(self.states)

    @property
    def L(self) -> int:
        return len(self.states[0]) - 1

    @property
    def loop_inputs(self) -> list[Node]:
        return [s[0] for s in self.states]

    @property
    def final(self) -> Node:
        return self.states[-1][-1]

    def values(self) -> list[list[np.ndarray]]:
        return [[h.value for h in row] for row in self.states]


def _params(model: LoopedModel, params: dict[str, Node] | None) -> dict[str, Node]:
    if params is None:
        params = {}
    return {k: params[k] if k in params else Node(v, check=False)
            for k, v in model.weights.items()}


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9), k=1)


def layer_forward(model: LoopedModel, p: dict[str, Node], layer: int, h: Node, t: int,
                  linear: LinearFn = fp_linear) -> Node:
    """Apply shared layer ``layer`` to ``h`` at loop ``t``."""
    cfg = model.config
    if cfg.mode == "linear":
        return linear(layer, "linear", t, h, p[f"{layer}.linear"])
    d, H = cfg.d, cfg.n_heads
    dh = d // H
    lead = h.shape[:-1]
    n = h.shape[-2]
    x = ad.rms_norm(h, cfg.norm_eps) * p[f"{layer}.attn_norm"]
    qkv = linear(layer, "qkv", t, x, p[f"{layer}.qkv"])
    qkv = ad.reshape(qkv, lead + (3, H, dh))
    nd = len(lead)
    # (..., n, 3, H, dh) -> (3, ..., H, n, dh)
    perm = (nd + 0,) + tuple(range(nd - 1)) + (nd + 1, nd - 1, nd + 2)
    qkv = ad.transpose(qkv, perm)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)) + _causal_mask(n)
    att = ad.matmul(ad.softmax(scores, axis=-1), v)  # (..., H, n, dh)
    back = tuple(range(nd - 1)) + (nd, nd - 1, nd + 1)
    att = ad.reshape(ad.transpose(att, back), lead + (d,))
    h = h + linear(layer, "o_proj", t, att, p[f"{layer}.o_proj"])
    x = ad.rms_norm(h, cfg.norm_eps) * p[f"{layer}.mlp_norm"]
    ug = linear(layer, "up_gate", t, x, p[f"{layer}.up_gate"])
    gate, up = ug[..., : cfg.d_ff], ug[..., cfg.d_ff:]
    m = ad.silu(gate) * up
    return h + linear(layer, "down", t, m, p[f"{layer}.down"])


def embed(model: LoopedModel, tokens: np.ndarray, p: dict[str, Node] | None = None) -> Node:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab):
        raise ContractError("token id outside vocabulary")
    table = p["embed"] if p is not None else Node(model.weights["embed"], check=False)
    return ad.take(table, tokens, axis=0)


def project(model: LoopedModel, h: Node, p: dict[str, Node]) -> Node:
    if model.config.mode == "block":
        h = ad.rms_norm(h, model.config.norm_eps) * p["final_norm"]
    return ad.matmul(h, ad.swapaxes(p["proj"], -1, -2))


def loop_function(model: LoopedModel, h, t: int = 0, linear: LinearFn = fp_linear,
                  params: dict[str, Node] | None = None) -> Node:
    """One full pass through the shared stack, F = f_L o ... o f_1."""
    h = ad.lift(h)
    if h.ndim < 2 or h.shape[-1] != model.d or h.shape[-2] == 0:
        raise ContractError(f"loop_function expects (..., n, {model.d}), got {h.shape}")
    p = _params(model, params)
    for layer in range(model.L):
        h = layer_forward(model, p, layer, h, t, linear)
    return h


def forward(model: LoopedModel, tokens: np.ndarray, record: bool = True,
            params: dict[str, Node] | None = None, linear: LinearFn = fp_linear,
            transition: TransitionFn | None = None, T: int | None = None,
            h0: Node | None = None) -> Trajectory:
    """Run the loop recurrence and return the trajectory.

    With ``record=False`` only loop boundaries are kept (intermediate layer
    states are dropped from the returned trajectory's rows).
    """
    T = model.T if T is None else T
    p = _params(model, params)
    h = embed(model, tokens, p) if h0 is None else ad.lift(h0)
    states: list[list[Node]] = []
    for t in range(T):
        row = [h]
        for layer in range(model.L):
            try:
                h = layer_forward(model, p, layer, h, t, linear)
            except NumericError as exc:
                raise NumericError(f"non-finite state at loop {t}, layer {layer + 1}: {exc}") from exc
            if record or layer == model.L - 1:
                row.append(h)
        states.append(row)
        if transition is not None and t < T - 1:
            h = transition(t, h)
    logits = project(model, states[-1][-1], p)
    return Trajectory(states, logits)


# ---------------------------------------------------------------------------
# optional pretraining on synthetic streams
# ---------------------------------------------------------------------------

def next_token_loss(model: LoopedModel, tokens: np.ndarray,
                    params: dict[str, Node] | None = None) -> Node:
    traj = forward(model, tokens[:, :-1], record=False, params=params)
    logp = ad.log_softmax(traj.logits, axis=-1)
    tgt = tokens[:, 1:]
    B, n = tgt.shape
    picked = logp[np.arange(B)[:, None], np.arange(n)[None, :], tgt]
    return -ad.mean(picked)


def pretrain(model: LoopedModel, data: np.ndarray, steps: int, batch_size: int = 16,
             lr: float = 3e-3, seed: int = 0, clip: float = 1.0) -> list[float]:
    """A few hundred Adam steps of next-token loss. Mutates ``model`` in place."""
    from .optim import Adam, clip_grad_norm, cosine_factor

    rng = np.random.default_rng(seed)
    opt = Adam({k: lr for k in model.weights})
    curve: list[float] = []
    for step in range(steps):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        nodes = {k: Node(v, requires_grad=True, check=False) for k, v in model.weights.items()}
        loss = next_token_loss(model, data[idx], nodes)
        loss.backward()
        grads = {k: n.grad if n.grad is not None else np.zeros_like(n.value)
                 for k, n in nodes.items()}
        clip_grad_norm(grads, clip)
        opt.step(model.weights, grads, cosine_factor(step, steps, floor=0.1))
        curve.append(loss.item())
    return curve
