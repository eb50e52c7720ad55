"""Simulated symmetric quantizers, invertible transforms and quantized execution.

Quantized values are kept as float64 multiples of their scale; no integer
kernels are involved. ``bits == 0`` disables a quantizer (pass-through).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node
from .looplm import ConfigError, LoopedModel, forward

WEIGHT_SCALE_FLOOR = 1e-12
MAX_CONDITION = 1e8
TRAINABLE_MODES = ("affine", "kronecker")


class ParameterError(ValueError):
    pass


@dataclass
class QuantSpec:
    bits_w: int = 4
    bits_a: int = 4
    group_size: int = 32
    act_percentile: float | None = None  # None -> absolute max

    def __post_init__(self):
        for b in (self.bits_w, self.bits_a):
            if b != 0 and not 2 <= b <= 8:
                raise ConfigError(f"bits must be 0 (disabled) or in [2, 8], got {b}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")

    @staticmethod
    def qrange(bits: int) -> tuple[int, int]:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1

    @property
    def qmin_a(self) -> int:
        return self.qrange(self.bits_a)[0]

    @property
    def qmax_a(self) -> int:
        return self.qrange(self.bits_a)[1]

    @property
    def qmax_w(self) -> int:
        return self.qrange(self.bits_w)[1]

    def check_dim(self, d: int) -> None:
        if d % self.group_size:
            raise ConfigError(f"dimension {d} not divisible by group_size {self.group_size}")

    def num_groups(self, d: int) -> int:
        self.check_dim(d)
        return d // self.group_size


# ---------------------------------------------------------------------------
# quantizers
# ---------------------------------------------------------------------------

def _expand_scale(c: Node, d: int, group_size: int) -> Node:
    if c.shape == () or c.shape == (1,) and d != 1:
        return c
    if c.shape[-1] * group_size != d:
        raise ParameterError(f"{c.shape[-1]} scales do not cover {d} features")
    return ad.take(c, np.arange(d) // group_size, axis=-1)


def quantize_act(x, c, spec: QuantSpec | None = None, bits: int | None = None,
                 group_size: int | None = None) -> Node:
    """c * clip(round(x / c), q_min, q_max) with per-group scales ``c``.

    ``c`` is a scalar or a vector with one entry per group of ``group_size``
    consecutive features. Gradients follow the straight-through rule.
    """
    x, c = ad.lift(x), ad.lift(c)
    bits = spec.bits_a if bits is None else bits
    if bits == 0:
        return x
    gs = (spec.group_size if spec is not None else x.shape[-1]) if group_size is None else group_size
    if np.any(c.value <= 0):
        raise ParameterError("activation scale must be positive")
    lo, hi = QuantSpec.qrange(bits)
    cf = _expand_scale(c, x.shape[-1], gs)
    return cf * ad.round_ste(x / cf, lo, hi)


def weight_scales(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Per (output row, input group) symmetric scale max|w| / q_max."""
    out, d_in = w.shape
    spec.check_dim(d_in)
    g = np.abs(w).reshape(out, d_in // spec.group_size, spec.group_size).max(axis=-1)
    return np.maximum(g / spec.qmax_w, WEIGHT_SCALE_FLOOR)


def quantize_weight_node(w, spec: QuantSpec) -> Node:
    w = ad.lift(w)
    if spec.bits_w == 0:
        return w
    s = np.repeat(weight_scales(w.value, spec), spec.group_size, axis=1)
    lo, hi = QuantSpec.qrange(spec.bits_w)
    return ad.round_ste(w / s, lo, hi) * s


def quantize_weight(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    if not np.isfinite(w).all():
        raise ParameterError("weight contains non-finite values")
    return quantize_weight_node(np.asarray(w, dtype=float), spec).value


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

@dataclass
class TransformParam:
    """Invertible pre-quantization transform P (full matrix or Kronecker pair)."""

    mode: str
    factors: list[np.ndarray]

    @classmethod
    def identity(cls, d: int) -> "TransformParam":
        return cls("identity", [np.eye(d)])

    @classmethod
    def affine(cls, d: int) -> "TransformParam":
        return cls("affine", [np.eye(d)])

    @classmethod
    def kronecker(cls, da: int, db: int) -> "TransformParam":
        return cls("kronecker", [np.eye(da), np.eye(db)])

    @classmethod
    def orthogonal(cls, d: int, seed: int) -> "TransformParam":
        return cls("orthogonal", [ad.random_orthogonal(d, seed)])

    @classmethod
    def diagonal(cls, diag: np.ndarray) -> "TransformParam":
        return cls("diagonal", [np.diag(np.asarray(diag, dtype=float))])

    @property
    def trainable(self) -> bool:
        return self.mode in TRAINABLE_MODES

    @property
    def dim(self) -> int:
        return int(np.prod([f.shape[0] for f in self.factors]))

    def matrix(self) -> np.ndarray:
        if self.mode == "kronecker":
            return np.kron(self.factors[0], self.factors[1])
        return self.factors[0]

    def node(self, factors: list[Node]) -> Node:
        if self.mode == "kronecker":
            return ad.kron(factors[0], factors[1])
        return factors[0]

    def num_parameters(self) -> int:
        return int(sum(f.size for f in self.factors))

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.matrix()))

    def check_invertible(self) -> float:
        cond = self.condition_number()
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise ParameterError(f"transform condition number {cond:.3g} exceeds {MAX_CONDITION:g}")
        return cond

    def copy(self) -> "TransformParam":
        return TransformParam(self.mode, [f.copy() for f in self.factors])


def make_transform(mode: str, d: int, seed: int = 0, kron_dims: tuple[int, int] | None = None
                   ) -> TransformParam:
    if mode == "identity":
        return TransformParam.identity(d)
    if mode == "affine":
        return TransformParam.affine(d)
    if mode == "orthogonal":
        return TransformParam.orthogonal(d, seed)
    if mode == "kronecker":
        da, db = kron_dims if kron_dims is not None else kron_split(d)
        if da * db != d:
            raise ConfigError(f"Kronecker factors {da}x{db} do not multiply to {d}")
        return TransformParam.kronecker(da, db)
    raise ConfigError(f"unknown transform mode {mode!r}")


def kron_split(d: int) -> tuple[int, int]:
    """Most balanced factorization d = a * b with a <= b."""
    a = int(np.floor(np.sqrt(d)))
    while d % a:
        a -= 1
    return a, d // a


# ---------------------------------------------------------------------------
# scheme
# ---------------------------------------------------------------------------

@dataclass
class GroupQuant:
    layer: int
    group: str
    d_in: int
    transform: TransformParam
    act_scale: np.ndarray  # (G,) shared or (T, G) loop-dependent
    loop_transforms: list[TransformParam] | None = None

    @property
    def key(self) -> str:
        return f"{self.layer}.{self.group}"

    @property
    def las(self) -> bool:
        return self.act_scale.ndim == 2

    @property
    def untied(self) -> bool:
        return self.loop_transforms is not None


@dataclass
class QuantScheme:
    """Per-group transforms and activation scales for one looped model.

    Parameter names used by calibration: ``"{key}.c"`` (scales),
    ``"{key}.P{i}"`` (shared transform factor i) and ``"{key}.t{t}.P{i}"``
    (loop-dependent factor at loop t).
    """

    spec: QuantSpec
    T: int
    groups: dict[str, GroupQuant]
    extrapolate: bool = False
    _wcache: dict = field(default_factory=dict, repr=False, compare=False)

    def invalidate(self) -> None:
        self._wcache.clear()

    def copy(self) -> "QuantScheme":
        return QuantScheme(copy.deepcopy(self.spec), self.T,
                           {k: copy.deepcopy(g) for k, g in self.groups.items()},
                           self.extrapolate)

    # -- loop index handling -------------------------------------------------
    def loop_index(self, t: int) -> int:
        if 0 <= t < self.T:
            return t
        if t >= self.T and self.extrapolate:
            return self.T - 1
        raise ContractError(f"loop index {t} outside [0, {self.T})")

    def transform_at(self, key: str, t: int) -> TransformParam:
        g = self.groups[key]
        if g.untied:
            return g.loop_transforms[self.loop_index(t)]
        return g.transform

    def scale_at(self, key: str, t: int) -> np.ndarray:
        g = self.groups[key]
        return g.act_scale[self.loop_index(t)] if g.las else g.act_scale

    # -- parameters ------------------------------------------------------------
    def parameters(self, trainable_only: bool = True) -> dict[str, np.ndarray]:
        """Live references to the scheme's optimizable arrays."""
        out: dict[str, np.ndarray] = {}
        for key, g in self.groups.items():
            out[f"{key}.c"] = g.act_scale
            if g.transform.trainable or not trainable_only:
                for i, f in enumerate(g.transform.factors):
                    out[f"{key}.P{i}"] = f
            if g.untied:
                for t, tp in enumerate(g.loop_transforms):
                    if tp.trainable or not trainable_only:
                        for i, f in enumerate(tp.factors):
                            out[f"{key}.t{t}.P{i}"] = f
        return out

    @staticmethod
    def param_kind(name: str) -> str:
        return "scale" if name.endswith(".c") else "transform"

    def count_parameters(self) -> dict[str, int]:
        shared_t = loopdep_t = shared_c = loopdep_c = 0
        for g in self.groups.values():
            shared_t += g.transform.num_parameters()
            if g.untied:
                loopdep_t += sum(tp.num_parameters() for tp in g.loop_transforms)
            if g.las:
                loopdep_c += g.act_scale.size
            else:
                shared_c += g.act_scale.size
        return {"shared_transform": shared_t, "loop_transform": loopdep_t,
                "shared_scale": shared_c, "loop_scale": loopdep_c}

    def check_invertible(self) -> dict[str, float]:
        conds = {}
        for key, g in self.groups.items():
            conds[key] = g.transform.check_invertible()
            for t, tp in enumerate(g.loop_transforms or []):
                conds[f"{key}.t{t}"] = tp.check_invertible()
        return conds


def new_scheme(model: LoopedModel, spec: QuantSpec, transform: str = "identity",
               seed: int = 0, kron_dims: tuple[int, int] | None = None) -> QuantScheme:
    cfg = model.config
    groups: dict[str, GroupQuant] = {}
    for layer in range(cfg.L):
        for gi, group in enumerate(cfg.groups):
            d_in = cfg.group_in_dim(group)
            G = spec.num_groups(d_in)
            tp = make_transform(transform, d_in, seed=seed * 1000 + layer * 10 + gi,
                                kron_dims=kron_dims if d_in == cfg.d else None)
            groups[f"{layer}.{group}"] = GroupQuant(layer, group, d_in, tp, np.ones(G))
    if cfg.mode == "block":
        spec.check_dim(cfg.d)
    return QuantScheme(spec, cfg.T, groups)


class QuantizedLinear:
    """Linear executor implementing Q_a(x P; c) Q_w(W P^-T)^T for every group.

    ``nodes`` supplies autodiff leaves for (a subset of) scheme parameters;
    missing parameters are treated as constants. Passing loop-specific names
    (``"{key}.t{t}.P{i}"``) for a shared group creates tied per-loop copies.
    ``observer(key, t, x_transformed)`` sees inputs before quantization.
    """

    def __init__(self, scheme: QuantScheme, nodes: dict[str, Node] | None = None,
                 quantize: bool = True, observer=None):
        self.scheme = scheme
        self.nodes = nodes or {}
        self.quantize = quantize
        self.observer = observer

    def _transform(self, key: str, t: int) -> tuple[Node | None, bool, int]:
        """Return (P node or None for a fixed identity, has live leaves, cache tag)."""
        scheme = self.scheme
        tp = scheme.transform_at(key, t)
        te = scheme.loop_index(t)
        loop_names = [f"{key}.t{te}.P{i}" for i in range(len(tp.factors))]
        if scheme.groups[key].untied or any(n in self.nodes for n in loop_names):
            names, tag = loop_names, te
        else:
            names, tag = [f"{key}.P{i}" for i in range(len(tp.factors))], -1
        live = any(n in self.nodes for n in names)
        if tp.mode == "identity" and not live:
            return None, False, tag
        factors = [self.nodes[n] if n in self.nodes else Node(f, check=False)
                   for n, f in zip(names, tp.factors)]
        return tp.node(factors), live, tag

    def __call__(self, layer: int, group: str, t: int, x: Node, weight: Node) -> Node:
        key = f"{layer}.{group}"
        scheme, spec = self.scheme, self.scheme.spec
        P, live, tag = self._transform(key, t)
        xt = x if P is None else ad.matmul(x, P)
        if self.observer is not None:
            self.observer(key, t, xt.value)
        if self.quantize and spec.bits_a:
            te = scheme.loop_index(t)
            cname = f"{key}.c"
            c = self.nodes.get(cname)
            if c is None:
                c = Node(scheme.scale_at(key, t), check=False)
            elif scheme.groups[key].las:
                c = c[te]
            xt = quantize_act(xt, c, spec)
        if not self.quantize:
            w = weight if P is None else ad.matmul(weight, ad.swapaxes(ad.inv(P), -1, -2))
            return ad.matmul(xt, ad.swapaxes(w, -1, -2))
        if live or weight.requires_grad:
            w = weight if P is None else ad.matmul(weight, ad.swapaxes(ad.inv(P), -1, -2))
            wq = quantize_weight_node(w, spec)
        else:
            ck = (key, tag, id(weight.value))
            wq = scheme._wcache.get(ck)
            if wq is None:
                wv = weight.value if P is None else weight.value @ np.linalg.inv(P.value).T
                wq = Node(quantize_weight(wv, spec), check=False)
                scheme._wcache[ck] = wq
        return ad.matmul(xt, ad.swapaxes(wq, -1, -2))


def quantized_layer_forward(model: LoopedModel, scheme: QuantScheme, h, t: int, layer: int,
                            nodes: dict[str, Node] | None = None) -> Node:
    """One shared layer under the scheme at loop ``t``."""
    from .looplm import _params, layer_forward

    scheme.loop_index(t)
    return layer_forward(model, _params(model, None), layer, ad.lift(h), t,
                         QuantizedLinear(scheme, nodes))


# ---------------------------------------------------------------------------
# static scale initialization
# ---------------------------------------------------------------------------

def collect_activation_stats(model: LoopedModel, scheme: QuantScheme, tokens: np.ndarray,
                             percentile: float | None = None, batch_size: int = 64
                             ) -> dict[str, np.ndarray]:
    """Per-group, per-loop magnitude of transformed full-precision activations.

    Returns ``{key: array (T, G)}`` holding abs-max (or the given percentile
    of |x|) over all calibration tokens.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or len(tokens) == 0:
        raise ContractError("need at least one calibration sequence")
    gs = scheme.spec.group_size
    T = scheme.T
    buf: dict[tuple[str, int], list[np.ndarray]] = {}

    def observer(key, t, xv):
        d = xv.shape[-1]
        grouped = np.abs(xv).reshape(-1, d // gs, gs).transpose(1, 0, 2).reshape(d // gs, -1)
        if percentile is None:
            val = grouped.max(axis=1, keepdims=True)
        else:
            val = grouped
        buf.setdefault((key, t), []).append(val)

    ex = QuantizedLinear(scheme, quantize=False, observer=observer)
    for i in range(0, len(tokens), batch_size):
        forward(model, tokens[i:i + batch_size], record=False, linear=ex, T=T)
    stats: dict[str, np.ndarray] = {}
    for key in scheme.groups:
        rows = []
        for t in range(T):
            allv = np.concatenate(buf[(key, t)], axis=1)
            rows.append(allv.max(axis=1) if percentile is None
                        else np.percentile(allv, percentile, axis=1))
        stats[key] = np.stack(rows)
    return stats


def scales_from_stats(scheme: QuantScheme, stats: dict[str, np.ndarray]) -> QuantScheme:
    """Shared groups get max over loops / q_max; loop-dependent groups per-loop."""
    out = scheme.copy()
    qmax = scheme.spec.qmax_a if scheme.spec.bits_a else 1
    for key, g in out.groups.items():
        s = np.maximum(stats[key], WEIGHT_SCALE_FLOOR) / qmax
        g.act_scale = s.copy() if g.las else s.max(axis=0)
    out.invalidate()
    return out


def calibrate_static_scales(scheme: QuantScheme, model: LoopedModel, tokens: np.ndarray,
                            percentile: float | None = None) -> QuantScheme:
    if percentile is None:
        percentile = scheme.spec.act_percentile
    stats = collect_activation_stats(model, scheme, tokens, percentile)
    return scales_from_stats(scheme, stats)


def collect_channel_maxima(model: LoopedModel, scheme: QuantScheme, tokens: np.ndarray,
                           batch_size: int = 64) -> dict[str, np.ndarray]:
    """Per-feature max |x| of each group's (transformed) input over all loops."""
    out: dict[str, np.ndarray] = {}

    def observer(key, t, xv):
        m = np.abs(xv).reshape(-1, xv.shape[-1]).max(axis=0)
        out[key] = m if key not in out else np.maximum(out[key], m)

    ex = QuantizedLinear(scheme, quantize=False, observer=observer)
    for i in range(0, len(tokens), batch_size):
        forward(model, tokens[i:i + batch_size], record=False, linear=ex, T=scheme.T)
    return out
