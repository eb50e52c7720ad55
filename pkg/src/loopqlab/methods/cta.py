"""Cross-loop transition adapter applied to the quantized state between loops."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import ContractError, Node

RMS_EPS = 1e-6
PREFIX = "cta."


@dataclass
class TransitionAdapterParams:
    """Per-transition a_t, b_t, eta_t and shared low-rank U, V.

    Row t of ``a``/``b``/``eta`` belongs to the transition from loop t to t+1.
    """

    a: np.ndarray    # (T-1, d), init 1
    b: np.ndarray    # (T-1, d), init 0
    eta: np.ndarray  # (T-1, r), init 0
    U: np.ndarray    # (d, r)
    V: np.ndarray    # (d, r)
    eps: float = RMS_EPS
    extrapolate: bool = False

    @classmethod
    def init(cls, T: int, d: int, rank: int = 8, seed: int = 0,
             uv_std: float = 1e-3) -> "TransitionAdapterParams":
        if T < 1:
            raise ContractError("T must be >= 1")
        rng = np.random.default_rng(seed)
        n = max(T - 1, 0)
        return cls(np.ones((n, d)), np.zeros((n, d)), np.zeros((n, rank)),
                   rng.normal(0.0, uv_std, (d, rank)), rng.normal(0.0, uv_std, (d, rank)))

    @property
    def num_transitions(self) -> int:
        return self.a.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {PREFIX + k: getattr(self, k) for k in ("a", "b", "eta", "U", "V")}

    def num_parameters(self) -> dict[str, int]:
        return {"loop_dependent": int(self.a.size + self.b.size + self.eta.size),
                "shared": int(self.U.size + self.V.size)}

    def copy(self) -> "TransitionAdapterParams":
        return TransitionAdapterParams(self.a.copy(), self.b.copy(), self.eta.copy(),
                                       self.U.copy(), self.V.copy(), self.eps, self.extrapolate)

    def is_identity(self) -> bool:
        return bool(np.all(self.a == 1) and np.all(self.b == 0) and np.all(self.eta == 0))


def apply_cta(params: TransitionAdapterParams, h, t: int,
              nodes: dict[str, Node] | None = None) -> Node:
    """H + (a_t - 1) * RMSNorm(H) + b_t + ((RMSNorm(H) V) * eta_t) U^T."""
    n_tr = params.num_transitions
    if t < 0 or (t >= n_tr and not (params.extrapolate and n_tr > 0)):
        raise ContractError(f"no transition adapter after loop {t} ({n_tr} transitions)")
    te = min(t, n_tr - 1)
    nodes = nodes or {}

    def get(name):
        full = PREFIX + name
        return nodes[full] if full in nodes else Node(getattr(params, name), check=False)

    h = ad.lift(h)
    a, b, eta = get("a")[te], get("b")[te], get("eta")[te]
    normed = ad.rms_norm(h, params.eps)
    low_rank = ad.matmul(ad.matmul(normed, get("V")) * eta, ad.swapaxes(get("U"), -1, -2))
    return h + (a - 1.0) * normed + b + low_rank


def cta_transition(params: TransitionAdapterParams | None, nodes: dict[str, Node] | None = None):
    """Transition callable for :func:`loopqlab.looplm.forward`, or None."""
    if params is None:
        return None
    return lambda t, h: apply_cta(params, h, t, nodes)
