"""Sharing-gap analysis and progressive selection of loop-dependent transforms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import ContractError, Node
from ..looplm import BLOCK_GROUPS, LINEAR_GROUPS
from ..quant import QuantScheme, TransformParam

GROUP_ORDER = {g: i for i, g in enumerate(BLOCK_GROUPS + LINEAR_GROUPS)}


@dataclass
class SharingGapReport:
    """Per-group score S with the per-loop gradients (phi) and Fisher (psi) behind it."""

    scores: dict[str, float]
    phi: dict[str, np.ndarray] = field(repr=False)  # (T, P) per group
    psi: dict[str, np.ndarray] = field(repr=False)  # (P,) per group
    eps: float = 1e-8

    def ranking(self, exclude=()) -> list[str]:
        """Keys by descending score; ties by layer index then group name."""
        keys = [k for k in self.scores if k not in set(exclude)]
        return sorted(keys, key=lambda k: (-self.scores[k], int(k.split(".")[0]),
                                           k.split(".", 1)[1]))

    def to_dict(self) -> dict:
        return {"eps": self.eps, "scores": dict(self.scores),
                "ranking": self.ranking(),
                "phi_norm": {k: np.linalg.norm(v, axis=1).tolist() for k, v in self.phi.items()},
                "psi_mean": {k: float(v.mean()) for k, v in self.psi.items()}}


def sharing_gap_from_gradients(phi: np.ndarray, psi: np.ndarray, eps: float = 1e-8) -> float:
    """S = sum_j (mean_t phi^2 - (mean_t phi)^2) / (psi_j + eps).

    The variance is taken around the loop mean (two-pass) so identical loop
    gradients give exactly zero even when psi + eps is tiny.
    """
    var = phi.var(axis=0)
    return float(np.sum(var / (psi + eps)))


def tied_copy_nodes(scheme: QuantScheme, keys) -> dict[str, Node]:
    """T tied copies of each shared transform, as gradient leaves."""
    nodes = {}
    for key in keys:
        g = scheme.groups[key]
        if g.untied:
            raise ContractError(f"group {key} is already loop-dependent")
        for t in range(scheme.T):
            for i, f in enumerate(g.transform.factors):
                nodes[f"{key}.t{t}.P{i}"] = Node(f, requires_grad=True, check=False)
    return nodes


def sharing_gap_scores(problem, scheme: QuantScheme, adapters, batches, mu=None,
                       keys=None, eps: float = 1e-8) -> SharingGapReport:
    """Curvature-normalized variance across loops of the loss gradient w.r.t. P.

    ``problem`` is a :class:`loopqlab.calibrate.CalibProblem`; ``batches`` an
    iterable of index arrays. phi is the gradient of the mean loss with respect
    to loop t's tied copy; psi the mean over batches of the squared total
    gradient (empirical Fisher).
    """
    batches = list(batches)
    if not batches:
        raise ContractError("sharing-gap scoring needs at least one calibration batch")
    if keys is None:
        keys = [k for k, g in scheme.groups.items() if not g.untied]
    T = scheme.T
    phi = {k: None for k in keys}
    psi = {k: None for k in keys}
    for idx in batches:
        nodes = tied_copy_nodes(scheme, keys)
        problem.loss(scheme, adapters, idx, nodes, mu).total.backward()
        for key in keys:
            nf = len(scheme.groups[key].transform.factors)
            per_loop = np.stack([
                np.concatenate([_grad(nodes[f"{key}.t{t}.P{i}"]).ravel() for i in range(nf)])
                for t in range(T)])
            tot = per_loop.sum(axis=0)
            phi[key] = per_loop if phi[key] is None else phi[key] + per_loop
            psi[key] = tot * tot if psi[key] is None else psi[key] + tot * tot
    nb = len(batches)
    phi = {k: v / nb for k, v in phi.items()}
    psi = {k: v / nb for k, v in psi.items()}
    scores = {k: sharing_gap_from_gradients(phi[k], psi[k], eps) for k in keys}
    return SharingGapReport(scores, phi, psi, eps)


def _grad(n: Node) -> np.ndarray:
    return n.grad if n.grad is not None else np.zeros_like(n.value)


def untie(scheme: QuantScheme, keys) -> QuantScheme:
    """Give each selected group per-loop transforms and scales, initialized from the shared ones.

    Existing loop-dependent scales are preserved. Copies of a fixed transform
    become trainable (affine / Kronecker) so they can diverge during calibration.
    """
    out = scheme.copy()
    for key in keys:
        g = out.groups[key]
        if g.untied:
            continue
        mode = "kronecker" if g.transform.mode == "kronecker" else "affine"
        g.loop_transforms = [TransformParam(mode, [f.copy() for f in g.transform.factors])
                             for _ in range(out.T)]
        if not g.las:
            g.act_scale = np.tile(g.act_scale, (out.T, 1))
    out.invalidate()
    return out


def select_loop_dependent(report: SharingGapReport, budget: int, rounds: int = 1,
                          rescore=None, already=()) -> list[str]:
    """Progressively pick ``budget`` groups by sharing-gap score.

    Each round takes the top unselected groups; between rounds ``rescore``
    (called with the current selection) may adapt the scheme and return a
    fresh report.
    """
    selected = list(already)
    available = len(report.scores)
    if budget < 0 or budget > available:
        raise ContractError(f"budget {budget} exceeds {available} candidate groups")
    rounds = max(1, min(rounds, budget)) if budget else 1
    picked: list[str] = []
    for r in range(rounds):
        remaining = budget - len(picked)
        if remaining <= 0:
            break
        k = math.ceil(remaining / (rounds - r))
        new = report.ranking(exclude=selected + picked)[:k]
        picked.extend(new)
        if rescore is not None and r < rounds - 1 and len(picked) < budget:
            report = rescore(selected + picked)
    return picked


def transform_fraction(scheme: QuantScheme) -> float:
    """Fraction of transform parameters that are loop-dependent."""
    c = scheme.count_parameters()
    total = c["shared_transform"] + c["loop_transform"]
    return c["loop_transform"] / total if total else 0.0
