"""Static PTQ baselines: symmetric RTN, smooth scaling, rotation, learned affine."""
from __future__ import annotations

from enum import Enum

import numpy as np

from ..looplm import LoopedModel
from ..quant import (QuantScheme, QuantSpec, TransformParam, calibrate_static_scales,
                     collect_channel_maxima, new_scheme)

SMOOTH_ALPHA = 0.5


class BaselineKind(str, Enum):
    symmetric = "symmetric"
    smooth_scale = "smooth_scale"
    rotation = "rotation"
    learned_affine = "learned_affine"


def smooth_factors(act_max: np.ndarray, weight_max: np.ndarray, alpha: float = SMOOTH_ALPHA,
                   floor: float = 1e-5) -> np.ndarray:
    """s_j = max|x_j|^alpha / max|w_j|^(1 - alpha)."""
    a = np.maximum(np.asarray(act_max, dtype=float), floor)
    w = np.maximum(np.asarray(weight_max, dtype=float), floor)
    return a ** alpha / w ** (1.0 - alpha)


def group_weight_column_max(model: LoopedModel, key: str) -> np.ndarray:
    return np.abs(model.weights[key]).max(axis=0)


def apply_baseline(kind, model: LoopedModel, spec: QuantSpec, calib: np.ndarray,
                   seed: int = 0, calibration=None, kron_dims=None):
    """Build the baseline scheme for ``kind``.

    ``calibration`` is an optional callable ``scheme -> scheme`` used by the
    learned-affine arm to optimize its shared transforms and scales; without it
    the learned-affine scheme is returned at its identity initialization.
    """
    kind = BaselineKind(kind)
    if kind == BaselineKind.symmetric:
        scheme = new_scheme(model, spec, "identity")
    elif kind == BaselineKind.rotation:
        scheme = new_scheme(model, spec, "orthogonal", seed=seed)
    elif kind == BaselineKind.smooth_scale:
        scheme = new_scheme(model, spec, "identity")
        amax = collect_channel_maxima(model, scheme, calib)
        for key, g in scheme.groups.items():
            s = smooth_factors(amax[key], group_weight_column_max(model, key))
            g.transform = TransformParam.diagonal(1.0 / s)
    else:
        scheme = new_scheme(model, spec, "kronecker" if kron_dims else "affine",
                            kron_dims=kron_dims)
    scheme = calibrate_static_scales(scheme, model, calib)
    if kind == BaselineKind.learned_affine and calibration is not None:
        scheme = calibration(scheme)
    return scheme
