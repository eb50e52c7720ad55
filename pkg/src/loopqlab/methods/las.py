"""Loop-aware activation scaling: one activation scale array per loop."""
from __future__ import annotations

import numpy as np

from ..quant import WEIGHT_SCALE_FLOOR, QuantScheme


def enable_las(scheme: QuantScheme, stats: dict[str, np.ndarray] | None = None,
               keys=None) -> QuantScheme:
    """Replace shared scales c_l by loop-dependent c_{t,l}.

    ``stats`` holds per-loop magnitudes ``(T, G)`` as returned by
    :func:`loopqlab.quant.collect_activation_stats`; without stats the shared
    scale is tiled over loops, which leaves the forward function unchanged.
    """
    out = scheme.copy()
    qmax = scheme.spec.qmax_a if scheme.spec.bits_a else 1
    for key, g in out.groups.items():
        if keys is not None and key not in keys:
            continue
        if stats is None:
            if not g.las:
                g.act_scale = np.tile(g.act_scale, (out.T, 1))
        else:
            g.act_scale = np.maximum(stats[key], WEIGHT_SCALE_FLOOR) / qmax
    out.invalidate()
    return out


def las_added_parameters(before: QuantScheme, after: QuantScheme) -> int:
    """Number of extra scale scalars introduced, O(T L) in total."""
    def total(s: QuantScheme) -> int:
        c = s.count_parameters()
        return c["loop_scale"] + c["shared_scale"]
    return total(after) - total(before)
