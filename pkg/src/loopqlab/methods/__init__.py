"""Loop-aware quantization components and static baselines.

Submodules: ``cta`` (cross-loop transition adapter), ``las`` (loop-aware
activation scales), ``slt`` (sharing-gap scoring and selective untying) and
``baselines`` (symmetric, smooth scaling, rotation, learned affine).
"""
