"""Shared table of random evaluation points for every catalog op.

Used by both the unit gradient checks and the acceptance suite. Points
avoid the relu kink by pushing inputs away from zero.
"""

import numpy as np


def _away_from_zero(x, margin=0.1):
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def op_point(kind: str, rng: np.random.Generator):
    """Return (inputs, attrs) suitable for finite_diff_check(kind, ...)."""
    n = rng.standard_normal
    if kind == "add":
        return [n((3, 4)), n((3, 4))], {}
    if kind == "sub":
        return [n((3, 4)), n((3, 4))], {}
    if kind == "elementwise-mul":
        return [n((3, 4)), n((3, 4))], {}
    if kind == "scalar-mul":
        return [n((3, 4))], {"value": float(rng.uniform(0.5, 2.0))}
    if kind == "matmul":
        return [n((4, 4)), n((4, 4))], {}
    if kind == "conv2d":
        return [n((1, 3, 6, 6)), n((2, 3, 3, 3))], {"stride": 1, "padding": 1}
    if kind == "upsample-nearest2":
        return [n((1, 2, 3, 3))], {}
    if kind == "reshape":
        return [n((3, 4))], {"shape": (2, 6)}
    if kind == "permute":
        return [n((2, 3, 4))], {"axes": (2, 0, 1)}
    if kind == "concat":
        return [n((2, 3)), n((2, 2))], {"axis": 1}
    if kind == "slice":
        return [n((4, 5))], {"starts": (1, 0), "stops": (3, 4)}
    if kind == "roll":
        return [n((3, 4))], {"shifts": (1, -2), "axes": (0, 1)}
    if kind == "softmax":
        return [n(8)], {"axis": -1}
    if kind == "relu":
        return [_away_from_zero(n(10))], {}
    if kind == "gelu":
        return [n(10)], {}
    if kind == "layer-norm":
        return [n((4, 6)), 1.0 + 0.1 * n(6), 0.1 * n(6)], {}
    if kind == "mean":
        return [n((3, 4))], {"axis": None}
    if kind == "sum":
        return [n((3, 4))], {"axis": 0}
    if kind == "mse-loss":
        return [n((3, 4)), n((3, 4))], {}
    raise KeyError(kind)
