"""Finite-difference verification of analytic gradients.

The oracle is a central difference of a scalar projection of the op
output; it never touches the reverse-mode code path beyond calling the
forward twice per coordinate.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, forward_op, no_grad


def _scalarize(out: Tensor, projection: np.ndarray) -> Tensor:
    # fixed random projection turns any output into a scalar with
    # nonzero sensitivity to every output element
    return (out * Tensor(projection)).sum()


def finite_diff_check(kind: str, inputs: Sequence[np.ndarray],
                      attrs: Optional[dict] = None, eps: float = 1e-5,
                      projection_seed: int = 0) -> float:
    """Max relative error between analytic and central-difference grads.

    Relative error per coordinate is |analytic - numeric| / max(|analytic|, 1e-8);
    the caller asserts on the returned maximum.
    """
    attrs = attrs or {}
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]

    def run(arrs) -> tuple:
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        out = forward_op(kind, ts, attrs)
        rng = np.random.default_rng(projection_seed)
        proj = rng.standard_normal(out.shape) if out.shape else np.asarray(1.0)
        loss = _scalarize(out, proj)
        return loss, ts

    loss, ts = run(arrays)
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def f(arrs) -> float:
        with no_grad():
            loss, _ = run(arrs)
        return float(loss.data)

    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        ana = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(arrays)
            flat[j] = orig - eps
            fm = f(arrays)
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(ana[j] - num) / max(abs(ana[j]), 1e-8)
            worst = max(worst, err)
    return worst


def finite_diff_scalar_fn(fn: Callable[[], Tensor], coords: Sequence[tuple],
                          eps: float = 1e-5) -> float:
    """Finite-difference check of an arbitrary scalar-valued closure.

    ``fn`` rebuilds the graph from current leaf values on every call;
    ``coords`` is a list of (array, flat_index) pairs naming which
    coordinates to perturb. Used for end-to-end model checks where a
    full Jacobian sweep would be too slow.
    """
    loss = fn()
    backward(loss)
    worst = 0.0
    for arr_holder, idx in coords:
        t, arr = arr_holder, arr_holder.data
        ana = (t.grad if t.grad is not None else np.zeros_like(arr)).reshape(-1)[idx]
        flat = arr.reshape(-1)
        orig = flat[idx]
        with no_grad():
            flat[idx] = orig + eps
            fp = float(fn().data)
            flat[idx] = orig - eps
            fm = float(fn().data)
            flat[idx] = orig
        num = (fp - fm) / (2.0 * eps)
        err = abs(ana - num) / max(abs(ana), 1e-8)
        worst = max(worst, err)
    return worst
