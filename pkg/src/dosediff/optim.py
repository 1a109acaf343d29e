"""Named parameter store and the Adam update."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .tensor import ShapeError, Tensor


class ParamStore:
    """Flat map from parameter path to Tensor plus Adam moment buffers.

    Parameter names are unique; first/second moment buffers always match
    the parameter shape. Each parameter carries its own step counter so
    bias correction stays consistent when a step skips some parameters.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.steps: Dict[str, int] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def names(self):
        return list(self._params)

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def group_names(self, prefix: str):
        return [n for n in self._params if n.startswith(prefix)]


def adam_step(store: ParamStore, grads: Dict[str, np.ndarray], lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    """In-place Adam update with bias correction.

    Parameters without an entry in ``grads`` are left untouched (moments
    and step counter included). Returns the store for chaining.
    """
    b1, b2 = betas
    for name, g in grads.items():
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = store[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape "
                             f"{p.data.shape} for {name!r}")
        store.steps[name] += 1
        t = store.steps[name]
        store.m[name] = b1 * store.m[name] + (1.0 - b1) * g
        store.v[name] = b2 * store.v[name] + (1.0 - b2) * (g * g)
        m_hat = store.m[name] / (1.0 - b1 ** t)
        v_hat = store.v[name] / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store
