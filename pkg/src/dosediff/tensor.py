"""Dense float64 tensors with reverse-mode automatic differentiation.

Small, CPU-only engine backed by numpy. Every differentiable operation
builds a node in an acyclic graph; calling :func:`backward` on a scalar
root walks the graph once (graphs are single-use) and accumulates
gradients into the participating leaves.

The op catalog is exposed two ways: plain functions (``conv2d``,
``softmax``, ...) plus the table-driven :func:`forward_op` dispatcher
keyed by op name.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor", "ShapeError", "UnknownOpError", "GraphConsumedError",
    "forward_op", "backward", "no_grad",
    "add", "sub", "mul", "smul", "matmul", "conv2d", "upsample2",
    "concat", "slice_", "roll", "softmax", "relu", "gelu",
    "layer_norm", "mse_loss", "OP_NAMES",
]


class ShapeError(ValueError):
    """Raised when input shapes are invalid for an operation."""


class UnknownOpError(KeyError):
    """Raised by forward_op for an op kind that is not in the catalog."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is invoked through an already-consumed graph."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """Graph record: producing op, parent tensors, and the local backward."""

    __slots__ = ("kind", "parents", "bwd", "consumed")

    def __init__(self, kind: str, parents: tuple, bwd: Callable):
        self.kind = kind
        self.parents = parents
        self.bwd = bwd  # grad_out -> tuple of parent grads (or None)
        self.consumed = False


class Tensor:
    """N-dimensional float64 array, optionally tracked in an autodiff graph."""

    __slots__ = ("data", "grad", "node", "name", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def tracked(self) -> bool:
        return self.node is not None or self.requires_grad

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; scalars are folded into the graph as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return _reshape(self, tuple(shape))

    def permute(self, axes) -> "Tensor":
        return _permute(self, tuple(axes))

    def sum(self, axis=None) -> "Tensor":
        return _sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return _mean(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(kind: str, out: np.ndarray, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    t = Tensor(out)
    if _GRAD_ENABLED and any(p.tracked() for p in parents):
        t.node = Node(kind, tuple(parents), bwd)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcastable")


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make("mul", out, (a, b), bwd)


def smul(a: Tensor, value: float) -> Tensor:
    c = float(value)
    out = a.data * c

    def bwd(g):
        return (g * c,)

    return _make("scalar-mul", out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) operands follow numpy matmul rules.

    Both operands must be at least 2-D; leading batch dims must match
    exactly or be absent on one side.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and ba != bb:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution / resampling


def _conv_out_side(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), zero padding.

    x: [B, Cin, H, W], w: [Cout, Cin, kh, kw] -> [B, Cout, Ho, Wo].
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, x has {x.shape[1]}, w expects {w.shape[1]}")
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    Ho, Wo = _conv_out_side(H, kh, s, p), _conv_out_side(W, kw, s, p)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: output would be empty for x {x.shape}, kernel {w.shape}, "
                         f"stride {s}, padding {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # [B, Cin, Ho, Wo, kh, kw] view of the padded input
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out = np.einsum("bchwkl,ockl->bohw", cols, w.data, optimize=True)
    wd = w.data

    def bwd(g):
        gw = np.einsum("bohw,bchwkl->ockl", g, cols, optimize=True)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                patch = np.einsum("bohw,oc->bchw", g, wd[:, :, ki, kj], optimize=True)
                gxp[:, :, ki:ki + s * Ho:s, kj:kj + s * Wo:s] += patch
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, gw

    return _make("conv2d", out, (x, w), bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of a [B, C, H, W] map."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2: need 4-D input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape

    def bwd(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make("upsample-nearest2", out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def _reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    in_shape = x.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return _make("reshape", out, (x,), bwd)


def _permute(x: Tensor, axes: tuple) -> Tensor:
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    out = x.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _make("permute", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for ax in range(nd):
            if ax != axis % nd and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis % nd] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), bwd)


def slice_(x: Tensor, starts: Sequence[int], stops: Sequence[int]) -> Tensor:
    """Rectangular slice; starts/stops give [start, stop) per axis."""
    if len(starts) != x.data.ndim or len(stops) != x.data.ndim:
        raise ShapeError(f"slice: need {x.data.ndim} start/stop pairs for shape {x.shape}")
    idx = tuple(slice(a, b) for a, b in zip(starts, stops))
    out = x.data[idx]
    in_shape = x.shape

    def bwd(g):
        gx = np.zeros(in_shape)
        gx[idx] = g
        return (gx,)

    return _make("slice", out, (x,), bwd)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Cyclic (toroidal) roll along the given axes."""
    sh, ax = tuple(shifts), tuple(axes)
    out = np.roll(x.data, sh, axis=ax)

    def bwd(g):
        return (np.roll(g, tuple(-s for s in sh), axis=ax),)

    return _make("roll", out, (x,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities / normalization / reductions


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # derivative at 0 defined as 0

    def bwd(g):
        return (g * mask,)

    return _make("relu", out, (x,), bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    xd = x.data
    phi_cdf = 0.5 * (1.0 + _sp.erf(xd * _INV_SQRT2))
    out = xd * phi_cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi_cdf + xd * pdf),)

    return _make("gelu", out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis, with affine parameters."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer-norm: gamma/beta must be ({n},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    gam = gamma.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gx_hat = g * gam
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gamma, g_beta

    return _make("layer-norm", out, (x, gamma, beta), bwd)


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _sum(x: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes)
    in_shape = x.shape

    def bwd(g):
        ge = np.expand_dims(g, axes) if g.ndim else g
        return (np.broadcast_to(ge, in_shape).copy(),)

    return _make("sum", out, (x,), bwd)


def _mean(x: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)
    in_shape = x.shape

    def bwd(g):
        ge = np.expand_dims(g, axes) if g.ndim else g
        return (np.broadcast_to(ge, in_shape) / count,)

    return _make("mean", out, (x,), bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse-loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def bwd(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return _make("mse-loss", out, (pred, target), bwd)


# ---------------------------------------------------------------------------
# dispatcher


def _op_add(inputs, attrs):
    return add(inputs[0], inputs[1])


def _op_sub(inputs, attrs):
    return sub(inputs[0], inputs[1])


def _op_mul(inputs, attrs):
    return mul(inputs[0], inputs[1])


def _op_smul(inputs, attrs):
    return smul(inputs[0], attrs["value"])


def _op_matmul(inputs, attrs):
    return matmul(inputs[0], inputs[1])


def _op_conv2d(inputs, attrs):
    return conv2d(inputs[0], inputs[1], attrs.get("stride", 1), attrs.get("padding", 0))


def _op_upsample2(inputs, attrs):
    return upsample2(inputs[0])


def _op_reshape(inputs, attrs):
    return _reshape(inputs[0], tuple(attrs["shape"]))


def _op_permute(inputs, attrs):
    return _permute(inputs[0], tuple(attrs["axes"]))


def _op_concat(inputs, attrs):
    return concat(inputs, attrs["axis"])


def _op_slice(inputs, attrs):
    return slice_(inputs[0], attrs["starts"], attrs["stops"])


def _op_roll(inputs, attrs):
    return roll(inputs[0], attrs["shifts"], attrs["axes"])


def _op_softmax(inputs, attrs):
    return softmax(inputs[0], attrs.get("axis", -1))


def _op_relu(inputs, attrs):
    return relu(inputs[0])


def _op_gelu(inputs, attrs):
    return gelu(inputs[0])


def _op_layer_norm(inputs, attrs):
    return layer_norm(inputs[0], inputs[1], inputs[2], attrs.get("eps", 1e-5))


def _op_mean(inputs, attrs):
    return _mean(inputs[0], attrs.get("axis"))


def _op_sum(inputs, attrs):
    return _sum(inputs[0], attrs.get("axis"))


def _op_mse(inputs, attrs):
    return mse_loss(inputs[0], inputs[1])


_OPS = {
    "add": _op_add,
    "sub": _op_sub,
    "elementwise-mul": _op_mul,
    "scalar-mul": _op_smul,
    "matmul": _op_matmul,
    "conv2d": _op_conv2d,
    "upsample-nearest2": _op_upsample2,
    "reshape": _op_reshape,
    "permute": _op_permute,
    "concat": _op_concat,
    "slice": _op_slice,
    "roll": _op_roll,
    "softmax": _op_softmax,
    "relu": _op_relu,
    "gelu": _op_gelu,
    "layer-norm": _op_layer_norm,
    "mean": _op_mean,
    "sum": _op_sum,
    "mse-loss": _op_mse,
}

OP_NAMES = tuple(_OPS)


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Run a catalog op by name. Raises UnknownOpError for unlisted kinds."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind: {kind!r}") from None
    return fn(list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over graph-tracked tensors reachable from root."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if t.node is None:
            continue
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params=None) -> dict:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``.

    root must be scalar and graph-tracked. Returns a map from parameter
    name to gradient array for every named leaf reached; when ``params``
    (a ParamStore) is given, parameters the graph never touched are
    filled with zeros so the map covers the whole store.

    Graphs are single-use: a second backward through any shared node
    raises GraphConsumedError.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.node is None:
        raise GraphConsumedError("backward: root is not graph-tracked")

    order = _topo_order(root)
    for t in order:
        if t.node.consumed:
            raise GraphConsumedError("backward: graph already consumed")

    grads = {id(root): np.ones_like(root.data)}
    named: dict[str, np.ndarray] = {}
    touched = set()  # leaves whose .grad was freshly written this pass
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.bwd(g)
        t.node.consumed = True
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None:
                continue
            if p.node is not None:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
            elif p.requires_grad:
                if id(p) in touched:
                    p.grad = p.grad + pg
                else:
                    p.grad = np.array(pg, dtype=np.float64)
                    touched.add(id(p))
                if p.name is not None:
                    named[p.name] = p.grad

    if params is not None:
        for name, p in params.items():
            if name not in named:
                p.grad = np.zeros_like(p.data)
                named[name] = p.grad
    return named
