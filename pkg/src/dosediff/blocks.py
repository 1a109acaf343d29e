"""Neural building blocks: windowed self-attention with cyclic shift,
cross-attention feature fusion, the bottleneck projector, and sinusoidal
time embeddings.

Feature maps are [B, C, H, W] Tensors (a leading batch axis is added
transparently for 3-D inputs). Parameters live in a ParamStore and are
grouped into small dataclasses per block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# parameter groups


@dataclass
class AttentionParams:
    """Fused multi-head projection weights for windowed self-attention."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    head_dim: int


@dataclass
class CrossAttentionParams:
    """Query transform for the structural map, key/value for the noise map."""

    wq_a: Tensor
    wk_b: Tensor
    wv_b: Tensor
    inner_dim: int


@dataclass
class SwinBlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    window: int
    shift: bool
    t_w: Optional[Tensor] = None
    t_b: Optional[Tensor] = None


@dataclass
class ProjectorParams:
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor
    ratio: int


# ---------------------------------------------------------------------------
# initialization


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with resampling outside 2 std (deterministic in rng)."""
    x = rng.normal(0.0, std, shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def init_attention(store: ParamStore, prefix: str, channels: int, heads: int,
                   rng: np.random.Generator) -> AttentionParams:
    if channels % heads:
        raise ValueError(f"{prefix}: channels {channels} not divisible by heads {heads}")
    dk = channels // heads
    inner = heads * dk
    return AttentionParams(
        wq=store.add(f"{prefix}.wq", trunc_normal(rng, (channels, inner))),
        wk=store.add(f"{prefix}.wk", trunc_normal(rng, (channels, inner))),
        wv=store.add(f"{prefix}.wv", trunc_normal(rng, (channels, inner))),
        wo=store.add(f"{prefix}.wo", trunc_normal(rng, (inner, channels))),
        heads=heads, head_dim=dk,
    )


def init_swin_block(store: ParamStore, prefix: str, channels: int, window: int,
                    shift: bool, heads: int, rng: np.random.Generator,
                    t_dim: int = 0, mlp_ratio: int = 4) -> SwinBlockParams:
    hidden = mlp_ratio * channels
    p = SwinBlockParams(
        ln1_g=store.add(f"{prefix}.ln1.g", np.ones(channels)),
        ln1_b=store.add(f"{prefix}.ln1.b", np.zeros(channels)),
        attn=init_attention(store, f"{prefix}.attn", channels, heads, rng),
        ln2_g=store.add(f"{prefix}.ln2.g", np.ones(channels)),
        ln2_b=store.add(f"{prefix}.ln2.b", np.zeros(channels)),
        w1=store.add(f"{prefix}.mlp.w1", trunc_normal(rng, (channels, hidden))),
        b1=store.add(f"{prefix}.mlp.b1", np.zeros(hidden)),
        w2=store.add(f"{prefix}.mlp.w2", trunc_normal(rng, (hidden, channels))),
        b2=store.add(f"{prefix}.mlp.b2", np.zeros(channels)),
        window=window, shift=shift,
    )
    if t_dim:
        p.t_w = store.add(f"{prefix}.t.w", trunc_normal(rng, (t_dim, channels)))
        p.t_b = store.add(f"{prefix}.t.b", np.zeros(channels))
    return p


def init_cross_attention(store: ParamStore, prefix: str, c_struct: int, c_noise: int,
                         rng: np.random.Generator,
                         inner_dim: Optional[int] = None) -> CrossAttentionParams:
    d = inner_dim if inner_dim is not None else c_noise
    return CrossAttentionParams(
        wq_a=store.add(f"{prefix}.wq_a", trunc_normal(rng, (c_struct, d))),
        wk_b=store.add(f"{prefix}.wk_b", trunc_normal(rng, (c_noise, d))),
        wv_b=store.add(f"{prefix}.wv_b", trunc_normal(rng, (c_noise, c_noise))),
        inner_dim=d,
    )


def init_projector(store: ParamStore, prefix: str, channels: int, ratio: int,
                   rng: np.random.Generator) -> ProjectorParams:
    if channels % ratio:
        raise ValueError(f"{prefix}: channels {channels} not divisible by ratio {ratio}")
    hidden = channels // ratio
    # up-projection starts at zero so the residual path is the identity at init
    return ProjectorParams(
        w_down=store.add(f"{prefix}.w_down", trunc_normal(rng, (channels, hidden))),
        b_down=store.add(f"{prefix}.b_down", np.zeros(hidden)),
        w_up=store.add(f"{prefix}.w_up", np.zeros((hidden, channels))),
        b_up=store.add(f"{prefix}.b_up", np.zeros(channels)),
        ratio=ratio,
    )


# ---------------------------------------------------------------------------
# window bookkeeping


def _batched(x: Tensor):
    if x.data.ndim == 3:
        return x.reshape((1,) + x.shape), False
    if x.data.ndim == 4:
        return x, True
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W] feature map, got {x.shape}")


def window_partition(x: Tensor, window: int) -> Tensor:
    """Tile a feature map into non-overlapping window x window patches.

    [B, C, H, W] -> [B*(H/w)*(W/w), C, w, w]; a 3-D input is treated as
    batch size one. Lossless: window_merge inverts it exactly.
    """
    xb, _ = _batched(x)
    b, c, h, w = xb.shape
    if h % window or w % window:
        raise ShapeError(f"window {window} does not divide map {h}x{w}")
    nh, nw = h // window, w // window
    t = xb.reshape((b, c, nh, window, nw, window))
    t = t.permute((0, 2, 4, 1, 3, 5))
    return t.reshape((b * nh * nw, c, window, window))


def window_merge(windows: Tensor, h: int, w: int) -> Tensor:
    """Inverse of window_partition back to [B, C, h, w]."""
    n, c, win, win2 = windows.shape
    if win != win2:
        raise ShapeError(f"windows must be square, got {windows.shape}")
    nh, nw = h // win, w // win
    if nh * nw == 0 or n % (nh * nw):
        raise ShapeError(f"cannot merge {n} windows of size {win} into {h}x{w}")
    b = n // (nh * nw)
    t = windows.reshape((b, nh, nw, c, win, win))
    t = t.permute((0, 3, 1, 4, 2, 5))
    return t.reshape((b, c, h, w))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the two spatial axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"cyclic_shift: need spatial axes, got {x.shape}")
    return T.roll(x, (dy, dx), (-2, -1))


# ---------------------------------------------------------------------------
# attention


def _to_tokens(x: Tensor):
    """[B, C, H, W] -> [B, H*W, C]."""
    b, c, h, w = x.shape
    return x.reshape((b, c, h * w)).permute((0, 2, 1))


def _from_tokens(tok: Tensor, h: int, w: int) -> Tensor:
    b, n, c = tok.shape
    return tok.permute((0, 2, 1)).reshape((b, c, h, w))


def window_attention(windows: Tensor, p: AttentionParams, return_weights: bool = False):
    """Multi-head self-attention inside each window.

    Per window and head: A = softmax(Q K^T / sqrt(d_k)), outputs are the
    attention-weighted sums of values; heads are concatenated and passed
    through the output projection.
    """
    nwin, c, win, _ = windows.shape
    if c != p.wq.shape[0]:
        raise ShapeError(f"window_attention: {c} channels vs weights for {p.wq.shape[0]}")
    n = win * win
    h, dk = p.heads, p.head_dim
    tok = _to_tokens(windows)                      # [nW, n, C]

    def heads_of(m: Tensor) -> Tensor:
        return m.reshape((nwin, n, h, dk)).permute((0, 2, 1, 3))

    q = heads_of(tok @ p.wq)
    k = heads_of(tok @ p.wk)
    v = heads_of(tok @ p.wv)
    logits = (q @ k.permute((0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    attn = T.softmax(logits, axis=-1)              # [nW, h, n, n]
    ctx = attn @ v                                 # [nW, h, n, dk]
    merged = ctx.permute((0, 2, 1, 3)).reshape((nwin, n, h * dk))
    out = _from_tokens(merged @ p.wo, win, win)
    if return_weights:
        return out, attn
    return out


def swin_block(x: Tensor, p: SwinBlockParams, t_emb: Optional[Tensor] = None) -> Tensor:
    """Windowed-attention block with optional cyclic shift.

    Pre-normalization before each sub-layer; residual connections around
    the attention and MLP branches; the time embedding enters as a
    per-channel bias after its per-block projection. With the residual
    branch outputs zeroed the block is the exact identity.
    """
    xb, batched = _batched(x)
    b, c, hh, ww = xb.shape
    win = p.window
    if hh % win or ww % win:
        raise ShapeError(f"swin_block: window {win} does not divide {hh}x{ww}")
    shift = win // 2 if (p.shift and win > 1) else 0

    y = channel_layer_norm(xb, p.ln1_g, p.ln1_b)
    if shift:
        y = cyclic_shift(y, -shift, -shift)
    wins = window_partition(y, win)
    wins = window_attention(wins, p.attn)
    y = window_merge(wins, hh, ww)
    if shift:
        y = cyclic_shift(y, shift, shift)
    xb = xb + y

    if t_emb is not None:
        if p.t_w is None:
            raise ShapeError("swin_block: block has no time projection")
        if t_emb.shape[-1] != p.t_w.shape[0]:
            raise ShapeError(f"swin_block: t_emb dim {t_emb.shape[-1]} != "
                             f"projection dim {p.t_w.shape[0]}")
        bias = t_emb @ p.t_w + p.t_b               # [B, C]
        xb = xb + bias.reshape((b, c, 1, 1))

    y = channel_layer_norm(xb, p.ln2_g, p.ln2_b)
    tok = _to_tokens(y).reshape((b * hh * ww, c))
    tok = T.relu(tok @ p.w1 + p.b1) @ p.w2 + p.b2
    y = _from_tokens(tok.reshape((b, hh * ww, c)), hh, ww)
    out = xb + y
    return out if batched else out.reshape((c, hh, ww))


def channel_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Layer norm over the channel axis of a [B, C, H, W] map."""
    t = x.permute((0, 2, 3, 1))
    t = T.layer_norm(t, gamma, beta)
    return t.permute((0, 3, 1, 2))


def cross_attention_fuse(a: Tensor, b: Tensor, p: CrossAttentionParams,
                         return_weights: bool = False):
    """Fuse a structural map into a noise map via cross-attention.

    Queries come from the structural map ``a``, keys and values from the
    noise map ``b``; the attention output is residual-added to ``b``.
    """
    ab, a_batched = _batched(a)
    bb, _ = _batched(b)
    if ab.shape[-2:] != bb.shape[-2:] or ab.shape[0] != bb.shape[0]:
        raise ShapeError(f"cross_attention_fuse: spatial/batch mismatch "
                         f"{a.shape} vs {b.shape}")
    _, ca, hh, ww = ab.shape
    _, cb, _, _ = bb.shape
    if ca != p.wq_a.shape[0] or cb != p.wk_b.shape[0]:
        raise ShapeError("cross_attention_fuse: channel dims do not match params")
    tok_a = _to_tokens(ab)
    tok_b = _to_tokens(bb)
    q = tok_a @ p.wq_a
    k = tok_b @ p.wk_b
    v = tok_b @ p.wv_b
    weights = T.softmax((q @ k.permute((0, 2, 1))) * (1.0 / np.sqrt(p.inner_dim)), axis=-1)
    fused_tok = tok_b + weights @ v
    out = _from_tokens(fused_tok, hh, ww)
    if not a_batched:
        out = out.reshape((cb, hh, ww))
    if return_weights:
        return out, weights
    return out


def projector_forward(f_in: Tensor, p: ProjectorParams) -> Tensor:
    """Two-MLP bottleneck with GELU, residual-added to its input.

    Applied per spatial location; output channel count equals input
    channel count, so zero up-projection weights make this the identity.
    """
    xb, batched = _batched(f_in)
    b, c, hh, ww = xb.shape
    if c != p.w_down.shape[0]:
        raise ShapeError(f"projector: {c} channels vs params for {p.w_down.shape[0]}")
    tok = _to_tokens(xb).reshape((b * hh * ww, c))
    tok = T.gelu(tok @ p.w_down + p.b_down) @ p.w_up + p.b_up
    y = _from_tokens(tok.reshape((b, hh * ww, c)), hh, ww)
    out = xb + y
    return out if batched else out.reshape((c, hh, ww))


# ---------------------------------------------------------------------------
# time embedding


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal timestep embedding: sin/cos pairs at geometric frequencies.

    Scalar t gives a [dim] vector, a batch of timesteps a [B, dim] array.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    exponents = np.arange(half, dtype=np.float64) / max(half - 1, 1)
    freqs = np.exp(-np.log(10000.0) * exponents)
    ang = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb[0] if np.ndim(t) == 0 else emb
