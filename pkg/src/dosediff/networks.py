"""The two network branches: an anatomy structure encoder and the
denoising network, with configurable per-stage conditioning fusion.

Both branches share one layout: a 3x3 stride-1 stem, then a stack of
downsampling stages. Stage 1 uses convolutional residual blocks (three
blocks plus one downsampling conv with a 1x1 residual shortcut); deeper
stages use three windowed-attention blocks before the same downsampling
unit. The denoiser adds two middle attention blocks at the bottleneck
and a mirrored decoder whose downsampling units are replaced by
nearest-neighbor upsampling plus a 3x3 conv, with skip connections from
the encoder.

Conditioning: at each encoder stage the structural feature map of
matching resolution is fused in, either by element-wise addition or by
cross-attention (queries from structure, keys/values from the noise
branch), optionally followed by a bottleneck projector. The
"concatenate" strategy instead stacks the anatomy channels onto the
noisy dose at the input and drops the structure encoder entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import (CrossAttentionParams, ProjectorParams, SwinBlockParams,
                     channel_layer_norm, cross_attention_fuse, projector_forward,
                     swin_block, time_embedding, trunc_normal)
from .optim import ParamStore
from .tensor import ShapeError, Tensor

FUSION_MODES = ("concatenate", "add-all", "attn-all", "attn-lastK")


@dataclass(frozen=True)
class FusionStrategy:
    """Conditioning-fusion mode, plus K for the attn-lastK family."""

    mode: str
    k: int = 0

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.mode == "attn-lastK" and self.k < 0:
            raise ValueError(f"attn-lastK needs K >= 0, got {self.k}")

    @classmethod
    def parse(cls, text: str) -> "FusionStrategy":
        if text in ("concatenate", "add-all", "attn-all"):
            return cls(text)
        if text.startswith("attn-last"):
            return cls("attn-lastK", int(text[len("attn-last"):]))
        raise ValueError(f"cannot parse fusion strategy {text!r}")

    def label(self) -> str:
        if self.mode == "attn-lastK":
            return f"attn-last{self.k}"
        return self.mode

    def stage_kinds(self, num_stages: int) -> Optional[List[str]]:
        """Per-stage fusion kind, or None for input-level concatenation."""
        if self.mode == "concatenate":
            return None
        if self.mode == "add-all":
            return ["add"] * num_stages
        if self.mode == "attn-all":
            return ["attn"] * num_stages
        if self.k > num_stages:
            raise ValueError(f"attn-last{self.k} exceeds {num_stages} stages")
        return ["add"] * (num_stages - self.k) + ["attn"] * self.k


@dataclass
class ModelConfig:
    """Architecture hyperparameters for both branches.

    image_size must be divisible by 2**len(stage_multipliers); each
    stage halves the resolution once.
    """

    image_size: int = 256
    oar_count: int = 3
    base_channels: int = 32
    stage_multipliers: tuple = (1, 2, 4, 8, 8)
    window: int = 4
    heads: int = 4
    projector_ratio: int = 4
    use_projector: bool = True
    fusion: FusionStrategy = field(default_factory=lambda: FusionStrategy("attn-lastK", 2))
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    time_dim: int = 0  # 0 means 4 * base_channels

    @property
    def num_stages(self) -> int:
        return len(self.stage_multipliers)

    @property
    def cond_channels(self) -> int:
        return 2 + self.oar_count

    @property
    def time_dim_effective(self) -> int:
        return self.time_dim if self.time_dim else 4 * self.base_channels

    def stage_channels(self) -> List[int]:
        """Channel width entering stage i (index 0 = stem output)."""
        return [self.base_channels] + [self.base_channels * m for m in self.stage_multipliers]

    def validate(self):
        s = self.num_stages
        if s < 1:
            raise ValueError("need at least one stage")
        if self.image_size % (1 << s):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{s}")
        if self.oar_count < 1:
            raise ValueError("oar_count must be >= 1")
        widths = self.stage_channels()
        for w in widths:
            if w % self.heads:
                raise ValueError(f"channel width {w} not divisible by {self.heads} heads")
            if self.use_projector and w % self.projector_ratio:
                raise ValueError(f"width {w} not divisible by projector ratio "
                                 f"{self.projector_ratio}")
        for side in self._block_sides():
            if side % min(self.window, side):
                raise ValueError(f"window {self.window} incompatible with side {side}")
        self.fusion.stage_kinds(s)  # raises when K is out of range
        if self.time_dim_effective % 2:
            raise ValueError("time embedding dim must be even")

    def _block_sides(self) -> List[int]:
        return [self.image_size >> i for i in range(self.num_stages + 1)]

    def window_for(self, side: int) -> int:
        return min(self.window, side)


@dataclass
class ConditionStack:
    """Raw condition tensor plus the per-stage structural feature maps."""

    y: np.ndarray                       # [B, 2+O, H, W]
    features: Optional[List[Tensor]]    # f_1..f_S, or None (concatenate mode)


# ---------------------------------------------------------------------------
# per-unit parameter groups


@dataclass
class ConvBlockParams:
    ln_g: Tensor
    ln_b: Tensor
    w: Tensor
    b: Tensor
    t_w: Optional[Tensor] = None
    t_b: Optional[Tensor] = None


@dataclass
class DownParams:
    w_main: Tensor
    b_main: Tensor
    w_skip: Tensor


@dataclass
class UpParams:
    w: Tensor
    b: Tensor


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


def _conv_weight(rng, shape) -> np.ndarray:
    # He-style fan-in scaling keeps conv outputs O(1) so the layer norms
    # that follow stay well conditioned at init
    fan_in = int(np.prod(shape[1:]))
    return trunc_normal(rng, shape, std=float(np.sqrt(2.0 / fan_in)))


def _init_conv(store, prefix, c_out, c_in, k, rng) -> ConvParams:
    return ConvParams(
        w=store.add(f"{prefix}.w", _conv_weight(rng, (c_out, c_in, k, k))),
        b=store.add(f"{prefix}.b", np.zeros(c_out)),
    )


def _init_conv_block(store, prefix, channels, rng, t_dim=0) -> ConvBlockParams:
    p = ConvBlockParams(
        ln_g=store.add(f"{prefix}.ln.g", np.ones(channels)),
        ln_b=store.add(f"{prefix}.ln.b", np.zeros(channels)),
        w=store.add(f"{prefix}.conv.w",
                    _conv_weight(rng, (channels, channels, 3, 3))),
        b=store.add(f"{prefix}.conv.b", np.zeros(channels)),
    )
    if t_dim:
        p.t_w = store.add(f"{prefix}.t.w", trunc_normal(rng, (t_dim, channels)))
        p.t_b = store.add(f"{prefix}.t.b", np.zeros(channels))
    return p


def _init_down(store, prefix, c_in, c_out, rng) -> DownParams:
    return DownParams(
        w_main=store.add(f"{prefix}.main.w", _conv_weight(rng, (c_out, c_in, 3, 3))),
        b_main=store.add(f"{prefix}.main.b", np.zeros(c_out)),
        w_skip=store.add(f"{prefix}.skip.w", _conv_weight(rng, (c_out, c_in, 1, 1))),
    )


def _init_up(store, prefix, c_in, c_out, rng) -> UpParams:
    return UpParams(
        w=store.add(f"{prefix}.w", _conv_weight(rng, (c_out, c_in, 3, 3))),
        b=store.add(f"{prefix}.b", np.zeros(c_out)),
    )


def _bias4(b: Tensor) -> Tensor:
    return b.reshape((1, b.shape[0], 1, 1))


def _conv(x: Tensor, p: ConvParams, stride=1, padding=1) -> Tensor:
    return T.conv2d(x, p.w, stride, padding) + _bias4(p.b)


def _conv_block(x: Tensor, p: ConvBlockParams, t_feat: Optional[Tensor]) -> Tensor:
    y = channel_layer_norm(x, p.ln_g, p.ln_b)
    y = T.relu(y)
    y = T.conv2d(y, p.w, 1, 1) + _bias4(p.b)
    if t_feat is not None and p.t_w is not None:
        bias = t_feat @ p.t_w + p.t_b
        y = y + bias.reshape((bias.shape[0], bias.shape[1], 1, 1))
    return x + y


def _downsample(x: Tensor, p: DownParams) -> Tensor:
    # stride-2 conv with a 1x1 stride-2 residual shortcut
    return T.conv2d(x, p.w_main, 2, 1) + _bias4(p.b_main) + T.conv2d(x, p.w_skip, 2, 0)


def _upsample(x: Tensor, p: UpParams) -> Tensor:
    return T.conv2d(T.upsample2(x), p.w, 1, 1) + _bias4(p.b)


@dataclass
class StageParams:
    blocks: list          # ConvBlockParams or SwinBlockParams
    down: DownParams


@dataclass
class DecoderStageParams:
    up: UpParams
    merge: ConvParams
    blocks: list


BLOCKS_PER_STAGE = 3
_SHIFT_PATTERN = (False, True, False)


class DoseModel:
    """Structure encoder + denoising network over one ParamStore."""

    def __init__(self, cfg: ModelConfig, seed):
        cfg.validate()
        self.cfg = cfg
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.store = ParamStore()
        self.stage_kinds = cfg.fusion.stage_kinds(cfg.num_stages)
        self._build(rng)

    # -- construction ------------------------------------------------------

    def _make_stage(self, store, prefix, c_in, c_out, side, rng, is_conv, t_dim):
        blocks = []
        for j in range(BLOCKS_PER_STAGE):
            name = f"{prefix}.b{j}"
            if is_conv:
                blocks.append(_init_conv_block(store, name, c_in, rng, t_dim))
            else:
                blocks.append(B.init_swin_block(
                    store, name, c_in, self.cfg.window_for(side),
                    _SHIFT_PATTERN[j % len(_SHIFT_PATTERN)], self.cfg.heads, rng,
                    t_dim=t_dim))
        return StageParams(blocks=blocks, down=_init_down(store, f"{prefix}.down", c_in, c_out, rng))

    def _build(self, rng):
        cfg = self.cfg
        store = self.store
        widths = cfg.stage_channels()          # [C, C*m1, ..., C*mS]
        t_dim = cfg.time_dim_effective
        concat_mode = self.stage_kinds is None

        # shared time-embedding trunk (two-layer MLP on the sinusoidal code)
        self.time_w1 = store.add("time.w1", trunc_normal(rng, (t_dim, t_dim)))
        self.time_b1 = store.add("time.b1", np.zeros(t_dim))
        self.time_w2 = store.add("time.w2", trunc_normal(rng, (t_dim, t_dim)))
        self.time_b2 = store.add("time.b2", np.zeros(t_dim))

        # structure encoder (absent in concatenate mode)
        self.senc_stem = None
        self.senc_stages = []
        if not concat_mode:
            self.senc_stem = _init_conv(store, "senc.stem", widths[0], cfg.cond_channels, 3, rng)
            for i in range(1, cfg.num_stages + 1):
                side = cfg.image_size >> (i - 1)
                self.senc_stages.append(self._make_stage(
                    store, f"senc.s{i}", widths[i - 1], widths[i], side, rng,
                    is_conv=(i == 1), t_dim=0))

        # denoiser encoder
        in_ch = 1 + (cfg.cond_channels if concat_mode else 0)
        self.dn_stem = _init_conv(store, "dn.stem", widths[0], in_ch, 3, rng)
        self.dn_stages = []
        self.fusers: List[Optional[CrossAttentionParams]] = []
        self.projectors: List[Optional[ProjectorParams]] = []
        for i in range(1, cfg.num_stages + 1):
            side = cfg.image_size >> (i - 1)
            self.dn_stages.append(self._make_stage(
                store, f"dn.enc.s{i}", widths[i - 1], widths[i], side, rng,
                is_conv=(i == 1), t_dim=t_dim))
            if not concat_mode and self.stage_kinds[i - 1] == "attn":
                self.fusers.append(B.init_cross_attention(
                    store, f"dn.fuse.s{i}", widths[i], widths[i], rng))
            else:
                self.fusers.append(None)
            if not concat_mode and cfg.use_projector:
                self.projectors.append(B.init_projector(
                    store, f"dn.proj.s{i}", widths[i], cfg.projector_ratio, rng))
            else:
                self.projectors.append(None)

        # middle attention blocks at the bottleneck
        mid_side = cfg.image_size >> cfg.num_stages
        self.mid = [
            B.init_swin_block(store, "dn.mid.b0", widths[-1], cfg.window_for(mid_side),
                              False, cfg.heads, rng, t_dim=t_dim),
            B.init_swin_block(store, "dn.mid.b1", widths[-1], cfg.window_for(mid_side),
                              True, cfg.heads, rng, t_dim=t_dim),
        ]

        # decoder, deepest stage first
        self.dec_stages = []
        for i in range(cfg.num_stages, 0, -1):
            side = cfg.image_size >> (i - 1)
            prefix = f"dn.dec.s{i}"
            up = _init_up(store, f"{prefix}.up", widths[i], widths[i - 1], rng)
            merge = _init_conv(store, f"{prefix}.merge", widths[i - 1], 2 * widths[i - 1], 1, rng)
            blocks = []
            for j in range(BLOCKS_PER_STAGE):
                name = f"{prefix}.b{j}"
                if i == 1:
                    blocks.append(_init_conv_block(store, name, widths[0], rng, t_dim))
                else:
                    blocks.append(B.init_swin_block(
                        store, name, widths[i - 1], cfg.window_for(side),
                        _SHIFT_PATTERN[j % len(_SHIFT_PATTERN)], cfg.heads, rng,
                        t_dim=t_dim))
            self.dec_stages.append(DecoderStageParams(up=up, merge=merge, blocks=blocks))

        # output head: near-zero init keeps eps_hat small at the start while
        # still letting gradients reach every upstream group in one step
        self.head = ConvParams(
            w=store.add("dn.head.w", trunc_normal(rng, (1, widths[0], 3, 3), std=1e-3)),
            b=store.add("dn.head.b", np.zeros(1)),
        )

    # -- forward -----------------------------------------------------------

    def _time_features(self, t) -> Tensor:
        emb = time_embedding(np.atleast_1d(t), self.cfg.time_dim_effective)
        h = T.gelu(Tensor(emb) @ self.time_w1 + self.time_b1)
        return h @ self.time_w2 + self.time_b2

    def _run_blocks(self, h: Tensor, blocks, t_feat: Optional[Tensor]) -> Tensor:
        for blk in blocks:
            if isinstance(blk, SwinBlockParams):
                h = swin_block(h, blk, t_feat)
            else:
                h = _conv_block(h, blk, t_feat)
        return h

    def encode_structure(self, y: np.ndarray) -> ConditionStack:
        """Extract the per-stage anatomical feature maps f_1..f_S from y."""
        cfg = self.cfg
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 3:
            y = y[None]
        if y.shape[1] != cfg.cond_channels:
            raise ShapeError(f"condition must have {cfg.cond_channels} channels "
                             f"(CT, PTV, {cfg.oar_count} OARs), got {y.shape[1]}")
        if self.stage_kinds is None:
            return ConditionStack(y=y, features=None)
        h = _conv(Tensor(y), self.senc_stem, 1, 1)
        features = []
        for stage in self.senc_stages:
            h = self._run_blocks(h, stage.blocks, None)
            h = _downsample(h, stage.down)
            features.append(h)
        return ConditionStack(y=y, features=features)

    def predict_noise(self, x_t, t, cond) -> Tensor:
        """Denoiser forward pass: eps_hat of the same shape as x_t."""
        if not isinstance(cond, ConditionStack):
            cond = self.encode_structure(cond)
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=np.float64))
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"x_t must be [B, 1, H, W], got {x.shape}")
        t_feat = self._time_features(t)

        if self.stage_kinds is None:
            x = T.concat([x, Tensor(cond.y)], axis=1)
        h = _conv(x, self.dn_stem, 1, 1)
        skips = [h]
        for i, stage in enumerate(self.dn_stages):
            h = self._run_blocks(h, stage.blocks, t_feat)
            h = _downsample(h, stage.down)
            if self.stage_kinds is not None:
                f_i = cond.features[i]
                if self.stage_kinds[i] == "attn":
                    h = cross_attention_fuse(f_i, h, self.fusers[i])
                else:
                    h = h + f_i
                if self.projectors[i] is not None:
                    h = projector_forward(h, self.projectors[i])
            if i < len(self.dn_stages) - 1:
                skips.append(h)

        for blk in self.mid:
            h = swin_block(h, blk, t_feat)

        for dec in self.dec_stages:
            h = _upsample(h, dec.up)
            h = T.concat([h, skips.pop()], axis=1)
            h = _conv(h, dec.merge, 1, 0)
            h = self._run_blocks(h, dec.blocks, t_feat)

        return _conv(h, self.head, 1, 1)

    def __call__(self, x_t, t, cond) -> Tensor:
        return self.predict_noise(x_t, t, cond)

    def output_shape(self, cond: ConditionStack) -> tuple:
        return (cond.y.shape[0], 1, self.cfg.image_size, self.cfg.image_size)

    # -- introspection -----------------------------------------------------

    def parameter_groups(self) -> dict:
        """Spec-level parameter grouping used by the gradient-reach check."""
        names = self.store.names()
        groups = {
            "structure-encoder": [n for n in names if n.startswith("senc.")],
            "fusion-projector": [n for n in names
                                 if n.startswith("dn.fuse.") or n.startswith("dn.proj.")],
            "denoiser-encoder": [n for n in names
                                 if n.startswith("dn.stem") or n.startswith("dn.enc.")],
            "middle": [n for n in names if n.startswith("dn.mid.")],
            "decoder": [n for n in names
                        if n.startswith("dn.dec.") or n.startswith("dn.head")],
        }
        return {k: v for k, v in groups.items() if v}


def build_model(cfg: ModelConfig, seed) -> DoseModel:
    """Construct both branches; identical seeds give identical parameters."""
    return DoseModel(cfg, seed)
