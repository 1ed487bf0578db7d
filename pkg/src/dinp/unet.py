"""Conditional denoiser: an encoder-decoder with skip connections that takes
the six-channel spatial input (composite image + five ROI masks) plus a
timestep and a five-code conditioning vector, and emits a single-channel
noise prediction.

Layer plan (mirrored by the parameter-count oracle in the tests):

* stem 3x3 conv (6 -> base)
* per level i with width w_i = base * mult_i: `res_blocks` residual blocks
  (each pushes a skip), then a stride-2 3x3 conv between levels
* middle: res block, self-attention (when the deepest level is configured
  for attention), res block
* decoder: per level in reverse, `res_blocks` residual blocks each
  consuming one skip by concatenation, nearest-upsample + 3x3 conv
  between levels
* head: group norm, SiLU, 3x3 conv (base -> 1), zero-initialized so a
  fresh network predicts exactly zero noise

Residual blocks are conditioned by affine modulation: the combined
embedding is projected per block to a (scale, shift) pair applied to the
normalized activations. The conditioning-vector embeddings are
concatenated with the time embedding, never added to it; each of the five
vector positions owns a private 4-row embedding table. Group norm uses
min(8, channels) groups throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, ValidationError
from .substrate import Tensor

NUM_CODES = 4  # conditioning codes 0..3


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 6
    out_channels: int = 1
    base_width: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 2)
    res_blocks: int = 1
    attention_levels: Tuple[int, ...] = (2,)
    time_width: int = 128
    code_width: int = 16
    cond_width: int = 128
    image_size: int = 64

    def __post_init__(self) -> None:
        if self.in_channels != 6 or self.out_channels != 1:
            raise ValidationError(
                "denoiser takes exactly 6 input channels and emits 1 output channel"
            )
        if not self.channel_mults:
            raise ValidationError("channel_mults must be nonempty")
        levels = len(self.channel_mults)
        factor = 2 ** (levels - 1)
        if self.image_size % factor != 0:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by 2^(levels-1) = {factor}"
            )
        if self.time_width % 2 != 0 or self.time_width < 2:
            raise ValidationError("time_width must be even and >= 2")
        if self.code_width < 1 or self.cond_width < 1 or self.base_width < 1:
            raise ValidationError("widths must be >= 1")
        if self.res_blocks < 1:
            raise ValidationError("need at least one residual block per level")
        for lvl in self.attention_levels:
            if not 0 <= lvl < levels:
                raise ValidationError(f"attention level {lvl} outside [0, {levels})")
        for cin, cout in self.resblock_plan():
            for c in (cin, cout):
                if c % min(8, c) != 0:
                    raise ValidationError(f"group norm: min(8, {c}) does not divide {c}")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def level_widths(self) -> Tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    def resblock_plan(self) -> Sequence[Tuple[int, int]]:
        """(cin, cout) of every residual block, in construction order; this
        is the static shape-algebra check run at configuration time."""
        plan = []
        widths = self.level_widths
        cur = self.base_width
        skips = []
        for i, w in enumerate(widths):
            for _ in range(self.res_blocks):
                plan.append((cur, w))
                cur = w
                skips.append(w)
        plan.append((cur, cur))
        plan.append((cur, cur))
        for i in reversed(range(self.levels)):
            w = widths[i]
            for _ in range(self.res_blocks):
                plan.append((cur + skips.pop(), w))
                cur = w
        return plan

    def embedding_input_width(self) -> int:
        return self.time_width + 5 * self.code_width


def time_embedding(t: Tensor, width: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """Sinusoidal timestep embedding: [sin(t w_i), cos(t w_i)] for
    w_i = 10000^(-2i/width), i < width/2. t may be scalar or (B,)."""
    if width % 2 != 0:
        raise ValidationError(f"time embedding width must be even, got {width}")
    t = torch.as_tensor(t, dtype=dtype)
    scalar = t.dim() == 0
    if scalar:
        t = t.view(1)
    if (t < 0).any():
        raise ValidationError("timesteps must be >= 0")
    half = width // 2
    freqs = torch.pow(
        torch.tensor(10000.0, dtype=dtype), -2.0 * torch.arange(half, dtype=dtype) / width
    )
    args = t.to(dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if scalar else emb


class ResBlock(nn.Module):
    """norm -> SiLU -> conv, conditioned by per-block affine modulation,
    -> norm*(1+scale)+shift -> SiLU -> conv, plus a (projected) residual."""

    def __init__(self, cin: int, cout: int, cond_width: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.affine = nn.Linear(cond_width, 2 * cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.affine(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class ConditionalUNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        cw = config.cond_width
        self.code_tables = nn.ModuleList(
            nn.Embedding(NUM_CODES, config.code_width) for _ in range(5)
        )
        self.embed = nn.Sequential(
            nn.Linear(config.embedding_input_width(), cw), nn.SiLU(), nn.Linear(cw, cw)
        )

        widths = config.level_widths
        self.stem = nn.Conv2d(config.in_channels, config.base_width, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        cur = config.base_width
        for i, w in enumerate(widths):
            for _ in range(config.res_blocks):
                self.down_blocks.append(ResBlock(cur, w, cw))
                self.down_attn.append(
                    SelfAttention(w) if i in config.attention_levels else nn.Identity()
                )
                cur = w
            if i < config.levels - 1:
                self.downsamples.append(Downsample(cur))

        self.mid_block1 = ResBlock(cur, cur, cw)
        self.mid_attn = (
            SelfAttention(cur)
            if (config.levels - 1) in config.attention_levels
            else nn.Identity()
        )
        self.mid_block2 = ResBlock(cur, cur, cw)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(config.levels)):
            w = widths[i]
            for _ in range(config.res_blocks):
                self.up_blocks.append(ResBlock(cur + w, w, cw))
                self.up_attn.append(
                    SelfAttention(w) if i in config.attention_levels else nn.Identity()
                )
                cur = w
            if i > 0:
                self.upsamples.append(Upsample(cur))

        self.out_norm = nn.GroupNorm(min(8, cur), cur)
        self.out_conv = nn.Conv2d(cur, config.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def conditioning(self, t: Tensor, cv: Tensor) -> Tensor:
        """Concatenate time and per-position code embeddings, then project."""
        dtype = self.out_conv.weight.dtype
        temb = time_embedding(t, self.config.time_width, dtype=dtype)
        if temb.dim() == 1:
            temb = temb.unsqueeze(0)
        if cv.dim() == 1:
            cv = cv.unsqueeze(0)
        if cv.shape[-1] != 5:
            raise ShapeError(f"conditioning vector must have 5 codes, got {cv.shape}")
        if (cv < 0).any() or (cv >= NUM_CODES).any():
            raise ValidationError(f"conditioning codes must lie in [0, {NUM_CODES})")
        codes = torch.cat(
            [self.code_tables[i](cv[:, i].long()) for i in range(5)], dim=-1
        )
        return self.embed(torch.cat([temb, codes], dim=-1))

    def forward(self, x6: Tensor, t: Tensor, cv: Tensor) -> Tensor:
        squeeze = x6.dim() == 3
        if squeeze:
            x6 = x6.unsqueeze(0)
        if x6.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x6.shape[1]}")
        factor = 2 ** (self.config.levels - 1)
        if x6.shape[-1] % factor or x6.shape[-2] % factor:
            raise ShapeError(
                f"spatial dims {tuple(x6.shape[-2:])} not divisible by {factor}"
            )
        emb = self.conditioning(t, cv)
        if emb.shape[0] != x6.shape[0]:
            if emb.shape[0] == 1:
                emb = emb.expand(x6.shape[0], -1)
            else:
                raise ShapeError("batch sizes of image and conditioning differ")

        h = self.stem(x6)
        skips = []
        blocks = iter(zip(self.down_blocks, self.down_attn))
        for i in range(self.config.levels):
            for _ in range(self.config.res_blocks):
                block, attn = next(blocks)
                h = attn(block(h, emb))
                skips.append(h)
            if i < self.config.levels - 1:
                h = self.downsamples[i](h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, emb)), emb)

        blocks = iter(zip(self.up_blocks, self.up_attn))
        up_idx = 0
        for i in reversed(range(self.config.levels)):
            for _ in range(self.config.res_blocks):
                block, attn = next(blocks)
                h = attn(block(torch.cat([h, skips.pop()], dim=1), emb))
            if i > 0:
                h = self.upsamples[up_idx](h)
                up_idx += 1

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out.squeeze(0) if squeeze else out


def init_params(config: UNetConfig, seed: int) -> Dict[str, Tensor]:
    """Deterministic parameter set for a fresh denoiser: variance-scaled
    (torch default) convolutions, zero-initialized output head."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = ConditionalUNet(config)
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def build_unet(config: UNetConfig, params: Dict[str, Tensor] | None = None) -> ConditionalUNet:
    module = ConditionalUNet(config)
    if params is not None:
        module.load_state_dict(params)
    return module


def parameter_count(config: UNetConfig) -> int:
    return sum(p.numel() for p in ConditionalUNet(config).parameters())
