"""Hierarchical mix-transformer encoder producing a 4-level feature pyramid.

Each stage is an overlapping patch embedding followed by transformer blocks
with spatially-reduced self-attention and a convolutional feed-forward
network. There are no explicit positional embeddings; the depthwise conv in
the FFN carries position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

STRIDES = (4, 8, 16, 32)

# ImageNet statistics; stored as buffers so they travel with checkpoints.
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)


class DimensionError(ValueError):
    """Input spatial size incompatible with the pyramid strides."""


class ParamShapeError(ValueError):
    """Parameter collection does not match the model config."""


@dataclass(frozen=True)
class EncoderVariantConfig:
    name: str
    stage_channels: tuple[int, int, int, int]
    stage_depths: tuple[int, int, int, int]
    attention_heads: tuple[int, int, int, int]
    spatial_reduction_ratios: tuple[int, int, int, int] = (8, 4, 2, 1)
    ffn_expansion: int = 4
    patch_sizes: tuple[int, int, int, int] = (7, 3, 3, 3)
    patch_strides: tuple[int, int, int, int] = field(default=(4, 2, 2, 2), init=False)
    decoder_embed_dim: int = 256

    def __post_init__(self):
        for fname in ("stage_channels", "stage_depths", "attention_heads",
                      "spatial_reduction_ratios", "patch_sizes"):
            vals = getattr(self, fname)
            if len(vals) != 4 or any(int(v) <= 0 for v in vals):
                raise ValueError(f"{fname} must be 4 positive integers, got {vals}")
        if self.ffn_expansion <= 0:
            raise ValueError("ffn_expansion must be positive")
        ch = self.stage_channels
        if not all(a < b for a, b in zip(ch, ch[1:])):
            raise ValueError(f"stage_channels must be strictly increasing, got {ch}")
        for c, h in zip(ch, self.attention_heads):
            if c % h:
                raise ValueError(f"{h} heads do not divide {c} channels")


PRESETS: dict[str, EncoderVariantConfig] = {
    "tiny": EncoderVariantConfig(
        name="tiny",
        stage_channels=(8, 16, 32, 64),
        stage_depths=(1, 1, 1, 1),
        attention_heads=(1, 1, 2, 4),
        decoder_embed_dim=128,
    ),
    # published SegFormer-B2 / B5 ladders
    "b2-like": EncoderVariantConfig(
        name="b2-like",
        stage_channels=(64, 128, 320, 512),
        stage_depths=(3, 4, 6, 3),
        attention_heads=(1, 2, 5, 8),
        decoder_embed_dim=768,
    ),
    "b5-like": EncoderVariantConfig(
        name="b5-like",
        stage_channels=(64, 128, 320, 512),
        stage_depths=(3, 6, 40, 3),
        attention_heads=(1, 2, 5, 8),
        decoder_embed_dim=768,
    ),
}


def get_preset(name: str) -> EncoderVariantConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown encoder variant {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class FeaturePyramid:
    """Four encoder feature maps at strides 4, 8, 16, 32."""

    levels: list[torch.Tensor]
    input_size: tuple[int, int]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError(f"pyramid needs exactly 4 levels, got {len(self.levels)}")
        H, W = self.input_size
        if H % 32 or W % 32:
            raise DimensionError(f"input size {self.input_size} not divisible by 32")
        B = self.levels[0].shape[0]
        for lvl, s in zip(self.levels, STRIDES):
            if lvl.ndim != 4 or lvl.shape[0] != B or tuple(lvl.shape[2:]) != (H // s, W // s):
                raise ValueError(
                    f"level of shape {tuple(lvl.shape)} violates stride {s} for input {self.input_size}"
                )

    @property
    def channels(self) -> list[int]:
        return [lvl.shape[1] for lvl in self.levels]

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return 4


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch, out_ch, patch_size, stride):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, patch_size, stride=stride, padding=patch_size // 2)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x):
        x = self.proj(x)
        _, _, H, W = x.shape
        x = x.flatten(2).transpose(1, 2)
        return self.norm(x), H, W


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention with keys/values computed on a spatially
    reduced grid (reduction by a strided conv of kernel == stride == sr_ratio)."""

    def __init__(self, dim, num_heads, sr_ratio):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"{num_heads} heads do not divide {dim} channels")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def _heads(self, t):
        B, N, C = t.shape
        return t.reshape(B, N, self.num_heads, C // self.num_heads).transpose(1, 2)

    def forward(self, x, H, W, return_attn=False):
        B, N, C = x.shape
        q = self._heads(self.query(x))
        kv_in = x
        if self.sr_ratio > 1:
            grid = x.transpose(1, 2).reshape(B, C, H, W)
            grid = self.sr(grid)
            kv_in = self.norm(grid.flatten(2).transpose(1, 2))
        k = self._heads(self.key(kv_in))
        v = self._heads(self.value(kv_in))
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class MixFFN(nn.Module):
    def __init__(self, dim, expansion):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, H, W):
        B, N, _ = x.shape
        x = self.fc1(x)
        x = x.transpose(1, 2).reshape(B, -1, H, W)
        x = self.dwconv(x).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class Block(nn.Module):
    def __init__(self, dim, num_heads, sr_ratio, expansion):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, num_heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, expansion)

    def forward(self, x, H, W):
        x = x + self.attn(self.norm1(x), H, W)
        return x + self.ffn(self.norm2(x), H, W)


class Stage(nn.Module):
    """Transformer blocks of one pyramid level plus the closing layer norm."""

    def __init__(self, dim, depth, num_heads, sr_ratio, expansion):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.blocks = nn.ModuleList(Block(dim, num_heads, sr_ratio, expansion) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens, H, W):
        for blk in self.blocks:
            tokens = blk(tokens, H, W)
        return self.norm(tokens)


class MixTransformer(nn.Module):
    def __init__(self, config: EncoderVariantConfig, mean=DEFAULT_MEAN, std=DEFAULT_STD):
        super().__init__()
        self.config = config
        self.register_buffer("pixel_mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        in_chs = (3,) + tuple(config.stage_channels[:-1])
        self.patch_embeds = nn.ModuleList(
            OverlapPatchEmbed(i, o, p, s)
            for i, o, p, s in zip(in_chs, config.stage_channels, config.patch_sizes, config.patch_strides)
        )
        self.stages = nn.ModuleList(
            Stage(c, d, h, r, config.ffn_expansion)
            for c, d, h, r in zip(
                config.stage_channels,
                config.stage_depths,
                config.attention_heads,
                config.spatial_reduction_ratios,
            )
        )
        self.apply(init_weights)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        check_input_size(image)
        B = image.shape[0]
        x = (image - self.pixel_mean) / self.pixel_std
        levels = []
        for embed, stage in zip(self.patch_embeds, self.stages):
            tokens, H, W = embed(x)
            tokens = stage(tokens, H, W)
            x = tokens.transpose(1, 2).reshape(B, -1, H, W)
            levels.append(x)
        return FeaturePyramid(levels, tuple(image.shape[-2:]))


def init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def check_input_size(image: torch.Tensor):
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected B x 3 x H x W image, got {tuple(image.shape)}")
    H, W = image.shape[-2:]
    if H % 32 or W % 32:
        raise DimensionError(f"H and W must be divisible by 32, got {H}x{W}")


def check_params(module: nn.Module, params: Mapping[str, torch.Tensor]):
    """Raise ParamShapeError unless ``params`` covers ``module`` exactly."""
    expected = {k: tuple(v.shape) for k, v in module.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in params.items()}
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    if missing or extra:
        raise ParamShapeError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
    bad = [k for k in expected if expected[k] != got[k]]
    if bad:
        k = bad[0]
        raise ParamShapeError(f"{k}: expected shape {expected[k]}, got {got[k]}")


def encoder_forward(image: torch.Tensor, config: EncoderVariantConfig,
                    params: Mapping[str, torch.Tensor]) -> FeaturePyramid:
    """Run the encoder described by ``config`` with an explicit parameter dict.

    ``params`` uses ``MixTransformer.state_dict()`` naming. Pure: no state is
    kept between calls.
    """
    check_input_size(image)
    with torch.device("meta"):
        skeleton = MixTransformer(config)
    check_params(skeleton, params)
    return functional_call(skeleton, dict(params), (image,))


def stage_forward(tokens: torch.Tensor, hw: Sequence[int], stage: Stage) -> torch.Tensor:
    """Apply one stage's blocks to a B x N x C token sequence on an H x W grid."""
    B, N, C = tokens.shape
    H, W = hw
    if N != H * W:
        raise ValueError(f"{N} tokens do not match a {H}x{W} grid")
    if C != stage.dim:
        raise ValueError(f"stage expects {stage.dim} channels, got {C}")
    if C % stage.num_heads:
        raise ValueError(f"{stage.num_heads} heads do not divide {C} channels")
    return stage(tokens, H, W)
