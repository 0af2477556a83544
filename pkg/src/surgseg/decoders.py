"""Segmentation heads over a FeaturePyramid.

``MLPDecoder`` is the standard all-MLP head (project, upsample, concatenate,
fuse, classify). ``SkipDecoder`` keeps the same front end but refines the
concatenated tensor through two conv blocks, each of which re-reads the
projected stride-4 feature before the classifier.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .encoder import (
    STRIDES,
    EncoderVariantConfig,
    FeaturePyramid,
    MixTransformer,
    check_params,
    get_preset,
)

HeadKind = Literal["mlp", "skip"]


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int
    num_classes: int
    head_kind: HeadKind = "mlp"

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (class 0 is background)")
        if self.head_kind not in ("mlp", "skip"):
            raise ValueError(f"unknown head_kind {self.head_kind!r}")


def project_uniform(level: torch.Tensor, proj: nn.Conv2d) -> torch.Tensor:
    """Per-pixel linear projection of a B x C_i x h x w map to ``embed_dim`` channels."""
    if level.shape[1] != proj.in_channels:
        raise ValueError(f"level has {level.shape[1]} channels, projection expects {proj.in_channels}")
    return proj(level)


def upsample_to_highest(levels: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Bilinearly resize every level to the spatial size of the first (stride-4) one."""
    if len(levels) != 4:
        raise ValueError(f"expected 4 levels, got {len(levels)}")
    h, w = levels[0].shape[-2:]
    for i, lvl in enumerate(levels):
        f = STRIDES[i] // STRIDES[0]
        if tuple(lvl.shape[-2:]) != (h // f, w // f) or h % f or w % f:
            raise ValueError(f"level {i} of size {tuple(lvl.shape[-2:])} breaks the stride law for {h}x{w}")
    out = [levels[0]]
    for lvl in levels[1:]:
        out.append(F.interpolate(lvl, size=(h, w), mode="bilinear", align_corners=False))
    return out


def fuse_multiscale(aligned: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate stride-4-aligned levels along channels, shallowest first."""
    size = aligned[0].shape[-2:]
    for a in aligned:
        if a.shape[-2:] != size:
            raise ValueError(f"spatial mismatch: {tuple(a.shape[-2:])} vs {tuple(size)}")
    return torch.cat(list(aligned), dim=1)


def conv_bn_act(in_ch, out_ch, k):
    # GELU rather than ReLU: smooth, so finite-difference checks are well posed
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, padding=k // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.GELU(),
    )


class _Head(nn.Module):
    def __init__(self, in_channels: Sequence[int], config: DecoderConfig):
        super().__init__()
        self.config = config
        E = config.embed_dim
        self.proj = nn.ModuleList(nn.Conv2d(c, E, 1) for c in in_channels)
        self.classifier = nn.Conv2d(E, config.num_classes, 1)

    def _front(self, pyramid: FeaturePyramid):
        if pyramid.channels != [p.in_channels for p in self.proj]:
            raise ValueError(
                f"pyramid channels {pyramid.channels} do not match decoder {[p.in_channels for p in self.proj]}"
            )
        projected = [project_uniform(x, p) for x, p in zip(pyramid.levels, self.proj)]
        return projected, fuse_multiscale(upsample_to_highest(projected))

    def _finish(self, h, pyramid):
        logits = self.classifier(h)
        return F.interpolate(logits, size=pyramid.input_size, mode="bilinear", align_corners=False)


class MLPDecoder(_Head):
    def __init__(self, in_channels: Sequence[int], config: DecoderConfig):
        super().__init__(in_channels, config)
        self.fuse = conv_bn_act(4 * config.embed_dim, config.embed_dim, 1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        _, fused = self._front(pyramid)
        return self._finish(self.fuse(fused), pyramid)


class SkipDecoder(_Head):
    def __init__(self, in_channels: Sequence[int], config: DecoderConfig):
        super().__init__(in_channels, config)
        E = config.embed_dim
        self.block1 = conv_bn_act(4 * E + E, E, 3)
        self.block2 = conv_bn_act(E + E, E, 3)

    def forward(self, pyramid: FeaturePyramid, drop_skip: bool = False) -> torch.Tensor:
        projected, fused = self._front(pyramid)
        skip = projected[0]
        if drop_skip:
            skip = torch.zeros_like(skip)
        h = self.block1(torch.cat([fused, skip], dim=1))
        h = self.block2(torch.cat([h, skip], dim=1))
        return self._finish(h, pyramid)


def build_decoder(in_channels: Sequence[int], config: DecoderConfig) -> nn.Module:
    cls = MLPDecoder if config.head_kind == "mlp" else SkipDecoder
    return cls(in_channels, config)


def _decode(pyramid, config, params, kind):
    if config.head_kind != kind:
        raise ValueError(f"{kind}_decode called with head_kind={config.head_kind!r}")
    with torch.device("meta"):
        skeleton = build_decoder(pyramid.channels, config)
    check_params(skeleton, params)
    skeleton.eval()
    return functional_call(skeleton, dict(params), (pyramid,))


def mlp_decode(pyramid: FeaturePyramid, config: DecoderConfig,
               params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """All-MLP head with explicit params; inference mode (BN running stats)."""
    return _decode(pyramid, config, params, "mlp")


def skip_decode(pyramid: FeaturePyramid, config: DecoderConfig,
                params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Dense-skip head with explicit params; inference mode (BN running stats)."""
    return _decode(pyramid, config, params, "skip")


class SegModel(nn.Module):
    """Encoder + one decoder head: one of the two model instances."""

    def __init__(self, encoder_config: EncoderVariantConfig | str, decoder_config: DecoderConfig):
        super().__init__()
        if isinstance(encoder_config, str):
            encoder_config = get_preset(encoder_config)
        self.encoder = MixTransformer(encoder_config)
        self.decoder = build_decoder(encoder_config.stage_channels, decoder_config)

    @property
    def encoder_config(self) -> EncoderVariantConfig:
        return self.encoder.config

    @property
    def decoder_config(self) -> DecoderConfig:
        return self.decoder.config

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(image))
