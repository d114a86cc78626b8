"""Temporal context generation with a per-scale compensation strategy.

Level 0 is the original resolution, level 1 half, level 2 quarter.  Every
level picks one of three operators:

``flow``  bilinear warp of the reference feature by the decoded flow;
``fgdc``  deformable sampling guided by the flow, with coded residual offsets;
``dc``    deformable sampling with coded offsets and no flow guidance.

Offsets are estimated at half the level's resolution, coded with a
:class:`~hybridvc.motion.FieldCodec` and bilinearly upsampled before use.
"""
from __future__ import annotations

from collections import Counter

import torch
import torch.nn as nn

from .config import DC, FGDC, FLOW, CodecConfig
from .layers import ResBlock, act, conv, zero_init
from .motion import FieldCodec
from .tensor_ops import (
    DeformKernelSpec, bilinear_warp, deform_sample, identity_deform_weight, offset_upsample,
)


class ConfigurationError(ValueError):
    pass


class FeaturePyramid(nn.Module):
    """Propagated full-resolution feature -> features at levels 0, 1, 2."""

    def __init__(self, c0, c1, c2, cin=None):
        super().__init__()
        self.head = nn.Sequential(conv(cin or c0, c0), ResBlock(c0))
        self.down1 = nn.Sequential(conv(c0, c1, 3, 2), ResBlock(c1))
        self.down2 = nn.Sequential(conv(c1, c2, 3, 2), ResBlock(c2))

    def forward(self, feature: torch.Tensor, levels: int = 3) -> list[torch.Tensor]:
        out = [self.head(feature)]
        if levels > 1:
            out.append(self.down1(out[0]))
        if levels > 2:
            out.append(self.down2(out[1]))
        return out


def extract_reference_pyramid(net: FeaturePyramid, f_prev: torch.Tensor) -> list[torch.Tensor]:
    return net(f_prev)


class CurrentFeature(nn.Module):
    """Encoder-side features of the frame being coded (offset estimation only)."""

    def __init__(self, c0, c1, c2):
        super().__init__()
        self.stem = nn.Sequential(conv(3, c0), act())
        self.pyramid = FeaturePyramid(c0, c1, c2)

    def forward(self, x_t: torch.Tensor, levels: int = 1) -> list[torch.Tensor]:
        return self.pyramid(self.stem(x_t), levels)


class OffsetEstimator(nn.Module):
    """(current, flow-aligned reference, flow) -> residual offsets at half resolution."""

    def __init__(self, channels: int, spec: DeformKernelSpec, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            conv(2 * channels + 2, hidden, 3, 2), act(),
            conv(hidden, hidden), act(),
            zero_init(conv(hidden, spec.offset_channels)),
        )

    def forward(self, cur, aligned_ref, flow):
        return self.net(torch.cat((cur, aligned_ref, flow), dim=1))


class DeformCompensation(nn.Module):
    """Deformable sampling with an identity-initialised kernel."""

    def __init__(self, channels: int, spec: DeformKernelSpec):
        super().__init__()
        spec.check_channels(channels)
        self.spec = spec
        self.weight = nn.Parameter(identity_deform_weight(channels, spec))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, base_flow, residual):
        return deform_sample(x, base_flow, residual, self.spec, self.weight, self.bias)


class HybridContextGenerator(nn.Module):
    """Generates C^0..C^2 from reference features, flows and decoded offsets."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.channels
        self.spec = cfg.kernel
        self.strategies = cfg.ablation.generation
        widths = (ch.c0, ch.c1, ch.c2)
        self.coded_levels = cfg.ablation.coded_offset_levels
        self.estimators = nn.ModuleDict()
        self.offset_codecs = nn.ModuleDict()
        self.compensators = nn.ModuleDict()
        for lvl in self.coded_levels:
            self.estimators[str(lvl)] = OffsetEstimator(widths[lvl], self.spec)
            self.offset_codecs[str(lvl)] = FieldCodec(self.spec.offset_channels, ch.motion_latent,
                                                      substream="offset", stages=3)
            self.compensators[str(lvl)] = DeformCompensation(widths[lvl], self.spec)
        self.counters: Counter = Counter()

    def estimate_residual_offsets(self, level: int, cur: torch.Tensor, ref: torch.Tensor,
                                  flow: torch.Tensor) -> torch.Tensor:
        """Offsets for ``level`` at half its resolution.

        FGDC levels see the flow-warped reference; DC levels see it unwarped.
        """
        if level not in self.coded_levels:
            raise ConfigurationError(f"level {level} has no offset stream ({self.strategies[level]})")
        aligned = bilinear_warp(ref, flow) if self.strategies[level] == FGDC else ref
        return self.estimators[str(level)](cur, aligned, flow)

    def upsample_offsets(self, decoded: torch.Tensor) -> torch.Tensor:
        return offset_upsample(decoded, 2, self.spec)

    def forward(self, ref: list[torch.Tensor], flows: list[torch.Tensor],
                offsets: dict[int, torch.Tensor]) -> list[torch.Tensor]:
        """``offsets`` maps coded levels to full-resolution decoded offsets."""
        contexts = []
        for lvl, strategy in enumerate(self.strategies):
            if strategy == FLOW:
                contexts.append(bilinear_warp(ref[lvl], flows[lvl]))
            else:
                if lvl not in offsets:
                    raise ConfigurationError(f"{strategy} requested at level {lvl} without decoded offsets")
                base = flows[lvl] if strategy == FGDC else torch.zeros_like(flows[lvl])
                contexts.append(self.compensators[str(lvl)](ref[lvl], base, offsets[lvl]))
            self.counters[(lvl, strategy)] += 1
        return contexts


def generate_hybrid_contexts(gen: HybridContextGenerator, ref, flows, offsets):
    return gen(ref, flows, offsets)


__all__ = [
    "DC", "FGDC", "FLOW", "ConfigurationError", "CurrentFeature", "DeformCompensation",
    "FeaturePyramid", "HybridContextGenerator", "OffsetEstimator", "extract_reference_pyramid",
    "generate_hybrid_contexts",
]
