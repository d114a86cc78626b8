"""Bit-free refinement of the generated temporal contexts.

Everything here consumes decoded quantities only (reference features,
decoded flow and offsets, generated contexts), so encoder and decoder run
it identically and it never touches the bitstream.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CodecConfig
from .hybrid_context import DeformCompensation
from .layers import act, conv, zero_init
from .tensor_ops import ContractError, mean_displacement, offset_upsample


class _OffsetHead(nn.Sequential):
    def __init__(self, cin, cout, hidden=64):
        super().__init__(conv(cin, hidden), act(), conv(hidden, hidden), act(), zero_init(conv(hidden, cout)))


class LocalEnhancer(nn.Module):
    """Progressive flow-guided deformable alignment, smallest scale first.

    Offsets found at one scale are upsampled to guide the next; at the
    original scale the base displacement also includes the mean decoded
    offset, and the decoded offset field itself is an input.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        spec = cfg.kernel
        ch = cfg.channels
        oc = spec.offset_channels
        self.spec = spec
        self.enabled = cfg.ablation.local_enhance
        self.heads = nn.ModuleDict()
        self.align = nn.ModuleDict()
        inputs = {2: 2 * ch.c2 + 2, 1: 2 * ch.c1 + 2 + oc, 0: 2 * ch.c0 + 2 * oc}
        for lvl, width in ((0, ch.c0), (1, ch.c1), (2, ch.c2)):
            if self.enabled[lvl]:
                self.heads[str(lvl)] = _OffsetHead(inputs[lvl], oc)
                self.align[str(lvl)] = DeformCompensation(width, spec)
        self.order: list[int] = []

    def forward(self, contexts, ref, flows, decoded_offsets=None):
        """Returns enhanced contexts (level 0..2) and the derived offset fields."""
        b = ref[0].shape[0]
        oc = self.spec.offset_channels
        self.order = []
        out = list(contexts)
        derived: list[torch.Tensor | None] = [None, None, None]
        guide = None
        for lvl in (2, 1, 0):
            h, w = ref[lvl].shape[-2:]
            if lvl == 0:
                o_bar = decoded_offsets if decoded_offsets is not None else ref[0].new_zeros(b, oc, h, w)
            if self.enabled[lvl]:
                self.order.append(lvl)
                if lvl == 2:
                    feats = (contexts[2], ref[2], flows[2])
                elif lvl == 1:
                    feats = (contexts[1], ref[1], flows[1], guide)
                else:
                    feats = (contexts[0], ref[0], o_bar, guide)
                offsets = self.heads[str(lvl)](torch.cat(feats, dim=1))
                base = flows[lvl]
                if lvl == 0:
                    base = base + mean_displacement(o_bar, self.spec)
                out[lvl] = self.align[str(lvl)](ref[lvl], base, offsets)
            else:
                offsets = ref[lvl].new_zeros(b, oc, h, w)
            derived[lvl] = offsets
            if lvl > 0:
                guide = offset_upsample(offsets, 2, self.spec)
        return out, derived


class ChannelLayerNorm(nn.Module):
    """LayerNorm over channels at each pixel."""

    def __init__(self, ch):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        return (x - mu) / torch.sqrt(var + 1e-5) * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class GatedFeedForward(nn.Module):
    """Gated-Dconv feed-forward: two projections, depthwise 3x3 mixing, GELU gate."""

    def __init__(self, ch, expansion=2.0):
        super().__init__()
        hidden = int(ch * expansion)
        self.project_in = nn.Conv2d(ch, 2 * hidden, 1)
        self.dwconv = nn.Conv2d(2 * hidden, 2 * hidden, 3, 1, 1, groups=2 * hidden)
        self.project_out = nn.Conv2d(hidden, ch, 1)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class CrossAttention(nn.Module):
    """Channel-transposed multi-head attention: queries from the context,
    keys and values from the reference.  The attention map is ``d x d`` per
    head, so cost is linear in the number of pixels."""

    def __init__(self, ch, heads):
        super().__init__()
        if ch % heads:
            raise ContractError(f"{ch} channels not divisible by {heads} heads")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.q = nn.Sequential(nn.Conv2d(ch, ch, 1), nn.Conv2d(ch, ch, 3, 1, 1, groups=ch))
        self.kv = nn.Sequential(nn.Conv2d(ch, 2 * ch, 1), nn.Conv2d(2 * ch, 2 * ch, 3, 1, 1, groups=2 * ch))
        self.project_out = nn.Conv2d(ch, ch, 1)
        self.last_attention: torch.Tensor | None = None

    def project_v(self, ref):
        return self.kv(ref).chunk(2, dim=1)[1]

    def attend(self, x, ref):
        """Attention output before the output projection."""
        b, c, h, w = x.shape
        q = self.q(x)
        k, v = self.kv(ref).chunk(2, dim=1)
        heads = self.heads
        q, k, v = (t.reshape(b, heads, c // heads, h * w) for t in (q, k, v))
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        self.last_attention = attn.detach()
        return (attn @ v).reshape(b, c, h, w)

    def forward(self, x, ref):
        return self.project_out(self.attend(x, ref))


class CrossAttentionBlock(nn.Module):
    def __init__(self, ch, heads=4, expansion=2.0):
        super().__init__()
        self.norm_q = ChannelLayerNorm(ch)
        self.norm_kv = ChannelLayerNorm(ch)
        self.attn = CrossAttention(ch, heads)
        self.norm_ff = ChannelLayerNorm(ch)
        self.ffn = GatedFeedForward(ch, expansion)

    def forward(self, x, ref):
        x = x + self.attn(self.norm_q(x), self.norm_kv(ref))
        return x + self.ffn(self.norm_ff(x))


class GlobalEnhancer(nn.Module):
    """Stack of cross-attention blocks on the smallest-scale context."""

    def __init__(self, ch, heads=4, blocks=4, expansion=2.0):
        super().__init__()
        self.blocks = nn.ModuleList(CrossAttentionBlock(ch, heads, expansion) for _ in range(blocks))

    def forward(self, context, ref):
        if context.shape != ref.shape:
            raise ContractError(f"context {tuple(context.shape)} and reference {tuple(ref.shape)} differ")
        x = context
        for blk in self.blocks:
            x = blk(x, ref)
        return x


class ChannelSpatialFusion(nn.Module):
    """CBAM-style fusion of the local and global smallest-scale contexts."""

    def __init__(self, ch, reduction=4, spatial_kernel=7):
        super().__init__()
        both = 2 * ch
        self.mlp = nn.Sequential(nn.Conv2d(both, both // reduction, 1), nn.ReLU(),
                                 nn.Conv2d(both // reduction, both, 1))
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, 1, spatial_kernel // 2)
        self.out = conv(both, ch)
        self.last_gates: tuple[torch.Tensor, torch.Tensor] | None = None

    def forward(self, local, global_):
        if local.shape != global_.shape:
            raise ContractError("local and global contexts differ in shape")
        x = torch.cat((local, global_), dim=1)
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        channel_gate = torch.sigmoid(self.mlp(avg) + self.mlp(mx))
        x = x * channel_gate
        maps = torch.cat((x.mean(1, keepdim=True), x.amax(1, keepdim=True)), dim=1)
        spatial_gate = torch.sigmoid(self.spatial(maps))
        x = x * spatial_gate
        self.last_gates = (channel_gate.detach(), spatial_gate.detach())
        return self.out(x)


class HierarchicalFusion(nn.Module):
    """Top-down fusion: each level is refined with the upsampled coarser result."""

    def __init__(self, c0, c1, c2):
        super().__init__()
        self.up2 = nn.ConvTranspose2d(c2, c2, 4, 2, 1)
        self.fuse1 = nn.Sequential(conv(c1 + c2, c1), act(), conv(c1, c1))
        self.up1 = nn.ConvTranspose2d(c1, c1, 4, 2, 1)
        self.fuse0 = nn.Sequential(conv(c0 + c1, c0), act(), conv(c0, c0))

    def forward(self, c0, c1, c2):
        f1 = self.fuse1(torch.cat((c1, self.up2(c2)), dim=1))
        f0 = self.fuse0(torch.cat((c0, self.up1(f1)), dim=1))
        return f0, f1, c2


class ContextEnhancer(nn.Module):
    """Local + global enhancement and hierarchical fusion, per the ablation toggles."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.channels
        ab = cfg.ablation
        self.local = LocalEnhancer(cfg) if any(ab.local_enhance) else None
        self.cross_attention = ab.cross_attention
        if ab.cross_attention:
            att = cfg.attention
            self.global_ = GlobalEnhancer(ch.c2, att.heads, att.blocks, att.ffn_expansion)
        self.fuse_small = ChannelSpatialFusion(ch.c2) if ab.local_enhance[2] and ab.cross_attention else None
        self.hierarchy = HierarchicalFusion(ch.c0, ch.c1, ch.c2)

    def forward(self, contexts, ref, flows, decoded_offsets=None):
        """Returns the final contexts and a dict with every intermediate."""
        local, derived = (self.local(contexts, ref, flows, decoded_offsets) if self.local
                          else (list(contexts), None))
        small = local[2]
        global_ = None
        if self.cross_attention:
            global_ = self.global_(contexts[2], ref[2])
            small = self.fuse_small(local[2], global_) if self.fuse_small is not None else global_
        final = self.hierarchy(local[0], local[1], small)
        return list(final), {"local": local, "global": global_, "fused_small": small,
                             "offsets": derived}
