"""Differentiable sampling primitives shared by every network in the codec.

Conventions, fixed for the whole package:

* flows are ``B x 2 x H x W`` tensors in pixels of the map they act on,
  channel 0 horizontal (x), channel 1 vertical (y);
* bilinear sampling uses ``align_corners=False`` and replicates the border;
* deformable residual fields lay out displacements as ``(group, tap, xy)``
  followed by mask pre-activations as ``(group, tap)``; taps enumerate the
  ``K x K`` grid row-major, centred at zero.  This order is part of the
  bitstream contract because offsets are entropy coded in channel order.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class ContractError(ValueError):
    """Raised when tensor shapes violate an operator's contract."""


@dataclass(frozen=True)
class DeformKernelSpec:
    kernel_size: int = 3
    groups: int = 8
    modulated: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ContractError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.groups < 1:
            raise ContractError(f"groups must be >= 1, got {self.groups}")

    @property
    def taps(self) -> int:
        return self.kernel_size * self.kernel_size

    @property
    def displacement_channels(self) -> int:
        return 2 * self.groups * self.taps

    @property
    def mask_channels(self) -> int:
        return self.groups * self.taps if self.modulated else 0

    @property
    def offset_channels(self) -> int:
        return self.displacement_channels + self.mask_channels

    def tap_positions(self) -> list[tuple[int, int]]:
        """(dx, dy) of every tap, row-major over the kernel window."""
        r = self.kernel_size // 2
        return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

    def check_channels(self, channels: int) -> None:
        if channels % self.groups:
            raise ContractError(f"{channels} channels not divisible by {self.groups} groups")


def _check_flow(x: torch.Tensor, flow: torch.Tensor) -> None:
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ContractError(f"flow must be B x 2 x H x W, got {tuple(flow.shape)}")
    if x.dim() != 4 or x.shape[0] != flow.shape[0] or x.shape[-2:] != flow.shape[-2:]:
        raise ContractError(
            f"flow {tuple(flow.shape)} does not match feature map {tuple(x.shape)}")


def _base_grid(h: int, w: int, ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(h, dtype=ref.dtype, device=ref.device).view(h, 1).expand(h, w)
    xs = torch.arange(w, dtype=ref.dtype, device=ref.device).view(1, w).expand(h, w)
    return xs, ys


def sample_bilinear(x: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of ``x`` (N x C x H x W) at pixel coordinates ``px, py`` (N x ...).

    Coordinates are clamped to the frame, which replicates the border.  Works
    in pixel units directly so that integer displacements are exact.
    """
    n, c, h, w = x.shape
    out_shape = px.shape[1:]
    px = px.reshape(n, -1).clamp(0, w - 1)
    py = py.reshape(n, -1).clamp(0, h - 1)
    x0 = px.detach().floor()
    y0 = py.detach().floor()
    ax = (px - x0).unsqueeze(1)
    ay = (py - y0).unsqueeze(1)
    x0, y0 = x0.long(), y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = x.reshape(n, c, h * w)

    def tap(yy, xx):
        idx = (yy * w + xx).unsqueeze(1).expand(n, c, -1)
        return torch.gather(flat, 2, idx)

    top = tap(y0, x0) * (1 - ax) + tap(y0, x1) * ax
    bottom = tap(y1, x0) * (1 - ax) + tap(y1, x1) * ax
    out = top * (1 - ay) + bottom * ay
    return out.view(n, c, *out_shape)


def bilinear_warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at ``p + flow(p)`` for every pixel ``p``."""
    _check_flow(x, flow)
    b, _, h, w = x.shape
    xs, ys = _base_grid(h, w, flow)
    return sample_bilinear(x, xs + flow[:, 0], ys + flow[:, 1])


def flow_downsample(flow: torch.Tensor, factor: int) -> torch.Tensor:
    """Average-pool a flow by ``factor`` and rescale its pixel units."""
    if factor not in (1, 2, 4):
        raise ContractError(f"factor must be 2 or 4, got {factor}")
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ContractError(f"flow must be B x 2 x H x W, got {tuple(flow.shape)}")
    h, w = flow.shape[-2:]
    if h % factor or w % factor:
        raise ContractError(f"flow dims {h}x{w} not divisible by {factor}")
    if factor == 1:
        return flow
    return F.avg_pool2d(flow, factor) / factor


def offset_upsample(offsets: torch.Tensor, factor: int, spec: DeformKernelSpec) -> torch.Tensor:
    """Bilinearly upsample a residual offset field.

    Displacement channels are multiplied by ``factor`` (they are in pixels),
    mask pre-activations are resampled without scaling.
    """
    if factor != 2:
        raise ContractError(f"offset upsampling factor must be 2, got {factor}")
    if offsets.shape[1] != spec.offset_channels:
        raise ContractError(
            f"offset field has {offsets.shape[1]} channels, spec wants {spec.offset_channels}")
    up = F.interpolate(offsets, scale_factor=factor, mode="bilinear", align_corners=False)
    nd = spec.displacement_channels
    return torch.cat((up[:, :nd] * factor, up[:, nd:]), dim=1)


def mask_activation(raw: torch.Tensor) -> torch.Tensor:
    # 2*sigmoid puts the untrained (zero) pre-activation at a neutral 1.0
    return 2.0 * torch.sigmoid(raw)


def mean_displacement(offsets: torch.Tensor, spec: DeformKernelSpec) -> torch.Tensor:
    """Average displacement over all groups and taps, as a 2-channel field."""
    b, _, h, w = offsets.shape
    disp = offsets[:, :spec.displacement_channels].view(b, spec.groups * spec.taps, 2, h, w)
    return disp.mean(dim=1)


def deform_sample(x: torch.Tensor, base_flow: torch.Tensor, residual: torch.Tensor,
                  spec: DeformKernelSpec, weight: torch.Tensor,
                  bias: torch.Tensor | None = None) -> torch.Tensor:
    """Flow-guided modulated deformable convolution.

    Tap ``k`` of group ``g`` samples ``x`` at ``p + p_k + base_flow(p) +
    residual_{g,k}(p)``; samples are optionally scaled by the activated mask
    and combined by ``weight`` (``C_out x C_in x K x K``).  With
    ``base_flow = 0`` this is plain deformable convolution.
    """
    _check_flow(x, base_flow)
    b, c, h, w = x.shape
    spec.check_channels(c)
    if residual.shape != (b, spec.offset_channels, h, w):
        raise ContractError(
            f"residual {tuple(residual.shape)} inconsistent with spec "
            f"(want {(b, spec.offset_channels, h, w)})")
    k = spec.kernel_size
    if weight.shape[1:] != (c, k, k):
        raise ContractError(f"kernel weight {tuple(weight.shape)} incompatible with {c} channels, K={k}")
    g, t = spec.groups, spec.taps

    disp = residual[:, :spec.displacement_channels].view(b, g, t, 2, h, w)
    taps = torch.tensor(spec.tap_positions(), dtype=x.dtype, device=x.device)  # t x 2
    xs, ys = _base_grid(h, w, x)
    px = xs + base_flow[:, 0].view(b, 1, 1, h, w) + taps[:, 0].view(1, 1, t, 1, 1) + disp[:, :, :, 0]
    py = ys + base_flow[:, 1].view(b, 1, 1, h, w) + taps[:, 1].view(1, 1, t, 1, 1) + disp[:, :, :, 1]
    sampled = sample_bilinear(x.reshape(b * g, c // g, h, w),
                              px.reshape(b * g, t, h, w), py.reshape(b * g, t, h, w))
    sampled = sampled.view(b, g, c // g, t, h, w)
    if spec.modulated:
        mask = mask_activation(residual[:, spec.displacement_channels:]).view(b, g, 1, t, h, w)
        sampled = sampled * mask

    cols = sampled.reshape(b, c * t, h * w)
    out = torch.matmul(weight.reshape(weight.shape[0], c * t), cols).view(b, -1, h, w)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


def identity_deform_weight(channels: int, spec: DeformKernelSpec, dtype=torch.float32) -> torch.Tensor:
    """Kernel that copies each channel from the centre tap, zeros elsewhere."""
    k = spec.kernel_size
    weight = torch.zeros(channels, channels, k, k, dtype=dtype)
    idx = torch.arange(channels)
    weight[idx, idx, k // 2, k // 2] = 1.0
    return weight


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, y):
        return round_half_away(y)

    @staticmethod
    def backward(ctx, grad):
        return grad


def round_half_away(y: torch.Tensor) -> torch.Tensor:
    """Nearest integer, ties rounded away from zero."""
    return torch.sign(y) * torch.floor(torch.abs(y) + 0.5)


def quantize_ste(y: torch.Tensor, mode: str = "round") -> torch.Tensor:
    """Rounding with pass-through gradient, or additive uniform noise."""
    if mode == "round":
        return _RoundSTE.apply(y)
    if mode == "noise":
        return y + torch.empty_like(y).uniform_(-0.5, 0.5)
    raise ValueError(f"unknown quantization mode {mode!r}")
