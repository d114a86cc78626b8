from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv(cin, cout, k=3, stride=1, padding_mode="zeros"):
    return nn.Conv2d(cin, cout, k, stride, k // 2, padding_mode=padding_mode)


def act():
    return nn.LeakyReLU(0.1)


class ResBlock(nn.Module):
    def __init__(self, ch, padding_mode="zeros"):
        super().__init__()
        self.conv1 = conv(ch, ch, padding_mode=padding_mode)
        self.conv2 = conv(ch, ch, padding_mode=padding_mode)
        self.act = act()

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(self.act(x))))


class SubpelUp(nn.Module):
    """2x upsampling by sub-pixel convolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv(cin, cout * 4)

    def forward(self, x):
        return F.pixel_shuffle(self.conv(x), 2)


class BilinearUp(nn.Module):
    """2x bilinear upsampling then a replicate-padded conv.

    Maps constant fields to constant fields, which keeps decoded motion free
    of border artefacts.
    """

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv(cin, cout, padding_mode="replicate")

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))


def zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def pad_to_multiple(x: torch.Tensor, multiple: int = 64) -> torch.Tensor:
    """Reflect-pad bottom/right to a multiple (replicate when the frame is too small to reflect)."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def crop(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return x[..., :h, :w]
