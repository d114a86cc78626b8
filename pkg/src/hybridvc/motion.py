"""Optical flow estimation, motion-field coding and flow pyramids."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec.bitstream import CompatibilityError
from .codec.entropy import FactorizedPrior, LatentCode, estimate_rate
from .layers import BilinearUp, act, conv
from .tensor_ops import ContractError, bilinear_warp, flow_downsample, quantize_ste


class _FlowLevel(nn.Module):
    def __init__(self):
        super().__init__()
        widths = (8, 32, 64, 32, 16)
        layers = []
        for cin, cout in zip(widths, widths[1:]):
            layers += [conv(cin, cout, 5), act()]
        layers.append(conv(widths[-1], 2, 5))
        self.net = nn.Sequential(*layers)

    def forward(self, cur, ref, flow):
        return flow + self.net(torch.cat((cur, bilinear_warp(ref, flow), flow), dim=1))


class FlowEstimator(nn.Module):
    """Three-level coarse-to-fine flow network.

    Each level warps the reference with the upsampled coarser flow and
    predicts a residual from (current, warped reference, flow).
    """

    levels = 3

    def __init__(self):
        super().__init__()
        self.nets = nn.ModuleList(_FlowLevel() for _ in range(self.levels))

    def forward(self, x_t: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
        if x_t.shape != x_ref.shape:
            raise ContractError(f"frame shapes differ: {tuple(x_t.shape)} vs {tuple(x_ref.shape)}")
        h, w = x_t.shape[-2:]
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise ContractError(f"frame dims {h}x{w} must be divisible by {div}")
        curs, refs = [x_t], [x_ref]
        for _ in range(self.levels - 1):
            curs.append(F.avg_pool2d(curs[-1], 2))
            refs.append(F.avg_pool2d(refs[-1], 2))
        flow = torch.zeros_like(curs[-1][:, :2])
        for lvl in reversed(range(self.levels)):
            if lvl != self.levels - 1:
                flow = 2 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)
            flow = self.nets[lvl](curs[lvl], refs[lvl], flow)
        return flow


class FieldCodec(nn.Module):
    """Autoencoder with a factorized prior for dense fields (flows or offsets).

    The encoder downsamples by ``2**stages``; the decoder uses bilinear
    upsampling and replicate padding so that a zero latent decodes to a
    constant field.
    """

    def __init__(self, channels: int, latent: int = 64, hidden: int = 64, substream: str = "flow",
                 stages: int = 4):
        super().__init__()
        self.channels = channels
        self.substream = substream
        self.stages = stages
        self.model_hash: bytes | None = None
        enc = [conv(channels, hidden, 3, 2), act()]
        dec = []
        for _ in range(stages - 1):
            enc += [conv(hidden, hidden, 3, 2), act()]
        enc.append(conv(hidden, latent, 3))
        dec += [BilinearUp(latent, hidden), act()]
        for _ in range(stages - 1):
            dec += [BilinearUp(hidden, hidden), act()]
        dec.append(conv(hidden, channels, 3, padding_mode="replicate"))
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)
        self.prior = FactorizedPrior(latent)

    def forward(self, field: torch.Tensor, mode: str = "round"):
        """Training path: returns (reconstruction, rate in bits, quantized latent)."""
        y_hat = quantize_ste(self.encoder(field), mode)
        bits = estimate_rate(self.prior.likelihood(y_hat))
        return self.decoder(y_hat), bits, y_hat

    @torch.no_grad()
    def encode(self, field: torch.Tensor) -> tuple[LatentCode, torch.Tensor, float]:
        y_hat = quantize_ste(self.encoder(field), "round")
        bits = estimate_rate(self.prior.likelihood(y_hat)).item()
        code = LatentCode(self.substream, y_hat.numpy().astype(np.int64), tuple(y_hat.shape),
                          model_hash=self.model_hash)
        return code, self.decode(code), bits

    @torch.no_grad()
    def decode(self, code: LatentCode) -> torch.Tensor:
        if code.model_hash is not None and self.model_hash is not None and code.model_hash != self.model_hash:
            raise CompatibilityError("latent was produced by a different model configuration")
        if code.shape[1] != self.prior.channels:
            raise ContractError(f"latent has {code.shape[1]} channels, codec expects {self.prior.channels}")
        return self.decoder(code.tensor())

    def latent_shape(self, batch: int, h: int, w: int) -> tuple[int, int, int, int]:
        f = 2 ** self.stages
        return (batch, self.prior.channels, h // f, w // f)


def estimate_flow(net: FlowEstimator, x_t: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
    return net(x_t, x_ref)


def build_flow_pyramid(flow: torch.Tensor) -> list[torch.Tensor]:
    """Flows at original, 1/2 and 1/4 resolution (level l+1 pools level l)."""
    levels = [flow]
    for _ in range(2):
        levels.append(flow_downsample(levels[-1], 2))
    return levels
