"""Contextual transforms, the hyperprior and the intra-frame codec."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..layers import ResBlock, SubpelUp, act, conv
from ..tensor_ops import ContractError, quantize_ste
from .entropy import (
    SCALE_FLOOR, FactorizedPrior, GaussianConditional, estimate_rate, gaussian_likelihood, lower_bound,
)


def clamp_unit(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1]; in training the gradient passes through unchanged."""
    clamped = x.clamp(0, 1)
    if torch.is_grad_enabled() and x.requires_grad:
        return x + (clamped - x).detach()
    return clamped


class ContextualEncoder(nn.Module):
    """Four stride-2 stages; contexts join at full, 1/2 and 1/4 resolution."""

    def __init__(self, c0, c1, c2, latent, hidden=96):
        super().__init__()
        self.stage1 = nn.Sequential(conv(3 + c0, hidden, 3, 2), ResBlock(hidden))
        self.stage2 = nn.Sequential(conv(hidden + c1, hidden, 3, 2), ResBlock(hidden))
        self.stage3 = nn.Sequential(conv(hidden + c2, hidden, 3, 2), ResBlock(hidden))
        self.stage4 = conv(hidden, latent, 3, 2)

    def forward(self, x, contexts):
        h, w = x.shape[-2:]
        if h % 64 or w % 64:
            raise ContractError(f"frame {h}x{w} must be padded to a multiple of 64")
        c0, c1, c2 = contexts
        y = self.stage1(torch.cat((x, c0), dim=1))
        y = self.stage2(torch.cat((y, c1), dim=1))
        y = self.stage3(torch.cat((y, c2), dim=1))
        return self.stage4(y)


class ContextualDecoder(nn.Module):
    """Mirror of the encoder; emits the frame and the feature propagated to the next frame."""

    def __init__(self, c0, c1, c2, latent, hidden=96):
        super().__init__()
        self.up1 = nn.Sequential(SubpelUp(latent, hidden), ResBlock(hidden))
        self.up2 = SubpelUp(hidden, hidden)
        self.stage2 = nn.Sequential(conv(hidden + c2, hidden), ResBlock(hidden))
        self.up3 = SubpelUp(hidden, hidden)
        self.stage3 = nn.Sequential(conv(hidden + c1, hidden), ResBlock(hidden))
        self.up4 = SubpelUp(hidden, c0)
        self.stage4 = nn.Sequential(conv(2 * c0, c0), ResBlock(c0), ResBlock(c0))
        self.head = nn.Sequential(act(), conv(c0, 3))

    def forward(self, y_hat, contexts):
        c0, c1, c2 = contexts
        if y_hat.shape[-2] * 16 != c0.shape[-2] or y_hat.shape[-1] * 16 != c0.shape[-1]:
            raise ContractError(f"latent {tuple(y_hat.shape)} does not match contexts {tuple(c0.shape)}")
        f = self.up2(self.up1(y_hat))
        f = self.up3(self.stage2(torch.cat((f, c2), dim=1)))
        f = self.up4(self.stage3(torch.cat((f, c1), dim=1)))
        feature = self.stage4(torch.cat((f, c0), dim=1))
        return clamp_unit(self.head(feature)), feature


class HyperPrior(nn.Module):
    """Side latent z -> per-element Gaussian mean and scale of y."""

    def __init__(self, latent, hyper):
        super().__init__()
        self.latent = latent
        self.encoder = nn.Sequential(
            conv(latent, hyper), act(),
            conv(hyper, hyper, 3, 2), act(),
            conv(hyper, hyper, 3, 2),
        )
        self.decoder = nn.Sequential(
            SubpelUp(hyper, hyper), act(),
            SubpelUp(hyper, hyper), act(),
            conv(hyper, 2 * latent),
        )
        self.prior = FactorizedPrior(hyper)
        self.gaussian = GaussianConditional()

    def params(self, z_hat):
        means, raw = self.decoder(z_hat).chunk(2, dim=1)
        scales = lower_bound(F.softplus(raw), SCALE_FLOOR)
        return means, scales

    def forward(self, y, mode="round"):
        """Training path: quantized y, its rate and the side rate (bits)."""
        z_hat = quantize_ste(self.encoder(y), mode)
        side_bits = estimate_rate(self.prior.likelihood(z_hat))
        means, scales = self.params(z_hat)
        residual = quantize_ste(y - means, mode)
        bits = estimate_rate(gaussian_likelihood(residual, scales))
        return residual + means, bits, side_bits, (means, scales)


def hyper_rate_model(hp: HyperPrior, y: torch.Tensor):
    """(means, scales, side_rate_bits) for latent ``y``."""
    z_hat = quantize_ste(hp.encoder(y), "round")
    means, scales = hp.params(z_hat)
    return means, scales, estimate_rate(hp.prior.likelihood(z_hat))


class IntraCodec(nn.Module):
    """Small hyperprior image codec producing a frame and an initial feature."""

    def __init__(self, c0, latent, hyper, hidden=96):
        super().__init__()
        self.encoder = nn.Sequential(
            conv(3, hidden, 3, 2), ResBlock(hidden),
            conv(hidden, hidden, 3, 2), ResBlock(hidden),
            conv(hidden, hidden, 3, 2), ResBlock(hidden),
            conv(hidden, latent, 3, 2),
        )
        self.decoder = nn.Sequential(
            SubpelUp(latent, hidden), ResBlock(hidden),
            SubpelUp(hidden, hidden), ResBlock(hidden),
            SubpelUp(hidden, hidden), ResBlock(hidden),
            SubpelUp(hidden, c0), ResBlock(c0),
        )
        self.head = nn.Sequential(act(), conv(c0, 3))
        self.hyper = HyperPrior(latent, hyper)

    def synthesize(self, y_hat):
        feature = self.decoder(y_hat)
        return clamp_unit(self.head(feature)), feature

    def forward(self, x, mode="round"):
        y_hat, bits, side_bits, _ = self.hyper(self.encoder(x), mode)
        recon, feature = self.synthesize(y_hat)
        return {"recon": recon, "feature": feature, "bits_frame": bits, "bits_hyper": side_bits}
