"""Probability models for quantized latents and their coding tables.

Two models are used:

* :class:`FactorizedPrior` - a learned per-channel univariate density (the
  monotone-MLP cumulative of Balle et al.), for motion latents and the
  hyper-latent;
* :class:`GaussianConditional` - zero-mean Gaussians on ``y - mean`` whose
  scales come from the hyper-decoder, coded through a fixed log-spaced scale
  table so that encoder and decoder pick identical CDFs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rans import CdfTables, pmf_to_quantized_cdf

PROB_FLOOR = 2.0 ** -15
SCALE_FLOOR = 0.11
TAIL_MASS = 1e-9


class _LowerBound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        # let gradients through when they push the value back above the bound
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


def estimate_rate(likelihoods: torch.Tensor) -> torch.Tensor:
    """Total bits ``sum(-log2 p)`` with each probability floored at 2^-15."""
    return -torch.log2(lower_bound(likelihoods, PROB_FLOOR)).sum()


class FactorizedPrior(nn.Module):
    """Learned factorized density over integer-quantized latents."""

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
        self._tables: CdfTables | None = None

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: channels x 1 x n
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m).to(x.dtype), x) + b.to(x.dtype)
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i].to(x.dtype)) * torch.tanh(x)
        return x

    def likelihood(self, y_hat: torch.Tensor) -> torch.Tensor:
        """P(symbol) of every element of an integer-valued B x C x H x W tensor."""
        b, c, h, w = y_hat.shape
        v = y_hat.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits(v - 0.5)
        upper = self._logits(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return lik.reshape(c, b, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def build_tables(self, search: int = 512) -> CdfTables:
        """Quantized CDF per channel over the support holding all but ~1e-9 mass."""
        grid = torch.arange(-search, search + 1, dtype=torch.float64)
        cdf_lo = torch.sigmoid(self._logits(grid.view(1, 1, -1).expand(self.channels, 1, -1) - 0.5))
        cdf_lo = cdf_lo.view(self.channels, -1).numpy()
        cdf_hi = torch.sigmoid(self._logits(grid.view(1, 1, -1).expand(self.channels, 1, -1) + 0.5))
        cdf_hi = cdf_hi.view(self.channels, -1).numpy()
        cdfs, offsets = [], []
        for c in range(self.channels):
            inside = np.nonzero((cdf_hi[c] > TAIL_MASS) & (cdf_lo[c] < 1 - TAIL_MASS))[0]
            lo, hi = (inside[0], inside[-1]) if len(inside) else (search, search)
            pmf = np.clip(cdf_hi[c, lo:hi + 1] - cdf_lo[c, lo:hi + 1], 0, None)
            tail = max(cdf_lo[c, lo] + 1 - cdf_hi[c, hi], 0.0)
            cdfs.append(pmf_to_quantized_cdf(np.append(pmf, tail)))
            offsets.append(int(lo - search))
        self._tables = CdfTables(cdfs, offsets)
        return self._tables

    def tables(self) -> CdfTables:
        if self._tables is None:
            self.build_tables()
        return self._tables

    def invalidate(self) -> None:
        self._tables = None

    def indexes(self, shape) -> np.ndarray:
        b, c, h, w = shape
        return np.broadcast_to(np.arange(c).reshape(1, c, 1, 1), (b, c, h, w)).reshape(-1)


def _standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_likelihood(values: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """P of integer-centred ``values`` (= y_hat - mean) under N(0, scale) bins."""
    v = values.abs()
    upper = _standard_normal_cdf((0.5 - v) / scales)
    lower = _standard_normal_cdf((-0.5 - v) / scales)
    return upper - lower


class GaussianConditional:
    """Scale-table Gaussian coder for ``symbols = round(y - mean)``."""

    def __init__(self, min_scale: float = SCALE_FLOOR, max_scale: float = 64.0, ratio: float = 1.05):
        self.log_min = math.log(min_scale)
        self.log_ratio = math.log(ratio)
        n = int(math.ceil((math.log(max_scale) - self.log_min) / self.log_ratio)) + 1
        self.scale_table = [math.exp(self.log_min + i * self.log_ratio) for i in range(n)]
        cdfs, offsets = [], []
        for s in self.scale_table:
            half = int(math.ceil(6.2 * s)) + 1
            k = np.arange(-half, half + 1, dtype=np.float64)
            upper = np.array([0.5 * math.erfc(-(v + 0.5) / s / math.sqrt(2)) for v in k])
            lower = np.array([0.5 * math.erfc(-(v - 0.5) / s / math.sqrt(2)) for v in k])
            pmf = upper - lower
            tail = max(1.0 - pmf.sum(), 0.0)
            cdfs.append(pmf_to_quantized_cdf(np.append(pmf, tail)))
            offsets.append(-half)
        self.tables = CdfTables(cdfs, offsets)

    def indexes(self, scales: torch.Tensor) -> np.ndarray:
        s = scales.detach().double().clamp_min(SCALE_FLOOR).numpy().reshape(-1)
        idx = np.rint((np.log(s) - self.log_min) / self.log_ratio)
        return np.clip(idx, 0, len(self.scale_table) - 1).astype(np.int64)


@dataclass
class LatentCode:
    """Integer symbols of one coded latent plus what is needed to decode them."""
    substream: str
    symbols: np.ndarray
    shape: tuple[int, ...]
    side_symbols: np.ndarray | None = None
    side_shape: tuple[int, ...] | None = None
    model_hash: bytes | None = None

    def __post_init__(self):
        if self.substream not in ("flow", "offset", "frame", "intra"):
            raise ValueError(f"unknown substream {self.substream!r}")
        self.symbols = np.asarray(self.symbols, dtype=np.int64).reshape(self.shape)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.symbols).to(dtype)


def merge_tables(banks: list[CdfTables]) -> tuple[CdfTables, list[int]]:
    """Concatenate table banks; returns the bank and each input's index shift."""
    cdfs, offsets, shifts = [], [], []
    for bank in banks:
        shifts.append(len(cdfs))
        cdfs.extend(bank.cdfs)
        offsets.extend(bank.offsets)
    return CdfTables(cdfs, offsets), shifts
