"""Frame quality metrics and Bjontegaard rate difference."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
# five dyadic scales with a valid 11x11 window at the coarsest one
MS_SSIM_MIN_SIZE = 160  # coarsest of five scales is then 10 px; the window shrinks to fit


class MetricError(ValueError):
    pass


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a: torch.Tensor, b: torch.Tensor) -> float:
    _check_pair(a, b)
    return float(((a.double() - b.double()) ** 2).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for signals in [0, 1]; ``inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window(size, dtype, device):
    x = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * SIGMA ** 2))
    return g / g.sum()


def _ssim_terms(a, b):
    c = a.shape[1]
    g = _gaussian_window(min(WINDOW, *a.shape[-2:]), a.dtype, a.device)
    wx = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    wy = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, wx, groups=c), wy, groups=c)

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = blur(a), blur(b)
    s_aa = blur(a * a) - mu_a ** 2
    s_bb = blur(b * b) - mu_b ** 2
    s_ab = blur(a * b) - mu_a * mu_b
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return (lum * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def ms_ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable per-image MS-SSIM of N x C x H x W tensors in [0, 1]."""
    _check_pair(a, b)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    h, w = a.shape[-2:]
    if min(h, w) < MS_SSIM_MIN_SIZE:
        raise MetricError(f"MS-SSIM needs at least {MS_SSIM_MIN_SIZE} px per side, got {w}x{h}")
    weights = torch.tensor(MS_SSIM_WEIGHTS, dtype=a.dtype, device=a.device)
    values = []
    for level in range(len(MS_SSIM_WEIGHTS)):
        ssim, cs = _ssim_terms(a, b)
        values.append(torch.relu(ssim if level == len(MS_SSIM_WEIGHTS) - 1 else cs))
        if level < len(MS_SSIM_WEIGHTS) - 1:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
    stacked = torch.stack(values, dim=0)
    return torch.prod(stacked ** weights.view(-1, 1), dim=0)


def ms_ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(ms_ssim_torch(a.double(), b.double()).mean())


@dataclass
class RDCurve:
    rates: list[float]
    qualities: list[float]
    label: str = ""
    dataset: str = ""
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.rates) != len(self.qualities):
            raise MetricError("rates and qualities differ in length")
        if len(self.rates) < 4:
            raise MetricError(f"an RD curve needs at least 4 points, got {len(self.rates)}")
        order = np.argsort(self.rates)
        self.rates = [float(self.rates[i]) for i in order]
        self.qualities = [float(self.qualities[i]) for i in order]
        if any(r <= 0 for r in self.rates):
            raise MetricError("rates must be positive")
        if any(r1 <= r0 for r0, r1 in zip(self.rates, self.rates[1:])):
            raise MetricError("rates must be strictly increasing")
        if any(q1 < q0 for q0, q1 in zip(self.qualities, self.qualities[1:])):
            self.warnings.append(f"{self.label or 'curve'}: quality decreases with rate")


def _log_rate_interp(curve: RDCurve) -> PchipInterpolator:
    q = np.asarray(curve.qualities)
    r = np.log(np.asarray(curve.rates))
    order = np.argsort(q)
    q, r = q[order], r[order]
    if np.any(np.diff(q) <= 0):
        raise MetricError(f"{curve.label or 'curve'}: qualities must be distinct")
    return PchipInterpolator(q, r)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference (%) of ``test`` vs ``anchor`` at equal quality.

    Monotone piecewise-cubic fit of log-rate over quality, integrated over the
    overlapping quality range.  Negative means the test curve saves bits.
    """
    lo = max(min(anchor.qualities), min(test.qualities))
    hi = min(max(anchor.qualities), max(test.qualities))
    if hi <= lo:
        raise MetricError("RD curves have no overlapping quality range")
    fa, ft = _log_rate_interp(anchor), _log_rate_interp(test)
    diff = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float((math.exp(diff) - 1.0) * 100.0)
