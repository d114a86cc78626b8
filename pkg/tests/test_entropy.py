import math

import numpy as np
import pytest
import torch

from hybridvc.codec.entropy import (
    PROB_FLOOR, FactorizedPrior, GaussianConditional, estimate_rate, gaussian_likelihood, merge_tables,
)
from hybridvc.codec.rans import range_decode, range_encode


def fit_prior(samples: torch.Tensor, steps=300) -> FactorizedPrior:
    torch.manual_seed(0)
    prior = FactorizedPrior(samples.shape[1])
    opt = torch.optim.Adam(prior.parameters(), lr=1e-2)
    for _ in range(steps):
        loss = estimate_rate(prior.likelihood(samples))
        opt.zero_grad()
        loss.backward()
        opt.step()
    prior.invalidate()
    return prior


def laplace_latents(shape, scales, seed=0):
    gen = np.random.default_rng(seed)
    y = gen.laplace(0, 1, shape) * np.asarray(scales).reshape(1, -1, 1, 1)
    return torch.from_numpy(np.rint(y)).float()


class TestEstimateRate:
    def test_matches_log_oracle(self):
        p = torch.tensor([0.5, 0.25, 1e-9, 1.0])
        expected = 1 + 2 - math.log2(PROB_FLOOR) + 0
        assert estimate_rate(p).item() == pytest.approx(expected, rel=1e-6)

    def test_floor_gradient_passes_towards_bound(self):
        p = torch.tensor([1e-9], requires_grad=True)
        estimate_rate(p).backward()
        assert p.grad.item() < 0


class TestFactorizedPrior:
    def test_likelihood_sums_to_one(self):
        prior = FactorizedPrior(3)
        grid = torch.arange(-200, 201, dtype=torch.float32).view(1, 1, 1, -1).expand(1, 3, 1, -1)
        total = prior.likelihood(grid).sum(-1)
        assert torch.allclose(total, torch.ones_like(total), atol=1e-4)

    def test_measured_bytes_match_estimate(self):
        y = laplace_latents((4, 4, 32, 32), [0.5, 1.0, 3.0, 8.0])
        prior = fit_prior(y)
        est_bytes = estimate_rate(prior.likelihood(y)).item() / 8
        data = range_encode(y.numpy().astype(np.int64), prior.indexes(y.shape), prior.tables())
        assert abs(len(data) - est_bytes) <= 0.02 * est_bytes + 32
        dec = range_decode(data, prior.indexes(y.shape), prior.tables())
        assert np.array_equal(dec, y.numpy().astype(np.int64).reshape(-1))

    def test_tables_cached_until_invalidated(self):
        prior = FactorizedPrior(2)
        t1 = prior.tables()
        assert prior.tables() is t1
        prior.invalidate()
        assert prior.tables() is not t1


class TestGaussianConditional:
    def test_scale_table(self):
        gc = GaussianConditional()
        assert gc.scale_table[0] == pytest.approx(0.11)
        assert gc.scale_table[-1] >= 64.0
        ratios = np.diff(np.log(gc.scale_table))
        assert np.allclose(ratios, math.log(1.05))

    def test_index_nearest_in_log_domain(self):
        gc = GaussianConditional()
        s = torch.tensor(gc.scale_table[10] * 1.02)
        assert gc.indexes(s)[0] == 10
        assert gc.indexes(torch.tensor(1e-5))[0] == 0
        assert gc.indexes(torch.tensor(1e5))[0] == len(gc.scale_table) - 1

    def test_likelihood_oracle(self):
        from scipy.stats import norm

        v = torch.tensor([0.0, 1.0, -3.0], dtype=torch.float64)
        s = torch.tensor([0.5, 2.0, 1.5], dtype=torch.float64)
        ref = norm.cdf((v.numpy() + 0.5) / s.numpy()) - norm.cdf((v.numpy() - 0.5) / s.numpy())
        assert np.allclose(gaussian_likelihood(v, s).numpy(), ref, atol=1e-12)

    def test_measured_bytes_match_estimate(self):
        gen = torch.Generator().manual_seed(5)
        scales = torch.exp(torch.empty(1, 8, 32, 32).uniform_(-1.5, 2.5, generator=gen))
        y = torch.round(torch.randn(scales.shape, generator=gen) * scales)
        gc = GaussianConditional()
        est = estimate_rate(gaussian_likelihood(y, scales)).item() / 8
        idx = gc.indexes(scales)
        data = range_encode(y.numpy().astype(np.int64), idx, gc.tables)
        assert abs(len(data) - est) <= 0.02 * est + 32
        assert np.array_equal(range_decode(data, idx, gc.tables), y.numpy().astype(np.int64).reshape(-1))


def test_merge_tables_shifts():
    a, b = FactorizedPrior(2).tables(), FactorizedPrior(3).tables()
    bank, shifts = merge_tables([a, b])
    assert shifts == [0, 2] and len(bank) == 5
