import copy
import inspect

import pytest
import torch

from hybridvc.config import CodecConfig
from hybridvc.context_enhance import (
    ChannelSpatialFusion, ContextEnhancer, CrossAttention, CrossAttentionBlock, GatedFeedForward,
    GlobalEnhancer, HierarchicalFusion, LocalEnhancer,
)
from hybridvc.motion import build_flow_pyramid
from hybridvc.tensor_ops import ContractError, bilinear_warp

from helpers import fd_relative_error


def _inputs(cfg, size=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    ch = cfg.channels
    ref = [torch.randn(1, c, size >> l, size >> l, generator=gen) for l, c in enumerate((ch.c0, ch.c1, ch.c2))]
    ctx = [torch.randn(r.shape, generator=gen) for r in ref]
    flows = build_flow_pyramid(2 * torch.randn(1, 2, size, size, generator=gen))
    return ctx, ref, flows


def _perturb(module, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen))
    return module


class TestLocalEnhancer:
    def test_neutral_at_init_is_flow_warp(self):
        torch.manual_seed(0)
        cfg = CodecConfig().with_preset("J")
        local = LocalEnhancer(cfg)
        ctx, ref, flows = _inputs(cfg)
        out, derived = local(ctx, ref, flows)
        for lvl in range(3):
            assert (out[lvl] - bilinear_warp(ref[lvl], flows[lvl])).abs().max() <= 1e-5
            assert torch.equal(derived[lvl], torch.zeros_like(derived[lvl]))

    def test_order_smallest_first(self):
        cfg = CodecConfig().with_preset("J")
        local = LocalEnhancer(cfg)
        local(*_inputs(cfg))
        assert local.order == [2, 1, 0]

    @pytest.mark.parametrize("preset,levels", [("G", [2]), ("H", [2]), ("I", [2, 1]), ("J", [2, 1, 0])])
    def test_enabled_levels(self, preset, levels):
        cfg = CodecConfig().with_preset(preset)
        local = LocalEnhancer(cfg)
        ctx, ref, flows = _inputs(cfg)
        out, _ = local(ctx, ref, flows)
        assert local.order == levels
        for lvl in set(range(3)) - set(levels):
            assert out[lvl] is ctx[lvl]

    def test_decoded_offsets_change_finest_level(self):
        torch.manual_seed(0)
        cfg = CodecConfig().with_preset("J")
        local = _perturb(LocalEnhancer(cfg))
        ctx, ref, flows = _inputs(cfg)
        o_bar = torch.randn(1, cfg.kernel.offset_channels, 16, 16)
        a, _ = local(ctx, ref, flows)
        b, _ = local(ctx, ref, flows, o_bar)
        assert torch.equal(a[2], b[2]) and torch.equal(a[1], b[1])
        assert not torch.equal(a[0], b[0])


class TestEnhancerParity:
    def test_encoder_and_decoder_copies_agree_bitwise(self):
        torch.manual_seed(0)
        cfg = CodecConfig().with_preset("J")
        enc = _perturb(ContextEnhancer(cfg))
        dec = ContextEnhancer(cfg)
        dec.load_state_dict(copy.deepcopy(enc.state_dict()))
        ctx, ref, flows = _inputs(cfg, seed=3)
        o_bar = 0.1 * torch.randn(1, cfg.kernel.offset_channels, 16, 16)
        a, _ = enc(ctx, ref, flows, o_bar)
        b, _ = dec([c.clone() for c in ctx], [r.clone() for r in ref], [f.clone() for f in flows], o_bar.clone())
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_no_current_frame_input(self):
        params = list(inspect.signature(ContextEnhancer.forward).parameters)
        assert params == ["self", "contexts", "ref", "flows", "decoded_offsets"]

    def test_intermediates(self):
        cfg = CodecConfig().with_preset("J")
        enh = ContextEnhancer(cfg)
        final, extra = enh(*_inputs(cfg))
        assert [tuple(t.shape[1:]) for t in final] == [(48, 16, 16), (64, 8, 8), (96, 4, 4)]
        assert extra["global"].shape == (1, 96, 4, 4)
        cfg_d = CodecConfig().with_preset("D")
        _, extra = ContextEnhancer(cfg_d)(*_inputs(cfg_d))
        assert extra["global"] is None and extra["offsets"] is None


class TestCrossAttention:
    def test_rows_are_distributions(self):
        att = CrossAttention(16, 4)
        att(torch.randn(2, 16, 5, 6), torch.randn(2, 16, 5, 6))
        a = att.last_attention
        assert a.shape == (2, 4, 4, 4) and (a >= 0).all()
        assert torch.allclose(a.sum(-1), torch.ones(2, 4, 4), atol=1e-5)

    def test_single_channel_heads_return_values(self):
        att = CrossAttention(8, 8)
        x, ref = torch.randn(1, 8, 1, 1), torch.randn(1, 8, 1, 1)
        assert torch.allclose(att.attend(x, ref), att.project_v(ref), atol=1e-6)

    def test_head_divisibility(self):
        with pytest.raises(ContractError):
            CrossAttention(10, 4)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            GlobalEnhancer(8, 2, 1)(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 2, 2))

    @pytest.mark.parametrize("make", [
        lambda: CrossAttentionBlock(8, 2, 2.0),
        lambda: GlobalEnhancer(8, 2, 2, 2.0),
    ])
    def test_gradient_matches_finite_differences(self, make):
        torch.manual_seed(0)
        block = make().double()
        x, ref = torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4)
        assert fd_relative_error(lambda a, b: block(a, b), [x, ref]) < 1e-3

    def test_ffn_gradient(self):
        torch.manual_seed(1)
        ffn = GatedFeedForward(8).double()
        assert fd_relative_error(lambda a: ffn(a), [torch.randn(1, 8, 4, 4)]) < 1e-3


class TestFusion:
    def test_gates_in_unit_interval(self):
        fuse = ChannelSpatialFusion(8)
        out = fuse(torch.randn(2, 8, 6, 6), torch.randn(2, 8, 6, 6))
        assert out.shape == (2, 8, 6, 6)
        for g in fuse.last_gates:
            assert ((g > 0) & (g < 1)).all()

    def test_open_gates_reduce_to_projection(self):
        torch.manual_seed(0)
        fuse = ChannelSpatialFusion(8).double()
        with torch.no_grad():
            fuse.mlp[-1].weight.zero_()
            fuse.mlp[-1].bias.fill_(50.0)
            fuse.spatial.weight.zero_()
            fuse.spatial.bias.fill_(100.0)
        a, b = torch.randn(1, 8, 5, 5).double(), torch.randn(1, 8, 5, 5).double()
        assert torch.allclose(fuse(a, b), fuse.out(torch.cat((a, b), 1)), atol=1e-12)

    def test_fusion_gradient(self):
        torch.manual_seed(2)
        fuse = ChannelSpatialFusion(8).double()
        inputs = [torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4)]
        assert fd_relative_error(lambda a, b: fuse(a, b), inputs) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            ChannelSpatialFusion(8)(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 2, 2))


class TestHierarchicalFusion:
    def test_shapes_and_gradient_to_coarsest(self):
        torch.manual_seed(0)
        fuse = HierarchicalFusion(48, 64, 96)
        c0, c1 = torch.randn(1, 48, 16, 16), torch.randn(1, 64, 8, 8)
        c2 = torch.randn(1, 96, 4, 4, requires_grad=True)
        f0, f1, f2 = fuse(c0, c1, c2)
        assert f0.shape == c0.shape and f1.shape == c1.shape and f2.shape == c2.shape
        f0.square().mean().backward()
        assert c2.grad.abs().sum() > 0

    def test_deterministic(self):
        fuse = HierarchicalFusion(4, 6, 8)
        args = (torch.randn(1, 4, 8, 8), torch.randn(1, 6, 4, 4), torch.randn(1, 8, 2, 2))
        assert all(torch.equal(a, b) for a, b in zip(fuse(*args), fuse(*args)))
