"""The full codec: intra frames, inter (P) frames and closed-loop coding.

The decode path is the single source of truth for reconstructions: the
encoder entropy-codes its integer symbols and then rebuilds everything from
those symbols with exactly the functions the decoder uses, so encoder and
decoder states cannot drift apart.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..config import CodecConfig
from ..context_enhance import ContextEnhancer
from ..hybrid_context import CurrentFeature, FeaturePyramid, HybridContextGenerator
from ..layers import crop, pad_to_multiple
from ..motion import FieldCodec, FlowEstimator, build_flow_pyramid
from ..tensor_ops import bilinear_warp, quantize_ste
from .bitstream import INTER, INTRA, Bitstream, BitstreamError, CompatibilityError
from .entropy import LatentCode, estimate_rate, gaussian_likelihood, merge_tables
from .networks import ContextualDecoder, ContextualEncoder, HyperPrior, IntraCodec
from .rans import range_decode, range_encode

PAD = 64


@dataclass
class CodecState:
    """Decoder-visible state carried from one frame to the next."""
    frame: torch.Tensor       # padded reconstruction of the previous frame
    feature: torch.Tensor     # propagated full-resolution feature
    width: int
    height: int
    index: int = 0
    gop_position: int = 0


@dataclass
class FrameInfo:
    """Per-frame coding statistics."""
    frame_type: int
    bytes: dict[str, int]
    estimated_bits: dict[str, float]
    total_bytes: int
    recon: torch.Tensor = field(repr=False)


class VideoCodec(nn.Module):
    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        cfg = cfg or CodecConfig()
        self.cfg = cfg
        ch = cfg.channels
        ab = cfg.ablation
        self.uses_flow = ab.uses_flow
        self.intra = IntraCodec(ch.c0, ch.latent, ch.hyper)
        if self.uses_flow:
            self.flow_net = FlowEstimator()
            self.flow_codec = FieldCodec(2, ch.motion_latent, substream="flow")
        self.ref_pyramid = FeaturePyramid(ch.c0, ch.c1, ch.c2)
        self.coded_levels = ab.coded_offset_levels
        if self.coded_levels:
            self.cur_feature = CurrentFeature(ch.c0, ch.c1, ch.c2)
        self.generator = HybridContextGenerator(cfg)
        self.enhancer = ContextEnhancer(cfg)
        self.ctx_encoder = ContextualEncoder(ch.c0, ch.c1, ch.c2, ch.latent)
        self.ctx_decoder = ContextualDecoder(ch.c0, ch.c1, ch.c2, ch.latent)
        self.hyper = HyperPrior(ch.latent, ch.hyper)
        self.model_hash = cfg.hash()
        for codec in self._field_codecs():
            codec.model_hash = self.model_hash

    # -- parameter groups -------------------------------------------------
    def motion_modules(self) -> list[nn.Module]:
        return [self.flow_net, self.flow_codec] if self.uses_flow else []

    def motion_parameters(self):
        return [p for m in self.motion_modules() for p in m.parameters()]

    def intra_parameters(self):
        return list(self.intra.parameters())

    def inter_parameters(self):
        skip = {id(p) for p in self.motion_parameters() + self.intra_parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    def _field_codecs(self) -> list[FieldCodec]:
        codecs = [self.flow_codec] if self.uses_flow else []
        return codecs + [self.generator.offset_codecs[str(l)] for l in self.coded_levels]

    def _priors(self):
        return [c.prior for c in self._field_codecs()] + [self.hyper.prior, self.intra.hyper.prior]

    def invalidate_tables(self) -> None:
        for prior in self._priors():
            prior.invalidate()

    def train(self, mode: bool = True):
        if mode:
            self.invalidate_tables()
        return super().train(mode)

    # -- shared pieces ----------------------------------------------------
    def motion_pyramid(self, flow_hat: torch.Tensor) -> list[torch.Tensor]:
        return build_flow_pyramid(flow_hat)

    def temporal_contexts(self, ref: list[torch.Tensor], flows: list[torch.Tensor],
                          offsets: dict[int, torch.Tensor]):
        """Generated -> enhanced -> fused contexts from decoded quantities only."""
        generated = self.generator(ref, flows, offsets)
        final, aux = self.enhancer(generated, ref, flows, offsets.get(0))
        aux["generated"] = generated
        return final, aux

    def _current_features(self, x):
        return self.cur_feature(x, max(self.coded_levels) + 1) if self.coded_levels else []

    # -- training forward passes -------------------------------------------
    def forward_intra(self, x: torch.Tensor, mode: str = "round") -> dict:
        return self.intra(x, mode)

    def forward_inter(self, x: torch.Tensor, x_ref: torch.Tensor, f_ref: torch.Tensor,
                      mode: str = "round", motion_only: bool = False) -> dict:
        """Differentiable inter-frame pass returning rates (bits) and reconstructions.

        ``motion_only`` stops after motion coding (first training stage).
        """
        b, _, h, w = x.shape
        out = {}
        if self.uses_flow:
            flow = self.flow_net(x, x_ref)
            flow_hat, bits_flow, _ = self.flow_codec(flow, mode)
            out["flow"] = flow
        else:
            flow_hat = x.new_zeros(b, 2, h, w)
            bits_flow = x.new_zeros(())
        out.update(flow_hat=flow_hat, bits_flow=bits_flow,
                   warped=bilinear_warp(x_ref, flow_hat))
        if motion_only:
            return out

        ref = self.ref_pyramid(f_ref)
        flows = self.motion_pyramid(flow_hat)
        cur = self._current_features(x)
        offsets, bits_offset = {}, x.new_zeros(())
        for lvl in self.coded_levels:
            o = self.generator.estimate_residual_offsets(lvl, cur[lvl], ref[lvl], flows[lvl])
            o_hat, bits, _ = self.generator.offset_codecs[str(lvl)](o, mode)
            offsets[lvl] = self.generator.upsample_offsets(o_hat)
            bits_offset = bits_offset + bits
        contexts, aux = self.temporal_contexts(ref, flows, offsets)
        y = self.ctx_encoder(x, contexts)
        y_hat, bits_y, bits_z, _ = self.hyper(y, mode)
        recon, feature = self.ctx_decoder(y_hat, contexts)
        out.update(bits_offset=bits_offset, bits_frame=bits_y, bits_hyper=bits_z, recon=recon,
                   feature=feature, contexts=contexts, aux=aux, offsets=offsets, ref=ref, flows=flows)
        return out

    # -- entropy coding helpers ---------------------------------------------
    @staticmethod
    def _code_factorized(priors, symbols) -> bytes:
        if not priors:
            return b""
        bank, shifts = merge_tables([p.tables() for p in priors])
        idx = np.concatenate([p.indexes(s.shape) + k for p, s, k in zip(priors, symbols, shifts)])
        return range_encode(np.concatenate([s.reshape(-1) for s in symbols]), idx, bank)

    @staticmethod
    def _decode_factorized(priors, shapes, data: bytes) -> list[np.ndarray]:
        if not priors:
            if data:
                raise BitstreamError("unexpected bytes in an unused substream")
            return []
        bank, shifts = merge_tables([p.tables() for p in priors])
        idx = np.concatenate([p.indexes(s) + k for p, s, k in zip(priors, shapes, shifts)])
        flat = range_decode(data, idx, bank)
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(flat[pos:pos + n].reshape(s))
            pos += n
        return out

    @staticmethod
    def _tensor(symbols: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(symbols, dtype=np.int64)).to(torch.float32)

    def _code_hyper(self, hp: HyperPrior, y: torch.Tensor):
        """Quantize y under the hyperprior; returns symbols, side symbols and both byte strings."""
        z_sym = quantize_ste(hp.encoder(y), "round")
        means, scales = hp.params(z_sym)
        y_sym = quantize_ste(y - means, "round")
        z_np = z_sym.numpy().astype(np.int64)
        y_np = y_sym.numpy().astype(np.int64)
        hyper_bytes = self._code_factorized([hp.prior], [z_np])
        frame_bytes = range_encode(y_np, hp.gaussian.indexes(scales), hp.gaussian.tables)
        est = {
            "hyper": estimate_rate(hp.prior.likelihood(z_sym)).item(),
            "frame": estimate_rate(gaussian_likelihood(y_sym, scales)).item(),
        }
        return y_np, z_np, hyper_bytes, frame_bytes, est

    def _decode_hyper(self, hp: HyperPrior, hyper_bytes: bytes, frame_bytes: bytes, y_shape, z_shape):
        (z_np,) = self._decode_factorized([hp.prior], [z_shape], hyper_bytes)
        means, scales = hp.params(self._tensor(z_np))
        y_np = range_decode(frame_bytes, hp.gaussian.indexes(scales), hp.gaussian.tables).reshape(y_shape)
        return y_np, z_np

    @staticmethod
    def _hyper_latent(hp: HyperPrior, y_np, z_np) -> torch.Tensor:
        means, _ = hp.params(VideoCodec._tensor(z_np))
        return VideoCodec._tensor(y_np) + means

    def _shapes(self, hp: int, wp: int) -> dict:
        ch = self.cfg.channels
        shapes = {
            "y": (1, ch.latent, hp // 16, wp // 16),
            "z": (1, ch.hyper, hp // 64, wp // 64),
            "flow": self.flow_codec.latent_shape(1, hp, wp) if self.uses_flow else None,
        }
        for lvl in self.coded_levels:
            # offsets are estimated at half the level's resolution
            codec = self.generator.offset_codecs[str(lvl)]
            shapes[f"offset{lvl}"] = codec.latent_shape(1, hp >> (lvl + 1), wp >> (lvl + 1))
        return shapes

    def _check_header(self, bs: Bitstream, state: CodecState | None):
        if bs.config_hash != self.model_hash:
            raise CompatibilityError(
                f"bitstream config hash {bs.config_hash.hex()} != model {self.model_hash.hex()}")
        if bs.lmbda_index != self.cfg.lmbda_index:
            raise CompatibilityError(
                f"bitstream rate point {bs.lmbda_index} != model rate point {self.cfg.lmbda_index}")
        if state is not None and (bs.width, bs.height) != (state.width, state.height):
            raise BitstreamError("frame dimensions changed mid-sequence")

    # -- intra coding ----------------------------------------------------------
    @torch.no_grad()
    def encode_intra(self, x: torch.Tensor, index: int = 0):
        """Code one frame independently; returns (Bitstream, new state, FrameInfo)."""
        h, w = x.shape[-2:]
        xp = pad_to_multiple(x, PAD)
        y = self.intra.encoder(xp)
        y_np, z_np, hyper_bytes, frame_bytes, est = self._code_hyper(self.intra.hyper, y)
        bs = Bitstream(INTRA, w, h, self.cfg.lmbda_index, self.model_hash,
                       {"hyper": hyper_bytes, "frame": frame_bytes})
        recon, feature = self.intra.synthesize(self._hyper_latent(self.intra.hyper, y_np, z_np))
        state = CodecState(recon, feature, w, h, index, 0)
        return bs, state, self._info(INTRA, bs, est, crop(recon, h, w))

    @torch.no_grad()
    def decode_intra(self, bs: Bitstream, index: int = 0):
        self._check_header(bs, None)
        if bs.frame_type != INTRA:
            raise BitstreamError("expected an intra frame")
        hp, wp = -(-bs.height // PAD) * PAD, -(-bs.width // PAD) * PAD
        shapes = self._shapes(hp, wp)
        y_np, z_np = self._decode_hyper(self.intra.hyper, bs.substreams["hyper"], bs.substreams["frame"],
                                        shapes["y"], shapes["z"])
        recon, feature = self.intra.synthesize(self._hyper_latent(self.intra.hyper, y_np, z_np))
        state = CodecState(recon, feature, bs.width, bs.height, index, 0)
        return crop(recon, bs.height, bs.width), state

    encode_iframe = encode_intra
    decode_iframe = decode_intra

    # -- inter coding ----------------------------------------------------------
    def _reconstruct_inter(self, state: CodecState, flow_np, offset_nps: dict, y_np, z_np):
        """Decoder-side synthesis from integer symbols (shared by encoder and decoder)."""
        flow_hat = self._decode_flow(flow_np, state.frame)
        ref = self.ref_pyramid(state.feature)
        flows = self.motion_pyramid(flow_hat)
        offsets = {lvl: self._decode_offsets(lvl, offset_nps[lvl]) for lvl in self.coded_levels}
        contexts, _ = self.temporal_contexts(ref, flows, offsets)
        recon, feature = self.ctx_decoder(self._hyper_latent(self.hyper, y_np, z_np), contexts)
        return recon, feature, contexts

    def _decode_flow(self, flow_np, like: torch.Tensor) -> torch.Tensor:
        if not self.uses_flow:
            b, _, h, w = like.shape
            return like.new_zeros(b, 2, h, w)
        code = LatentCode("flow", flow_np, tuple(flow_np.shape), model_hash=self.model_hash)
        return self.flow_codec.decode(code)

    def _decode_offsets(self, lvl: int, symbols: np.ndarray) -> torch.Tensor:
        code = LatentCode("offset", symbols, tuple(symbols.shape), model_hash=self.model_hash)
        return self.generator.upsample_offsets(self.generator.offset_codecs[str(lvl)].decode(code))

    @torch.no_grad()
    def encode_inter(self, x: torch.Tensor, state: CodecState):
        h, w = x.shape[-2:]
        if (w, h) != (state.width, state.height):
            raise ValueError("frame dimensions changed mid-sequence")
        xp = pad_to_multiple(x, PAD)
        est = {}
        substreams = {}
        # motion
        if self.uses_flow:
            flow = self.flow_net(xp, state.frame)
            code, _, est["flow"] = self.flow_codec.encode(flow)
            flow_np = code.symbols
            substreams["flow"] = self._code_factorized([self.flow_codec.prior], [flow_np])
        else:
            flow_np = None
        flow_hat = self._decode_flow(flow_np, state.frame)
        ref = self.ref_pyramid(state.feature)
        flows = self.motion_pyramid(flow_hat)
        # offsets
        cur = self._current_features(xp)
        offset_nps, priors = {}, []
        est["offset"] = 0.0
        for lvl in self.coded_levels:
            o = self.generator.estimate_residual_offsets(lvl, cur[lvl], ref[lvl], flows[lvl])
            codec = self.generator.offset_codecs[str(lvl)]
            code, _, bits = codec.encode(o)
            offset_nps[lvl] = code.symbols
            priors.append(codec.prior)
            est["offset"] += bits
        substreams["offset"] = self._code_factorized(priors, [offset_nps[l] for l in self.coded_levels])
        offsets = {lvl: self._decode_offsets(lvl, offset_nps[lvl]) for lvl in self.coded_levels}
        # frame
        contexts, _ = self.temporal_contexts(ref, flows, offsets)
        y = self.ctx_encoder(xp, contexts)
        y_np, z_np, substreams["hyper"], substreams["frame"], est_y = self._code_hyper(self.hyper, y)
        est.update(est_y)
        bs = Bitstream(INTER, w, h, self.cfg.lmbda_index, self.model_hash, substreams)
        recon, feature, _ = self._reconstruct_inter(state, flow_np, offset_nps, y_np, z_np)
        new_state = CodecState(recon, feature, w, h, state.index + 1, state.gop_position + 1)
        return bs, new_state, self._info(INTER, bs, est, crop(recon, h, w))

    @torch.no_grad()
    def decode_inter(self, bs: Bitstream, state: CodecState):
        self._check_header(bs, state)
        if bs.frame_type != INTER:
            raise BitstreamError("expected an inter frame")
        hp, wp = state.frame.shape[-2:]
        shapes = self._shapes(hp, wp)
        flow_np = None
        if self.uses_flow:
            (flow_np,) = self._decode_factorized([self.flow_codec.prior], [shapes["flow"]],
                                                 bs.substreams["flow"])
        elif bs.substreams["flow"]:
            raise BitstreamError("unexpected flow substream")
        priors = [self.generator.offset_codecs[str(l)].prior for l in self.coded_levels]
        decoded = self._decode_factorized(priors, [shapes[f"offset{l}"] for l in self.coded_levels],
                                          bs.substreams["offset"])
        offset_nps = dict(zip(self.coded_levels, decoded))
        y_np, z_np = self._decode_hyper(self.hyper, bs.substreams["hyper"], bs.substreams["frame"],
                                        shapes["y"], shapes["z"])
        recon, feature, _ = self._reconstruct_inter(state, flow_np, offset_nps, y_np, z_np)
        new_state = CodecState(recon, feature, bs.width, bs.height, state.index + 1, state.gop_position + 1)
        return crop(recon, bs.height, bs.width), new_state

    # -- dispatch ----------------------------------------------------------------
    def encode_frame(self, x: torch.Tensor, state: CodecState | None):
        """Intra-code when there is no state, inter-code otherwise."""
        if state is None:
            return self.encode_intra(x)
        return self.encode_inter(x, state)

    def decode_frame(self, bs: Bitstream, state: CodecState | None):
        if bs.frame_type == INTRA:
            return self.decode_intra(bs, 0 if state is None else state.index + 1)
        if state is None:
            raise BitstreamError("inter frame without a decoded reference")
        return self.decode_inter(bs, state)

    @staticmethod
    def _info(ftype, bs: Bitstream, est, recon) -> FrameInfo:
        est = {k: float(est.get(k, 0.0)) for k in ("flow", "offset", "hyper", "frame")}
        return FrameInfo(ftype, bs.lengths(), est, len(bs.to_bytes()), recon)
