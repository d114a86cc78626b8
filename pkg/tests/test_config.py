import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from hybridvc.config import (
    DC, FGDC, FLOW, MSE_LAMBDAS, PRESETS, CodecConfig, ConfigError, apply_overrides, canonical_text,
    parse_text,
)


def test_default_is_full_model():
    assert CodecConfig().preset_name() == "J"
    assert CodecConfig().lmbda == 2048.0


@pytest.mark.parametrize("name,gen", [
    ("A", (FLOW, FLOW, FLOW)), ("B", (FLOW, FLOW, FGDC)), ("C", (FLOW, FGDC, FLOW)),
    ("D", (FGDC, FLOW, FLOW)), ("E", (FGDC, FGDC, FLOW)), ("F", (DC, DC, DC)),
])
def test_compensation_presets_by_level(name, gen):
    # level order: original, 1/2, 1/4
    assert PRESETS[name].generation == gen
    assert not PRESETS[name].enhanced


def test_enhancement_presets_extend_d():
    for name in "GHIJ":
        assert PRESETS[name].generation == PRESETS["D"].generation
    # local enhancement grows from the 1/4 scale (level 2) upwards
    assert PRESETS["G"].local_enhance == (False, False, True) and not PRESETS["G"].cross_attention
    assert PRESETS["H"].cross_attention
    assert PRESETS["I"].local_enhance == (False, True, True)
    assert PRESETS["J"].local_enhance == (True, True, True)


def test_coded_levels_and_flow_usage():
    assert PRESETS["A"].coded_offset_levels == ()
    assert PRESETS["E"].coded_offset_levels == (0, 1)
    assert not PRESETS["F"].uses_flow
    assert PRESETS["D"].uses_flow


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_canonical_text_round_trip(name):
    cfg = dataclasses.replace(CodecConfig().with_preset(name), lmbda_index=1, seed=5)
    assert parse_text(canonical_text(cfg)) == cfg


def test_hash_tracks_architecture_only():
    base = CodecConfig()
    assert base.hash() == dataclasses.replace(base, lmbda_index=0, seed=9).hash()
    assert base.hash() != base.with_preset("D").hash()
    assert len(base.hash()) == 8


def test_overrides():
    cfg = apply_overrides(CodecConfig(), ["ablation=D", "channels.c0=32", "gop.intra_period=4"])
    assert cfg.preset_name() == "D" and cfg.channels.c0 == 32 and cfg.gop.intra_period == 4
    with pytest.raises(ConfigError, match="channels.nope"):
        apply_overrides(CodecConfig(), ["channels.nope=1"])


@pytest.mark.parametrize("text,path", [
    ('channels = { c0 = "x" }', "channels.c0"),
    ("lmbda_index = 7", "lmbda_index"),
    ('ablation = "Z"', "ablation"),
    ('ablation = { generation = ["flow", "warp", "flow"] }', "ablation.generation[1]"),
    ("bogus = 1", "bogus"),
    ("channels = { c0 = 50 }", "channels.c0"),
])
def test_errors_name_the_key(text, path):
    with pytest.raises(ConfigError) as err:
        parse_text(text)
    assert path in str(err.value)


def test_lambda_tables():
    assert MSE_LAMBDAS == (256.0, 512.0, 1024.0, 2048.0)
    assert dataclasses.replace(CodecConfig(), distortion="ms-ssim", lmbda_index=0).lmbda == 8.0


@given(st.integers(0, 3), st.integers(0, 2 ** 31), st.sampled_from(sorted(PRESETS)),
       st.integers(1, 64))
@settings(max_examples=40, deadline=None)
def test_round_trip_property(lidx, seed, preset, period):
    cfg = CodecConfig(lmbda_index=lidx, seed=seed).with_preset(preset)
    cfg = apply_overrides(cfg, [f"gop.intra_period={period}"])
    assert parse_text(canonical_text(cfg)) == cfg
