"""Codec configuration, ablation presets and the compatibility hash.

Configs are nested dataclasses.  On disk they are plain TOML (sections or
dotted keys); :func:`canonical_text` renders the architecture-relevant part
as sorted ``dotted.key = value`` lines whose SHA-256 prefix is embedded in
checkpoints and bitstreams.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from typing import Any, get_args, get_origin, get_type_hints

try:
    import tomllib as tomli
except ModuleNotFoundError:  # python < 3.11
    import tomli

from .tensor_ops import DeformKernelSpec

FLOW, FGDC, DC = "flow", "fgdc", "dc"
STRATEGIES = (FLOW, FGDC, DC)
MSE_LAMBDAS = (256.0, 512.0, 1024.0, 2048.0)
MSSSIM_LAMBDAS = (8.0, 16.0, 32.0, 64.0)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


@dataclass(frozen=True)
class ChannelConfig:
    c0: int = 48
    c1: int = 64
    c2: int = 96
    latent: int = 96
    hyper: int = 64
    motion_latent: int = 64


@dataclass(frozen=True)
class AblationConfig:
    """Per-scale strategies, indexed by level: 0 = original, 1 = 1/2, 2 = 1/4."""
    generation: tuple[str, str, str] = (FGDC, FLOW, FLOW)
    local_enhance: tuple[bool, bool, bool] = (True, True, True)
    cross_attention: bool = True

    def __post_init__(self):
        for lvl, s in enumerate(self.generation):
            if s not in STRATEGIES:
                raise ConfigError(f"ablation.generation[{lvl}]: {s!r} not in {STRATEGIES}")
        if len(self.generation) != 3 or len(self.local_enhance) != 3:
            raise ConfigError("ablation: generation and local_enhance need 3 levels")

    @property
    def coded_offset_levels(self) -> tuple[int, ...]:
        return tuple(l for l, s in enumerate(self.generation) if s != FLOW)

    @property
    def uses_flow(self) -> bool:
        # DC at every scale with no enhancement needs no motion field at all
        return any(s != DC for s in self.generation) or self.enhanced

    @property
    def enhanced(self) -> bool:
        return any(self.local_enhance) or self.cross_attention


def _preset(gen, local=(False, False, False), ca=False):
    # gen and local are written coarse-to-fine (1/4, 1/2, original) like the tables
    return AblationConfig(tuple(reversed(gen)), tuple(reversed(local)), ca)


PRESETS: dict[str, AblationConfig] = {
    "A": _preset((FLOW, FLOW, FLOW)),
    "B": _preset((FGDC, FLOW, FLOW)),
    "C": _preset((FLOW, FGDC, FLOW)),
    "D": _preset((FLOW, FLOW, FGDC)),
    "E": _preset((FLOW, FGDC, FGDC)),
    "F": _preset((DC, DC, DC)),
    "G": _preset((FLOW, FLOW, FGDC), (True, False, False)),
    "H": _preset((FLOW, FLOW, FGDC), (True, False, False), ca=True),
    "I": _preset((FLOW, FLOW, FGDC), (True, True, False), ca=True),
    "J": _preset((FLOW, FLOW, FGDC), (True, True, True), ca=True),
}


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 4
    blocks: int = 4
    ffn_expansion: float = 2.0


@dataclass(frozen=True)
class GopConfig:
    intra_period: int = 8
    frames: int = 32


@dataclass(frozen=True)
class CodecConfig:
    channels: ChannelConfig = field(default_factory=ChannelConfig)
    kernel: DeformKernelSpec = field(default_factory=DeformKernelSpec)
    ablation: AblationConfig = field(default_factory=lambda: PRESETS["J"])
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    gop: GopConfig = field(default_factory=GopConfig)
    distortion: str = "mse"
    lmbda_index: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.distortion not in ("mse", "ms-ssim"):
            raise ConfigError(f"distortion: {self.distortion!r} not in ('mse', 'ms-ssim')")
        if not 0 <= self.lmbda_index < 4:
            raise ConfigError(f"lmbda_index: {self.lmbda_index} not in 0..3")
        if self.channels.c2 % self.attention.heads:
            raise ConfigError("attention.heads: must divide channels.c2")
        for name in ("c0", "c1", "c2"):
            if getattr(self.channels, name) % self.kernel.groups:
                raise ConfigError(f"channels.{name}: not divisible by kernel.groups")
        if self.gop.intra_period < 1:
            raise ConfigError("gop.intra_period: must be >= 1")

    @property
    def lmbda(self) -> float:
        table = MSE_LAMBDAS if self.distortion == "mse" else MSSSIM_LAMBDAS
        return table[self.lmbda_index]

    def with_preset(self, name: str) -> "CodecConfig":
        try:
            return dataclasses.replace(self, ablation=PRESETS[name])
        except KeyError:
            raise ConfigError(f"ablation: unknown preset {name!r}; choose from {sorted(PRESETS)}") from None

    def preset_name(self) -> str | None:
        for name, p in PRESETS.items():
            if p == self.ablation:
                return name
        return None

    def hash(self) -> bytes:
        return config_hash(self)


PAPER_PARITY_GOP = GopConfig(intra_period=32, frames=96)

# sections that change the network or the meaning of coded symbols
_COMPAT_SECTIONS = ("channels", "kernel", "ablation", "attention")


def _flatten(obj, prefix="") -> dict[str, Any]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return repr(v)


def canonical_text(cfg: CodecConfig, compat_only: bool = False) -> str:
    flat = _flatten(cfg)
    if compat_only:
        flat = {k: v for k, v in flat.items() if k.split(".")[0] in _COMPAT_SECTIONS}
    return "".join(f"{k} = {_fmt(flat[k])}\n" for k in sorted(flat))


def config_hash(cfg: CodecConfig) -> bytes:
    return hashlib.sha256(canonical_text(cfg, compat_only=True).encode()).digest()[:8]


def _coerce(value, tp, path):
    origin = get_origin(tp)
    if origin is tuple:
        args = get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} items, got {value!r}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from nested dicts, validating keys and types."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a table, got {data!r}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        key = f"{path}{name}"
        if name == "ablation" and isinstance(value, str):
            if value not in PRESETS:
                raise ConfigError(f"{key}: unknown preset {value!r}; choose from {sorted(PRESETS)}")
            kwargs[name] = PRESETS[value]
        elif dataclasses.is_dataclass(tp):
            kwargs[name] = from_dict(tp, value, key + ".")
        else:
            kwargs[name] = _coerce(value, tp, key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def parse_text(text: str) -> CodecConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"<file>: {exc}") from exc
    return from_dict(CodecConfig, data)


def load_config(path) -> CodecConfig:
    with open(path, "rb") as fh:
        return parse_text(fh.read().decode())


def apply_overrides(cfg: CodecConfig, overrides: list[str]) -> CodecConfig:
    """Apply ``dotted.key=value`` overrides; values use TOML syntax.

    ``ablation=D`` (a bare preset name) replaces the whole ablation section.
    """
    data = dataclasses.asdict(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{item}: override must look like key=value")
        if key == "ablation":
            data["ablation"] = raw.strip('"')
            continue
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw  # bare strings
        node = data
        *parents, leaf = key.split(".")
        for i, part in enumerate(parents):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"{'.'.join(parents[:i + 1])}: unknown key")
            node = node[part]
            if isinstance(node, str):  # preset name chosen earlier in the overrides
                node = dataclasses.asdict(PRESETS[node])
                data[part] = node
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"{key}: unknown key")
        node[leaf] = value
    return from_dict(CodecConfig, data)
