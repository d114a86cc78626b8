"""Procedural clips with exact ground-truth motion.

Frames are rendered from a continuous texture through a per-frame
coordinate map ``T_t`` with ``T_t(p) = T_{t-1}(p + flow_t(p))``, so
``warp(frame_{t-1}, flow_t)`` reproduces ``frame_t`` up to interpolation
error wherever the source position stays inside the frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

FAMILIES = ("translate", "rotate", "elastic", "occlude")

DEFAULTS = {
    "translate": {"shift": (2.0, 1.0)},
    "rotate": {"degrees": 1.5},
    "elastic": {"amplitude": 1.5, "cell": 32},
    "occlude": {"shift": (1.0, 0.0), "disc_radius": 10.0, "disc_velocity": (-3.0, 2.0)},
}


@dataclass
class SyntheticClip:
    frames: np.ndarray                     # T x 3 x H x W, float32 in [0, 1]
    flows: np.ndarray                      # (T-1) x 2 x H x W, flow t-1 -> t in pixels
    valid: np.ndarray                      # (T-1) x H x W, False where the flow is undefined
    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.frames)

    def flow_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.flows)

    def __len__(self):
        return len(self.frames)


class ValueNoise:
    """Multi-octave value noise, evaluated at arbitrary coordinates (periodic)."""

    def __init__(self, rng: np.random.Generator, base_cell: int = 24, octaves: int = 3, channels: int = 3):
        self.layers = []
        cell = float(base_cell)
        amp = 1.0
        for _ in range(octaves):
            period = 16
            lattice = rng.random((channels + 1, period, period))
            self.layers.append((lattice, cell, amp))
            cell /= 2
            amp /= 2
        self.norm = sum(a for _, _, a in self.layers)
        self.channels = channels

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros((self.channels,) + x.shape)
        for lattice, cell, amp in self.layers:
            coords = np.stack((y / cell, x / cell))
            sampled = [ndimage.map_coordinates(lattice[c], coords, order=3, mode="grid-wrap")
                       for c in range(self.channels + 1)]
            luma = sampled[-1]
            for c in range(self.channels):
                out[c] += amp * (0.7 * luma + 0.3 * sampled[c])
        out /= self.norm
        return np.clip(0.1 + 0.8 * out, 0.0, 1.0)


def _smooth_field(rng, h, w, cell, amplitude):
    gh, gw = h // cell + 3, w // cell + 3
    lattice = rng.uniform(-1, 1, (2, gh, gw))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack((yy / cell + 1, xx / cell + 1))
    return amplitude * np.stack([ndimage.map_coordinates(lattice[c], coords, order=3, mode="nearest")
                                 for c in range(2)])


def _interp(field2d, x, y):
    return ndimage.map_coordinates(field2d, np.stack((y, x)), order=1, mode="nearest")


def generate_synthetic_clip(family: str = "translate", params: dict | None = None, seed: int = 0,
                            frames: int = 8, height: int = 64, width: int = 64) -> SyntheticClip:
    if family not in FAMILIES:
        raise ValueError(f"unknown motion family {family!r}; expected one of {FAMILIES}")
    p = dict(DEFAULTS[family])
    p.update(params or {})
    rng = np.random.default_rng(seed)
    texture = ValueNoise(rng, int(p.get("base_cell", 24)), int(p.get("octaves", 3)))
    h, w = height, width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # start away from the origin so the view is not tied to the lattice phase
    off = rng.uniform(0, 200, 2)
    map_x, map_y = xx + off[0], yy + off[1]
    disc = None
    if family == "occlude":
        disc_color = rng.uniform(0.1, 0.9, 3)
        disc = np.array([w * 0.5, h * 0.5])

    out_frames = [texture(map_x, map_y)]
    if disc is not None:
        out_frames[0] = _paint_disc(out_frames[0], disc, p["disc_radius"], disc_color)
    flows, valid = [], []
    for t in range(1, frames):
        if family in ("translate", "occlude"):
            sx, sy = p["shift"]
            fx, fy = np.full((h, w), float(sx)), np.full((h, w), float(sy))
        elif family == "rotate":
            theta = np.deg2rad(p["degrees"])
            cx, cy = (w - 1) / 2, (h - 1) / 2
            c, s = np.cos(theta), np.sin(theta)
            fx = c * (xx - cx) - s * (yy - cy) + cx - xx
            fy = s * (xx - cx) + c * (yy - cy) + cy - yy
        else:
            fx, fy = _smooth_field(rng, h, w, int(p["cell"]), float(p["amplitude"]))
        src_x, src_y = xx + fx, yy + fy
        ok = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
        map_x, map_y = _interp(map_x, src_x, src_y), _interp(map_y, src_x, src_y)
        frame = texture(map_x, map_y)
        if disc is not None:
            prev = disc.copy()
            disc = disc + np.asarray(p["disc_velocity"], dtype=np.float64)
            frame = _paint_disc(frame, disc, p["disc_radius"], disc_color)
            r = p["disc_radius"] + 1.5
            covered = (xx - disc[0]) ** 2 + (yy - disc[1]) ** 2 <= r ** 2
            was_covered = (src_x - prev[0]) ** 2 + (src_y - prev[1]) ** 2 <= r ** 2
            ok &= ~covered & ~was_covered
        out_frames.append(frame)
        flows.append(np.stack((fx, fy)))
        valid.append(ok)
    return SyntheticClip(
        frames=np.stack(out_frames).astype(np.float32),
        flows=np.stack(flows).astype(np.float32) if flows else np.zeros((0, 2, h, w), np.float32),
        valid=np.stack(valid) if valid else np.zeros((0, h, w), bool),
        family=family, params=p, seed=seed,
    )


def _paint_disc(frame, center, radius, color):
    _, h, w = frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.sqrt((xx - center[0]) ** 2 + (yy - center[1]) ** 2)
    alpha = np.clip(radius + 0.5 - d, 0.0, 1.0)
    return frame * (1 - alpha) + alpha * np.asarray(color)[:, None, None]


def save_clip(clip: SyntheticClip, path) -> None:
    np.savez(path, frames=clip.frames, flows=clip.flows, valid=clip.valid,
             family=clip.family, seed=clip.seed, params=json.dumps(clip.params, sort_keys=True))


def load_clip(path) -> SyntheticClip:
    with np.load(path) as data:
        params = json.loads(str(data["params"])) if "params" in data else {}
        return SyntheticClip(data["frames"], data["flows"], data["valid"], str(data["family"]),
                             params=params, seed=int(data["seed"]))
