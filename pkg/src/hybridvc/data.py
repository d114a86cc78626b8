"""Sequence ingestion: numbered image files or raw YUV420 with a descriptor."""
from __future__ import annotations

import json
import re
from pathlib import Path

import imageio.v3 as iio
import numpy as np
import torch

IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff", ".ppm"}


class IngestionError(ValueError):
    pass


def yuv420_frame_bytes(width: int, height: int) -> int:
    if width % 2 or height % 2:
        raise IngestionError(f"YUV420 needs even dimensions, got {width}x{height}")
    return width * height * 3 // 2


def yuv420_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """8-bit full-range BT.601 YCbCr 4:2:0 -> float RGB in [0, 1], 3 x H x W."""
    y = y.astype(np.float64)
    u = np.repeat(np.repeat(u.astype(np.float64), 2, 0), 2, 1) - 128.0
    v = np.repeat(np.repeat(v.astype(np.float64), 2, 0), 2, 1) - 128.0
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    return np.clip(np.stack((r, g, b)) / 255.0, 0.0, 1.0)


def rgb_to_yuv420(rgb: np.ndarray) -> bytes:
    r, g, b = (np.asarray(rgb, dtype=np.float64) * 255.0)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    v = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    h, w = y.shape

    def sub(c):
        return c.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    planes = [y, sub(u), sub(v)]
    return b"".join(np.clip(np.rint(p), 0, 255).astype(np.uint8).tobytes() for p in planes)


def _numbered_images(directory: Path) -> list[tuple[int, Path]]:
    found = {}
    for path in directory.iterdir():
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = re.search(r"(\d+)$", path.stem)
        if not m:
            continue
        idx = int(m.group(1))
        if idx in found:
            raise IngestionError(f"index {idx} appears twice: {found[idx].name}, {path.name}")
        found[idx] = path
    return sorted(found.items())


def _load_images(directory: Path) -> list[np.ndarray]:
    items = _numbered_images(directory)
    if not items:
        raise IngestionError(f"no numbered image files in {directory}")
    first = items[0][0]
    for expected, (idx, _) in enumerate(items, start=first):
        if idx != expected:
            raise IngestionError(f"missing frame index {expected} in {directory}")
    frames, dims = [], None
    for idx, path in items:
        try:
            img = np.asarray(iio.imread(path))
        except Exception as exc:
            raise IngestionError(f"cannot read {path}: {exc}") from exc
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        img = img[..., :3]
        if dims is None:
            dims = img.shape[:2]
        elif img.shape[:2] != dims:
            raise IngestionError(f"frame {idx} is {img.shape[1]}x{img.shape[0]}, expected {dims[1]}x{dims[0]}")
        scale = 65535.0 if img.dtype == np.uint16 else 255.0
        frames.append(img.transpose(2, 0, 1).astype(np.float64) / scale)
    return frames


def _load_yuv(path: Path, width: int, height: int) -> list[np.ndarray]:
    size = yuv420_frame_bytes(width, height)
    data = path.read_bytes()
    if not data or len(data) % size:
        raise IngestionError(f"{path.name}: {len(data)} bytes is not a multiple of {size} "
                             f"({width}x{height} YUV420 frames)")
    frames = []
    for k in range(len(data) // size):
        chunk = np.frombuffer(data, np.uint8, size, k * size)
        y = chunk[:width * height].reshape(height, width)
        q = width * height // 4
        u = chunk[width * height:width * height + q].reshape(height // 2, width // 2)
        v = chunk[width * height + q:].reshape(height // 2, width // 2)
        frames.append(yuv420_to_rgb(y, u, v))
    return frames


def load_sequence(path) -> torch.Tensor:
    """Frames as a T x 3 x H x W float tensor in [0, 1].

    ``path`` is a directory of numbered images, a ``.yuv`` file with a
    ``.json`` sidecar holding ``width`` and ``height``, or a synthetic ``.npz``.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path} does not exist")
    if path.is_dir():
        frames = _load_images(path)
    elif path.suffix == ".yuv":
        sidecar = path.with_suffix(".json")
        if not sidecar.exists():
            raise IngestionError(f"{path.name} needs a descriptor {sidecar.name} with width and height")
        try:
            meta = json.loads(sidecar.read_text())
            width, height = int(meta["width"]), int(meta["height"])
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(f"bad descriptor {sidecar}: {exc}") from exc
        frames = _load_yuv(path, width, height)
    elif path.suffix == ".npz":
        with np.load(path) as data:
            if "frames" not in data:
                raise IngestionError(f"{path} has no 'frames' array")
            return torch.from_numpy(np.ascontiguousarray(data["frames"], dtype=np.float32))
    else:
        raise IngestionError(f"unsupported input {path}")
    return torch.from_numpy(np.stack(frames).astype(np.float32))


def write_frames(frames: torch.Tensor, directory, prefix: str = "frame") -> list[Path]:
    """Write T x 3 x H x W frames in [0, 1] as 8-bit PNGs numbered from 0."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        img = np.clip(np.rint(frame.detach().cpu().numpy().transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        path = directory / f"{prefix}_{t:04d}.png"
        iio.imwrite(path, img)
        paths.append(path)
    return paths
