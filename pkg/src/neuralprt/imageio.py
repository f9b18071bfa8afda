"""PFM read/write, tone mapping and PNG export."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    pass


def write_pfm(path, img: np.ndarray) -> Path:
    """Little-endian colour PFM; rows are stored bottom-to-top as the format requires."""
    a = np.asarray(img, dtype="<f4")
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3) image, got {a.shape}")
    h, w = a.shape[:2]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())
    return path


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", raw)
    if not m:
        raise ImageFormatError(f"{path}: not a PFM file")
    ch = 3 if m.group(1) == b"PF" else 1
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dt = "<f4" if scale < 0 else ">f4"
    n = w * h * ch
    body = raw[m.end():]
    if len(body) < 4 * n:
        raise ImageFormatError(f"{path}: truncated pixel data")
    a = np.frombuffer(body, dtype=dt, count=n).reshape(h, w, ch)[::-1]
    if ch == 1:
        a = np.repeat(a, 3, axis=2)
    return a.astype(np.float32)


def srgb_encode(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def tonemap(img: np.ndarray, exposure: float = 1.0) -> np.ndarray:
    """Per-channel Reinhard x / (1 + x) after exposure scaling, then sRGB; values in [0, 1]."""
    x = np.maximum(np.asarray(img, dtype=np.float64) * exposure, 0.0)
    return srgb_encode(x / (1.0 + x))


def to_8bit(img: np.ndarray, exposure: float = 1.0) -> np.ndarray:
    return np.round(tonemap(img, exposure) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray, exposure: float = 1.0) -> Path:
    path = Path(path)
    Image.fromarray(to_8bit(img, exposure)).save(path)
    return path


def read_image(path) -> np.ndarray:
    """Linear radiance from a PFM, or sRGB values in [0, 1] from any 8-bit format."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
