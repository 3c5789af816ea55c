"""PNG input/output for images, label maps and attention maps."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def read_image(path: str | os.PathLike, dtype=np.float32) -> np.ndarray:
    """8-bit RGB PNG -> ``(3, H, W)`` array scaled to [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(dtype)


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    """``(3, H, W)`` array in [-1, 1] -> 8-bit RGB PNG."""
    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)


def read_label_grid(path: str | os.PathLike) -> np.ndarray:
    """Single-channel PNG whose pixel values are class indices."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(f"{path}: label maps must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def write_label_grid(path: str | os.PathLike, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.min() < 0 or grid.max() > 255:
        raise ValueError("class indices must fit in 8 bits")
    Image.fromarray(grid.astype(np.uint8)).save(path)


def write_gray(path: str | os.PathLike, m: np.ndarray) -> None:
    """Min-max normalized grayscale PNG of a 2-D map."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    Image.fromarray(np.rint(scaled * 255).astype(np.uint8)).save(path)
