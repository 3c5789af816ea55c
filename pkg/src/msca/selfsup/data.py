"""Synthetic scenes, dataset files and patch-pair sampling."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import imageio
from ..pyramid import LabelMap
from ..synthesis import resize_image

CROP_FACTOR = 1.5           # phase-2 crop edge relative to the patch edge
REGIONS = (3, 6)            # inclusive range of Voronoi regions per scene


@dataclass(frozen=True)
class Scene:
    image: np.ndarray       # (3, H, W) in [-1, 1]
    label: LabelMap
    name: str = ""

    @property
    def extent(self) -> tuple[int, int]:
        return self.label.shape

    def resized(self, h: int, w: int) -> "Scene":
        return Scene(resize_image(self.image, h, w), self.label.resize(h, w), self.name)

    def flip_h(self) -> "Scene":
        return Scene(self.image[:, :, ::-1].copy(), self.label.flip_h(), self.name)


def gen_synthetic_scene(rng: np.random.Generator, classes: int, extent: int | tuple[int, int],
                        name: str = "") -> Scene:
    """Voronoi layout with one flat colour plus a sinusoidal texture per class.

    The palette and textures are drawn once per scene, so every patch of the
    scene shows the same class-to-appearance mapping.
    """
    h, w = (extent, extent) if isinstance(extent, int) else extent
    n = int(rng.integers(REGIONS[0], REGIONS[1] + 1))
    sites = rng.uniform(0, 1, (n, 2)) * (h, w)
    region_class = rng.integers(0, classes, n)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dist = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    grid = region_class[dist.argmin(axis=0)]

    palette = rng.uniform(-0.8, 0.8, (classes, 3))
    freq = rng.uniform(0.05, 0.35, (classes, 2)) * rng.choice([-1, 1], (classes, 2))
    phase = rng.uniform(0, 2 * np.pi, classes)
    amp = rng.uniform(0.05, 0.2, classes)
    tint = rng.uniform(-1, 1, (classes, 3))
    wave = np.sin(freq[grid, 0] * yy + freq[grid, 1] * xx + phase[grid]) * amp[grid]
    img = palette[grid].transpose(2, 0, 1) + tint[grid].transpose(2, 0, 1) * wave[None]
    return Scene(np.clip(img, -1, 1), LabelMap(grid, classes), name)


def gen_dataset(n: int, classes: int, extent: int, seed: int = 0) -> list[Scene]:
    return [gen_synthetic_scene(np.random.default_rng([seed, i]), classes, extent,
                                name=f"scene_{i:04d}") for i in range(n)]


def save_dataset(directory: str | os.PathLike, scenes: Sequence[Scene]) -> list[Path]:
    """Write ``<name>.png`` plus ``<name>_label.png`` per scene."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(scenes):
        stem = s.name or f"scene_{i:04d}"
        imageio.write_image(directory / f"{stem}.png", s.image)
        imageio.write_label_grid(directory / f"{stem}_label.png", s.label.grid)
        written += [directory / f"{stem}.png", directory / f"{stem}_label.png"]
    return written


def load_dataset(directory: str | os.PathLike, classes: int, dtype=np.float32) -> list[Scene]:
    directory = Path(directory)
    images = sorted(p for p in directory.glob("*.png") if not p.stem.endswith("_label"))
    if not images:
        raise FileNotFoundError(f"{directory}: no scene images found")
    scenes = []
    for p in images:
        lp = p.with_name(f"{p.stem}_label.png")
        if not lp.exists():
            raise FileNotFoundError(f"{p}: missing label map {lp.name}")
        img = imageio.read_image(p, dtype)
        label = LabelMap(imageio.read_label_grid(lp), classes)
        if label.shape != img.shape[1:]:
            raise ValueError(f"{p.name}: image {img.shape[1:]} and label {label.shape} differ")
        scenes.append(Scene(img, label, p.stem))
    return scenes


def scene_index(name: str) -> int | None:
    m = re.search(r"(\d+)$", name)
    return int(m.group(1)) if m else None


# ---------------------------------------------------------------- patch pairs

@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    def intersection(self, other: "Rect") -> int:
        dy = min(self.top + self.height, other.top + other.height) - max(self.top, other.top)
        dx = min(self.left + self.width, other.left + other.width) - max(self.left, other.left)
        return max(dy, 0) * max(dx, 0)

    def iou(self, other: "Rect") -> float:
        inter = self.intersection(other)
        return inter / (self.height * self.width + other.height * other.width - inter)


@dataclass(frozen=True)
class PatchPair:
    x_p: np.ndarray
    c_p: LabelMap
    x_q: np.ndarray
    c_q: LabelMap
    rect_p: Rect
    rect_q: Rect
    scale: float = 1.0      # source crop edge / patch edge


def _crop(scene: Scene, r: Rect, patch: int) -> tuple[np.ndarray, LabelMap]:
    img = scene.image[:, r.top:r.top + r.height, r.left:r.left + r.width]
    lab = scene.label.crop(r.top, r.left, r.height, r.width)
    if r.height != patch:
        img, lab = resize_image(img, patch, patch), lab.resize(patch, patch)
    return np.ascontiguousarray(img), lab


def sample_patch_pair(scene: Scene, phase: int, rng: np.random.Generator, patch: int,
                      flip: bool = False) -> PatchPair:
    """Target and exemplar crops from one scene.

    Phase 1 splits the scene along a random axis into two halves and places
    one crop inside each, so the crops never overlap. Phase 2 draws two
    independent ``CROP_FACTOR * patch`` crops and shrinks them to ``patch``.
    """
    h, w = scene.extent
    if phase == 1:
        other = {0: w, 1: h}
        axes = [a for a, size in ((0, h), (1, w)) if size >= 2 * patch and other[a] >= patch]
        if not axes:
            raise ValueError(f"phase-1 sampling of {patch}px patches requires a scene of at least "
                             f"{2 * patch}x{patch} (either orientation), got {h}x{w}")
        axis = axes[int(rng.integers(len(axes)))]
        half = (h if axis == 0 else w) // 2
        a = int(rng.integers(0, half - patch + 1))
        b = half + int(rng.integers(0, (h if axis == 0 else w) - half - patch + 1))
        cross_a = int(rng.integers(0, other[axis] - patch + 1))
        cross_b = int(rng.integers(0, other[axis] - patch + 1))
        if axis == 0:
            ra, rb = Rect(a, cross_a, patch, patch), Rect(b, cross_b, patch, patch)
        else:
            ra, rb = Rect(cross_a, a, patch, patch), Rect(cross_b, b, patch, patch)
        rect_p, rect_q = (ra, rb) if rng.integers(2) == 0 else (rb, ra)
        scale = 1.0
    elif phase == 2:
        crop = int(round(CROP_FACTOR * patch))
        if h < crop or w < crop:
            raise ValueError(f"phase-2 sampling of {patch}px patches requires a scene of at least "
                             f"{crop}x{crop}, got {h}x{w}")
        rect_p, rect_q = (Rect(int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1)),
                               crop, crop) for _ in range(2))
        scale = crop / patch
    else:
        raise ValueError(f"phase must be 1 or 2, got {phase}")
    x_p, c_p = _crop(scene, rect_p, patch)
    x_q, c_q = _crop(scene, rect_q, patch)
    if flip and rng.integers(2):
        x_p, c_p = x_p[:, :, ::-1].copy(), c_p.flip_h()
        x_q, c_q = x_q[:, :, ::-1].copy(), c_q.flip_h()
    return PatchPair(x_p, c_p, x_q, c_q, rect_p, rect_q, scale)
