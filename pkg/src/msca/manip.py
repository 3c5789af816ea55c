"""Test-time attention manipulation: style interpolation, extrapolation, style swapping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .attention import (
    apply_gate,
    channel_aggregate,
    channel_attention,
    gate,
    spatial_aggregate,
    spatial_logits,
)
from .diffcore import ShapeError, Tensor
from .pyramid import FeaturePyramid, LabelMap, extract_image_features, extract_label_features
from .synthesis import GeneratorParams, decode, generator_forward

INTERP_EPS = 1e-4


@dataclass(frozen=True)
class Exemplar:
    image: np.ndarray | Tensor   # (3, H, W) in [-1, 1]
    label: LabelMap


def _as_tensor(img, params: GeneratorParams) -> Tensor:
    return Tensor(getattr(img, "data", img), dtype=params.dtype)


def _exemplar_pyramids(ex: Exemplar, params: GeneratorParams) -> tuple[FeaturePyramid, FeaturePyramid]:
    x = _as_tensor(ex.image, params)
    if x.shape[1:] != ex.label.shape:
        raise ShapeError(f"exemplar image {x.shape[1:]} and label map {ex.label.shape} differ")
    return extract_image_features(x, params.backbone, params.wx), extract_label_features(ex.label, params.wc)


def clamp_factor(a: float, eps: float = INTERP_EPS) -> float:
    if not math.isfinite(a):
        raise ValueError(f"interpolation factor must be finite, got {a}")
    return min(max(float(a), eps), 1.0 - eps)


# ---------------------------------------------------------------- two-exemplar interpolation

def interpolate_styles(c1: LabelMap, ex2: Exemplar, ex3: Exemplar, a: float,
                       params: GeneratorParams, eps: float = INTERP_EPS) -> Tensor:
    """Blend the styles of two exemplars with factor ``a`` (1 keeps only ``ex2``).

    At every scale both exemplars' spatial logits are placed side by side along
    the width axis and normalized by one softmax over the doubled domain, with
    ``log(a / (1 - a))`` added to the logits of ``ex2``. The gates are mixed
    linearly; channel attention still comes from ``c1``.
    """
    a = clamp_factor(a, eps)
    bias = math.log(a / (1.0 - a))
    img2, lab2 = _exemplar_pyramids(ex2, params)
    img3, lab3 = _exemplar_pyramids(ex3, params)
    if img2[0].shape != img3[0].shape:
        raise ShapeError(f"exemplar extents differ: {img2[0].shape[1:]} vs {img3[0].shape[1:]}")
    target = extract_label_features(c1, params.wc)
    aligned = []
    for i, p in enumerate(params.msca):
        logits = dc.concat([dc.add(spatial_logits(img2[i], lab2[i], p.phi), bias),
                            spatial_logits(img3[i], lab3[i], p.phi)], axis=2)
        alpha = dc.softmax_spatial(logits)
        bank = spatial_aggregate(dc.concat([img2[i], img3[i]], axis=2), alpha)
        g = dc.add(dc.mul(gate(target[i], lab2[i], p), a), dc.mul(gate(target[i], lab3[i], p), 1.0 - a))
        aligned.append(channel_aggregate(apply_gate(bank, g), channel_attention(target[i], p.psi)))
    return decode(FeaturePyramid(tuple(aligned)), target, params.decoder)


def joint_attention(c1: LabelMap, ex2: Exemplar, ex3: Exemplar, a: float, params: GeneratorParams,
                    eps: float = INTERP_EPS) -> list[Tensor]:
    """The per-scale joint spatial attention used by :func:`interpolate_styles`."""
    bias = math.log(clamp_factor(a, eps) / (1.0 - clamp_factor(a, eps)))
    img2, lab2 = _exemplar_pyramids(ex2, params)
    img3, lab3 = _exemplar_pyramids(ex3, params)
    return [dc.softmax_spatial(dc.concat([dc.add(spatial_logits(img2[i], lab2[i], p.phi), bias),
                                          spatial_logits(img3[i], lab3[i], p.phi)], axis=2))
            for i, p in enumerate(params.msca)]


# ---------------------------------------------------------------- bank mixing / spatial interpolation

def _masked_banks(c1: LabelMap, ex: Exemplar, params: GeneratorParams, target: FeaturePyramid):
    img, lab = _exemplar_pyramids(ex, params)
    banks = []
    for i, p in enumerate(params.msca):
        alpha = dc.softmax_spatial(spatial_logits(img[i], lab[i], p.phi))
        banks.append(apply_gate(spatial_aggregate(img[i], alpha), gate(target[i], lab[i], p)))
    return banks


def mix_banks(c1: LabelMap, ex2: Exemplar, ex3: Exemplar, t: float, params: GeneratorParams) -> Tensor:
    """Synthesize from the convex combination ``t V2 + (1 - t) V3`` of the masked banks."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"mixing factor must lie in [0, 1], got {t}")
    target = extract_label_features(c1, params.wc)
    b2 = _masked_banks(c1, ex2, params, target)
    b3 = _masked_banks(c1, ex3, params, target)
    aligned = [channel_aggregate(dc.add(dc.mul(v2, t), dc.mul(v3, 1.0 - t)),
                                 channel_attention(target[i], p.psi))
               for i, (p, v2, v3) in enumerate(zip(params.msca, b2, b3))]
    return decode(FeaturePyramid(tuple(aligned)), target, params.decoder)


def _weight_pyramid(w: np.ndarray, levels: int, dtype) -> list[Tensor]:
    out = [Tensor(w, dtype=dtype)]
    for _ in range(levels):
        out.append(dc.avg_pool2(out[-1]))
    return out


def spatial_interpolate(c1: LabelMap, ex2: Exemplar, ex3: Exemplar, w,
                        params: GeneratorParams) -> Tensor:
    """Per-pixel style blend: ``w(j)`` of ``ex2`` and ``1 - w(j)`` of ``ex3`` at target pixel ``j``.

    ``w`` has shape ``(1, H, W)`` (or ``(H, W)``) at the target's finest
    extent and is average-pooled down to every coarser scale.
    """
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    if w.shape != (1, *c1.shape):
        raise ShapeError(f"weight map {w.shape} does not match target extent {c1.shape}")
    if not np.isfinite(w).all() or w.min() < 0 or w.max() > 1:
        raise ValueError("weight map values must lie in [0, 1]")
    target = extract_label_features(c1, params.wc)
    b2 = _masked_banks(c1, ex2, params, target)
    b3 = _masked_banks(c1, ex3, params, target)
    ws = _weight_pyramid(w, len(params.msca) - 1, params.dtype)
    aligned = []
    for i, p in enumerate(params.msca):
        beta = channel_attention(target[i], p.psi)
        f2, f3 = channel_aggregate(b2[i], beta), channel_aggregate(b3[i], beta)
        aligned.append(dc.add(dc.mul(f2, ws[i]), dc.mul(f3, dc.sub(1.0, ws[i]))))
    return decode(FeaturePyramid(tuple(aligned)), target, params.decoder)


def horizontal_ramp(h: int, w: int) -> np.ndarray:
    """Weight map going from 1 at the left edge to 0 at the right edge."""
    return np.broadcast_to(np.linspace(1.0, 0.0, w), (1, h, w)).copy()


# ---------------------------------------------------------------- extrapolation

@dataclass
class Extrapolation:
    image: np.ndarray          # (3, H, W)
    weight: np.ndarray         # (H, W) accumulated blend weight before normalization
    sites: list[tuple[int, int]]
    patch: int


def hann_window(n: int) -> np.ndarray:
    """Separable profile ``sin^2(pi (i + 0.5) / n)``: positive everywhere, smallest at the edges."""
    return np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2


def extrapolation_sites(h: int, w: int, patch: int, seed: int, n_random: int = 10) -> list[tuple[int, int]]:
    corners = [(0, 0), (0, w - patch), (h - patch, 0), (h - patch, w - patch)]
    rng = np.random.default_rng(seed)
    extra = [(int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1)))
             for _ in range(n_random)]
    return corners + extra


def extrapolate(center: Exemplar, global_label: LabelMap, params: GeneratorParams, seed: int = 0,
                n_random: int = 10) -> Extrapolation:
    """Grow ``center`` to the extent of ``global_label`` (twice the centre extent).

    Patches of the centre's size are synthesized at the four corners and at
    ``n_random`` seeded positions, each using the centre as exemplar, then
    feathered together; the centre itself is pasted back unchanged.
    """
    cx = np.asarray(getattr(center.image, "data", center.image))
    ph, pw = center.label.shape
    h, w = global_label.shape
    if ph != pw or (h, w) != (2 * ph, 2 * pw):
        raise ShapeError(f"global label {global_label.shape} must be exactly twice the square "
                         f"centre crop {center.label.shape}")
    patch = ph
    sites = extrapolation_sites(h, w, patch, seed, n_random)
    win = np.outer(hann_window(patch), hann_window(patch))
    acc = np.zeros((3, h, w))
    wsum = np.zeros((h, w))
    x_ex = _as_tensor(cx, params)
    for top, left in sites:
        c1 = global_label.crop(top, left, patch, patch)
        out, _ = generator_forward(c1, x_ex, center.label, params)
        acc[:, top:top + patch, left:left + patch] += out.data * win
        wsum[top:top + patch, left:left + patch] += win
    img = acc / wsum
    off_y, off_x = (h - patch) // 2, (w - patch) // 2
    img[:, off_y:off_y + patch, off_x:off_x + patch] = cx
    return Extrapolation(img, wsum, sites, patch)


def seam_ratio(img: np.ndarray, sites: Sequence[tuple[int, int]], patch: int,
               exclude: tuple[int, int, int, int] | None = None) -> float:
    """Mean gradient magnitude on patch borders divided by the mean elsewhere.

    Pixel pairs straddling a patch edge count as border; ``exclude``
    (top, left, h, w) removes a rectangle's edges from the border set. With no
    border pixels left the ratio is 1.
    """
    gy = np.abs(np.diff(img, axis=1)).sum(axis=0)   # (H-1, W): between rows y and y+1
    gx = np.abs(np.diff(img, axis=2)).sum(axis=0)   # (H, W-1)
    my = np.zeros(gy.shape, bool)
    mx = np.zeros(gx.shape, bool)
    h, w = img.shape[1:]
    for top, left in sites:
        for y in (top - 1, top + patch - 1):
            if 0 <= y < h - 1:
                my[y, left:left + patch] = True
        for x in (left - 1, left + patch - 1):
            if 0 <= x < w - 1:
                mx[top:top + patch, x] = True
    if exclude is not None:
        t, l, eh, ew = exclude
        for y in (t - 1, t + eh - 1):
            if 0 <= y < h - 1:
                my[y, l:l + ew] = False
        for x in (l - 1, l + ew - 1):
            if 0 <= x < w - 1:
                mx[t:t + eh, x] = False
    border = np.concatenate([gy[my], gx[mx]])
    if border.size == 0:
        return 1.0
    interior = np.concatenate([gy[~my], gx[~mx]])
    return float(border.mean() / max(interior.mean(), 1e-12))


# ---------------------------------------------------------------- style swapping

def style_swap_grid(scenes: Sequence[Exemplar],
                    params: GeneratorParams) -> tuple[np.ndarray, list[list[np.ndarray]]]:
    """``n x n`` grid whose cell (r, c) has the layout of scene r and the style of scene c."""
    if len(scenes) < 2:
        raise ValueError("style swapping needs at least two scenes")
    shape = scenes[0].label.shape
    if any(s.label.shape != shape for s in scenes):
        raise ShapeError("all scenes must share one extent")
    h, w = shape
    n = len(scenes)
    cells = [[generator_forward(r.label, _as_tensor(c.image, params), c.label, params)[0].data
              for c in scenes] for r in scenes]
    grid = np.zeros((3, n * h, n * w))
    for i in range(n):
        for j in range(n):
            grid[:, i * h:(i + 1) * h, j * w:(j + 1) * w] = cells[i][j]
    return grid, cells
