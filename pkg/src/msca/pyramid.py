"""Multi-scale features for exemplar images and label maps."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import checkpoint
from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .params import Conv

LEVELS = 4  # finest scale 0 .. coarsest scale LEVELS


class LabelMap:
    """Per-pixel class indices in ``[0, classes)``."""

    def __init__(self, grid, classes: int):
        grid = np.array(grid, dtype=np.int64)
        if grid.ndim != 2:
            raise ValueError(f"label grid must be 2-D, got shape {grid.shape}")
        if classes < 1:
            raise ValueError("classes must be >= 1")
        if grid.size and (grid.min() < 0 or grid.max() >= classes):
            raise ValueError(f"class indices must lie in [0, {classes}), "
                             f"got range [{grid.min()}, {grid.max()}]")
        grid.flags.writeable = False
        self.grid = grid
        self.classes = classes

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def __eq__(self, other) -> bool:
        return (isinstance(other, LabelMap) and self.classes == other.classes
                and np.array_equal(self.grid, other.grid))

    def __repr__(self) -> str:
        return f"LabelMap(shape={self.shape}, classes={self.classes})"

    def one_hot(self, dtype=None) -> Tensor:
        eye = np.eye(self.classes, dtype=dtype or dc.default_dtype())
        return Tensor(eye[self.grid].transpose(2, 0, 1))

    def downsample(self, factor: int) -> "LabelMap":
        # top-left sample of every factor x factor cell
        return LabelMap(self.grid[::factor, ::factor], self.classes)

    def resize(self, h: int, w: int) -> "LabelMap":
        """Nearest-neighbour resize to ``(h, w)``."""
        H, W = self.shape
        rows = np.minimum((np.arange(h) * H) // h, H - 1)
        cols = np.minimum((np.arange(w) * W) // w, W - 1)
        return LabelMap(self.grid[np.ix_(rows, cols)], self.classes)

    def crop(self, top: int, left: int, h: int, w: int) -> "LabelMap":
        return LabelMap(self.grid[top:top + h, left:left + w], self.classes)

    def flip_h(self) -> "LabelMap":
        return LabelMap(self.grid[:, ::-1], self.classes)


@dataclass(frozen=True)
class FeaturePyramid:
    """Feature maps for scales ``0..L``; level ``i`` has extent ``base / 2**i``."""

    levels: tuple[Tensor, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ShapeError("empty pyramid")
        _, h, w = levels[0].shape
        for i, lv in enumerate(levels):
            if lv.ndim != 3 or lv.shape[1:] != (h >> i, w >> i):
                raise ShapeError(f"pyramid level {i} has shape {lv.shape}, "
                                 f"expected extent {(h >> i, w >> i)}")

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.levels)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(lv.shape[0] for lv in self.levels)


def check_extent(h: int, w: int, levels: int) -> None:
    step = 2 ** levels
    if h % step or w % step or h == 0 or w == 0:
        raise ShapeError(f"extent {h}x{w} is not divisible by 2^{levels} = {step}")


# ---------------------------------------------------------------- backbones

@dataclass
class ToyEncoder:
    """Frozen stand-in image backbone.

    Stage 0 is a stride-1 3x3 convolution, stages 1..L halve the resolution
    with stride 2; every stage is followed by the leaky activation. Weights
    are seeded random and never trained.
    """

    stages: list[Conv]

    @classmethod
    def init(cls, rng: np.random.Generator, widths: Sequence[int] = (16, 32, 32, 32, 32),
             in_channels: int = 3, dtype=np.float32) -> "ToyEncoder":
        stages, cin = [], in_channels
        for width in widths:
            stages.append(Conv.init(rng, width, cin, kernel=3, gain=1.4, dtype=dtype))
            cin = width
        frozen = [Conv(Tensor(s.w), Tensor(s.b)) for s in stages]
        return cls(frozen)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.cout for s in self.stages)

    @property
    def depth(self) -> int:
        return len(self.stages) - 1

    def __call__(self, x: Tensor) -> list[Tensor]:
        check_extent(x.shape[1], x.shape[2], self.depth)
        outs, h = [], x
        for i, stage in enumerate(self.stages):
            h = dc.leaky_relu(dc.conv3x3(h, stage.w, stage.b, stride=1 if i == 0 else 2))
            outs.append(h)
        return outs


@dataclass
class ExternalFeatures:
    """Backbone that returns precomputed per-scale features read from record files.

    Each file holds one tensor record of shape ``(C_i, H / 2**i, W / 2**i)``.
    The image handed to ``__call__`` is only used to validate extents.
    """

    levels: list[np.ndarray] = field(repr=False)

    @classmethod
    def from_files(cls, paths: Sequence[str | os.PathLike]) -> "ExternalFeatures":
        levels = []
        for p in paths:
            records = checkpoint.load(p)
            if len(records) != 1:
                raise ValueError(f"{p}: expected exactly one tensor record, found {len(records)}")
            (arr,) = records.values()
            if arr.ndim != 3:
                raise ShapeError(f"{p}: feature record must be rank 3, got {arr.shape}")
            levels.append(arr)
        return cls(levels)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.levels)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def __call__(self, x: Tensor) -> list[Tensor]:
        _, h, w = x.shape
        out = []
        for i, arr in enumerate(self.levels):
            if arr.shape[1:] != (h >> i, w >> i):
                raise ShapeError(f"external feature level {i} has extent {arr.shape[1:]}, "
                                 f"image needs {(h >> i, w >> i)}")
            out.append(Tensor(arr, dtype=x.dtype))
        return out


# ---------------------------------------------------------------- feature extraction

def extract_image_features(x: Tensor, backbone, wx: Sequence[Conv]) -> FeaturePyramid:
    """Compress each backbone level with its own 1x1 kernel."""
    levels = len(wx) - 1
    check_extent(x.shape[1], x.shape[2], levels)
    feats = backbone(x)
    if len(feats) != len(wx):
        raise ShapeError(f"backbone emits {len(feats)} levels, kernels cover {len(wx)}")
    return FeaturePyramid(tuple(dc.conv1x1(f, k.w, k.b) for f, k in zip(feats, wx)))


def resize_label(c: LabelMap, scale: int, dtype=None) -> Tensor:
    return c.downsample(2 ** scale).one_hot(dtype)


def extract_label_features(c: LabelMap, wc: Sequence[Conv], dtype=None) -> FeaturePyramid:
    """Coarse-to-fine label features.

    The coarsest level sees only the resized one-hot map; every finer level
    sees the upsampled coarser features concatenated with its own one-hot map.
    """
    levels = len(wc) - 1
    check_extent(*c.shape, levels)
    dtype = dtype or wc[0].w.dtype
    expected = c.classes
    for i in range(levels, -1, -1):
        if wc[i].cin != expected:
            raise ShapeError(f"label kernel {i} expects {wc[i].cin} inputs, got {expected}")
        expected = wc[i].cout + c.classes
    out: list[Tensor | None] = [None] * (levels + 1)
    prev = None
    for i in range(levels, -1, -1):
        onehot = resize_label(c, i, dtype)
        inp = onehot if prev is None else dc.concat([dc.bilinear_up2(prev), onehot], axis=0)
        prev = dc.leaky_relu(dc.conv1x1(inp, wc[i].w, wc[i].b))
        out[i] = prev
    return FeaturePyramid(tuple(out))


def init_image_kernels(rng, in_channels: Sequence[int], width: int = 32, dtype=np.float32):
    return [Conv.init(rng, width, cin, dtype=dtype) for cin in in_channels]


def init_label_kernels(rng, classes: int, levels: int = LEVELS, width: int = 32, dtype=np.float32):
    kernels = [Conv.init(rng, width, width + classes, gain=1.4, dtype=dtype) for _ in range(levels)]
    kernels.append(Conv.init(rng, width, classes, gain=1.4, dtype=dtype))
    return kernels
