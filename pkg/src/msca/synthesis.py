"""Conditional-denormalization decoder, full generator and patch discriminator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .attention import DEFAULT_K, AttentionPack, MscaParams, msca_multiscale
from .diffcore import ShapeError, Tensor
from .params import Conv, load_arrays, named_tensors
from .pyramid import (
    LEVELS,
    ExternalFeatures,
    FeaturePyramid,
    LabelMap,
    ToyEncoder,
    extract_image_features,
    extract_label_features,
    init_image_kernels,
    init_label_kernels,
)

NORM_EPS = 1e-5


@dataclass
class SpadeBlock:
    """Residual block whose normalization scale and shift come from a conditioning map."""

    shared: Conv   # cond -> hidden, 3x3
    gamma: Conv    # hidden -> cin, 3x3
    beta: Conv     # hidden -> cin, 3x3
    conv1: Conv    # cin -> cout, 3x3
    conv2: Conv    # cout -> cout, 3x3
    skip: Conv | None = None  # 1x1 without bias, only when cin != cout

    @classmethod
    def init(cls, rng, cin: int, cout: int, cond: int, hidden: int = 32, dtype=np.float32):
        return cls(
            shared=Conv.init(rng, hidden, cond, kernel=3, gain=1.4, dtype=dtype),
            gamma=Conv.init(rng, cin, hidden, kernel=3, gain=0.5, dtype=dtype),
            beta=Conv.init(rng, cin, hidden, kernel=3, gain=0.5, dtype=dtype),
            conv1=Conv.init(rng, cout, cin, kernel=3, gain=1.4, dtype=dtype),
            conv2=Conv.init(rng, cout, cout, kernel=3, gain=0.5, dtype=dtype),
            skip=Conv.init(rng, cout, cin, bias=False, dtype=dtype) if cin != cout else None,
        )

    @property
    def cin(self) -> int:
        return self.conv1.cin

    @property
    def cout(self) -> int:
        return self.conv1.cout


@dataclass
class DecoderParams:
    head: Conv                # coarsest conditioning -> first block width, 3x3
    blocks: list[SpadeBlock]  # coarsest scale first
    out: Conv                 # last width -> 3 channels, 3x3


def _match_extent(cond: Tensor, h: int, w: int) -> Tensor:
    while cond.shape[1] > h:
        cond = dc.avg_pool2(cond)
    while cond.shape[1] < h:
        cond = dc.bilinear_up2(cond)
    if cond.shape[1:] != (h, w):
        raise ShapeError(f"cannot resize conditioning {cond.shape} to {h}x{w}")
    return cond


def modulation(cond: Tensor, block: SpadeBlock) -> tuple[Tensor, Tensor]:
    actv = dc.leaky_relu(dc.conv3x3(cond, block.shared.w, block.shared.b))
    gamma = dc.conv3x3(actv, block.gamma.w, block.gamma.b)
    beta = dc.conv3x3(actv, block.beta.w, block.beta.b)
    return gamma, beta


def spade_block_forward(h: Tensor, cond: Tensor, block: SpadeBlock) -> Tensor:
    """``skip(h) + conv2(act(conv1(act(norm(h) * (1 + gamma) + beta))))``."""
    if h.shape[0] != block.cin:
        raise ShapeError(f"block expects {block.cin} channels, got {h.shape[0]}")
    cond = _match_extent(cond, h.shape[1], h.shape[2])
    gamma, beta = modulation(cond, block)
    x = dc.add(dc.mul(dc.instance_norm(h, NORM_EPS), dc.add(gamma, 1.0)), beta)
    x = dc.conv3x3(dc.leaky_relu(x), block.conv1.w, block.conv1.b)
    x = dc.conv3x3(dc.leaky_relu(x), block.conv2.w, block.conv2.b)
    skip = h if block.skip is None else dc.conv1x1(h, block.skip.w)
    return dc.add(skip, x)


def decode(aligned: FeaturePyramid, structure: FeaturePyramid, params: DecoderParams) -> Tensor:
    """Coarse-to-fine synthesis: one block per scale, x2 upsampling between scales."""
    if len(aligned) != len(structure) or len(aligned) != len(params.blocks):
        raise ShapeError(f"decoder has {len(params.blocks)} blocks for pyramids of depth "
                         f"{len(aligned)} / {len(structure)}")
    top = len(aligned) - 1
    conds = [dc.concat([fx, fc], axis=0) for fx, fc in zip(aligned, structure)]
    h = dc.conv3x3(conds[top], params.head.w, params.head.b)
    for j, block in enumerate(params.blocks):
        scale = top - j
        h = spade_block_forward(h, conds[scale], block)
        if scale > 0:
            h = dc.bilinear_up2(h)
    return dc.tanh(dc.conv3x3(dc.leaky_relu(h), params.out.w, params.out.b))


# ---------------------------------------------------------------- generator

@dataclass(frozen=True)
class ModelConfig:
    classes: int = 8
    levels: int = LEVELS
    image_channels: int = 32                      # N
    label_channels: int = 32                      # width of label features
    slots: tuple[int, ...] = DEFAULT_K            # K per scale, finest first
    backbone_widths: tuple[int, ...] = (16, 32, 32, 32, 32)
    decoder_widths: tuple[int, ...] = (128, 96, 64, 48, 32)  # coarsest block first
    spade_hidden: int = 32
    gate_hidden: tuple[int, ...] | None = None    # default 2K per scale

    def __post_init__(self):
        n = self.levels + 1
        for name in ("slots", "backbone_widths", "decoder_widths"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} needs {n} entries for {self.levels} levels")
        if min(self.slots) < 1:
            raise ValueError("every scale needs K >= 1")

    @classmethod
    def tiny(cls, classes: int = 3, levels: int = 3, **kw) -> "ModelConfig":
        """Small widths for gradient checks and fast tests."""
        n = levels + 1
        base = dict(classes=classes, levels=levels, image_channels=4, label_channels=4,
                    slots=(2,) * n, backbone_widths=(4,) * n,
                    decoder_widths=tuple(max(8 - 2 * j, 4) for j in range(n)), spade_hidden=4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def infer(cls, arrays: dict[str, np.ndarray]) -> "ModelConfig":
        """Recover the architecture from checkpoint tensor shapes."""
        levels = sum(1 for k in arrays if k.startswith("wx.") and k.endswith(".w")) - 1
        n = levels + 1
        slots = tuple(arrays[f"msca.{i}.phi"].shape[0] for i in range(n))
        hidden = tuple(arrays[f"msca.{i}.w1"].shape[0] for i in range(n))
        return cls(
            classes=arrays[f"wc.{levels}.w"].shape[1],
            levels=levels,
            image_channels=arrays["wx.0.w"].shape[0],
            label_channels=arrays["wc.0.w"].shape[0],
            slots=slots,
            backbone_widths=tuple(arrays[f"wx.{i}.w"].shape[1] for i in range(n)),
            decoder_widths=tuple(arrays[f"decoder.blocks.{j}.conv1.w"].shape[0] for j in range(n)),
            spade_hidden=arrays["decoder.blocks.0.shared.w"].shape[0],
            gate_hidden=None if hidden == tuple(2 * k for k in slots) else hidden,
        )


@dataclass
class GeneratorParams:
    """All generator weights. ``backbone`` is frozen; everything else trains."""

    backbone: ToyEncoder | ExternalFeatures
    wx: list[Conv]
    wc: list[Conv]
    msca: list[MscaParams]
    decoder: DecoderParams
    config: ModelConfig = field(default_factory=ModelConfig, metadata={"static": True})

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "GeneratorParams":
        rng = np.random.default_rng(seed)
        c = config
        backbone = ToyEncoder.init(rng, c.backbone_widths, dtype=dtype)
        wx = init_image_kernels(rng, c.backbone_widths, c.image_channels, dtype=dtype)
        wc = init_label_kernels(rng, c.classes, c.levels, c.label_channels, dtype=dtype)
        hidden = c.gate_hidden or tuple(2 * k for k in c.slots)
        msca = [MscaParams.init(rng, c.image_channels, c.label_channels, c.label_channels, k,
                                hidden=hd, dtype=dtype) for k, hd in zip(c.slots, hidden)]
        cond = c.image_channels + c.label_channels
        widths = c.decoder_widths
        blocks = [SpadeBlock.init(rng, widths[max(j - 1, 0)], widths[j], cond, c.spade_hidden,
                                  dtype=dtype) for j in range(len(widths))]
        decoder = DecoderParams(
            head=Conv.init(rng, widths[0], cond, kernel=3, dtype=dtype),
            blocks=blocks,
            out=Conv.init(rng, 3, widths[-1], kernel=3, gain=0.5, dtype=dtype),
        )
        return cls(backbone, wx, wc, msca, decoder, config)

    def named(self) -> dict[str, Tensor]:
        return named_tensors(self)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named().items() if not k.startswith("backbone.")}

    @property
    def dtype(self):
        return self.wx[0].w.dtype

    def astype(self, dtype) -> "GeneratorParams":
        arrays = {k: v.data.astype(dtype) for k, v in self.named().items()}
        return self.load(arrays, backbone=None if isinstance(self.backbone, ToyEncoder)
                         else self.backbone)

    @classmethod
    def load(cls, arrays: dict[str, np.ndarray], backbone=None) -> "GeneratorParams":
        """Rebuild from a flat name -> array mapping (checkpoint contents)."""
        config = ModelConfig.infer(arrays)
        skeleton = cls.init(config, seed=0, dtype=arrays["wx.0.w"].dtype)
        if backbone is not None:
            skeleton.backbone = backbone
            arrays = {k: v for k, v in arrays.items() if not k.startswith("backbone.")}
        return load_arrays(skeleton, arrays)


def generator_forward(c1: LabelMap, x2: Tensor, c2: LabelMap,
                      params: GeneratorParams) -> tuple[Tensor, list[AttentionPack]]:
    """Synthesize an image with the layout of ``c1`` and the style of ``x2``."""
    image_pyr = extract_image_features(x2, params.backbone, params.wx)
    target_pyr = extract_label_features(c1, params.wc)
    exemplar_pyr = extract_label_features(c2, params.wc)
    aligned, packs = msca_multiscale(image_pyr, target_pyr, exemplar_pyr, params.msca)
    return decode(aligned, target_pyr, params.decoder), packs


# ---------------------------------------------------------------- discriminator

@dataclass
class DiscParams:
    stages: list[Conv]  # stride-2 3x3
    score: Conv         # 3x3 -> 1 channel

    @classmethod
    def init(cls, classes: int, widths: Sequence[int] = (32, 48, 64, 64), seed: int = 1,
             dtype=np.float32) -> "DiscParams":
        rng = np.random.default_rng(seed)
        cin = 6 + 2 * classes
        stages = []
        for wd in widths:
            stages.append(Conv.init(rng, wd, cin, kernel=3, gain=1.4, dtype=dtype))
            cin = wd
        return cls(stages, Conv.init(rng, 1, cin, kernel=3, dtype=dtype))

    def named(self) -> dict[str, Tensor]:
        return named_tensors(self)

    @classmethod
    def load(cls, arrays: dict[str, np.ndarray]) -> "DiscParams":
        n = sum(1 for k in arrays if k.startswith("stages.") and k.endswith(".w"))
        widths = [arrays[f"stages.{i}.w"].shape[0] for i in range(n)]
        classes = (arrays["stages.0.w"].shape[1] - 6) // 2
        skeleton = cls.init(classes, widths, dtype=arrays["score.w"].dtype)
        return load_arrays(skeleton, arrays)


def resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Separable linear resampling with half-pixel centres (data preparation only)."""
    img = np.asarray(img)
    _, H, W = img.shape
    if (H, W) == (h, w):
        return img
    x = np.ascontiguousarray(img, dtype=np.float64)
    out = _resample_matrix(H, h) @ (x @ _resample_matrix(W, w).T)
    return out.astype(img.dtype, copy=False)


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    # box filter when shrinking, linear when enlarging
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    if scale > 1:
        for o in range(n_out):
            lo, hi = o * scale, (o + 1) * scale
            for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                m[o, i] = min(hi, i + 1) - max(lo, i)
        return m / scale
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        m[o, i0] += 1 - (src - i0)
        m[o, i1] += src - i0
    return m


def discriminator_forward(x: Tensor, c_p: LabelMap, x_q: Tensor, c_q: LabelMap,
                          params: DiscParams) -> tuple[Tensor, list[Tensor]]:
    """Patch scores for ``x`` conditioned on its layout and the exemplar pair."""
    _, h, w = x.shape
    if c_p.shape != (h, w):
        raise ShapeError(f"label map {c_p.shape} does not match image extent {(h, w)}")
    if x_q.shape[1:] != (h, w):
        x_q = Tensor(resize_image(x_q.data, h, w), dtype=x.dtype)
    if c_q.shape != (h, w):
        c_q = c_q.resize(h, w)
    feats = []
    inp = dc.concat([x, c_p.one_hot(x.dtype), x_q, c_q.one_hot(x.dtype)], axis=0)
    expected = params.stages[0].cin
    if inp.shape[0] != expected:
        raise ShapeError(f"discriminator expects {expected} input channels, got {inp.shape[0]}")
    hdn = inp
    for stage in params.stages:
        hdn = dc.leaky_relu(dc.conv3x3(hdn, stage.w, stage.b, stride=2))
        feats.append(hdn)
    return dc.conv3x3(hdn, params.score.w, params.score.b), feats
