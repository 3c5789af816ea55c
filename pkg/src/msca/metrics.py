"""PSNR, Gram style loss and the duplicating / mirroring evaluation tasks."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .selfsup.data import Scene
from .synthesis import GeneratorParams, generator_forward

TASKS = ("duplicate", "mirror")


def psnr(a, b) -> float:
    """PSNR in dB of two images in [-1, 1], compared on the [0, 1] scale with peak 1.

    Identical images give ``math.inf``.
    """
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: extents differ, {a.shape} vs {b.shape}")
    mse = float(np.mean(((a - b) / 2.0) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def gram(f: np.ndarray) -> np.ndarray:
    """Channel Gram matrix normalized by ``C * H * W``."""
    c, h, w = f.shape
    flat = f.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


def gram_distance(fa: Sequence[np.ndarray], fb: Sequence[np.ndarray]) -> float:
    if len(fa) != len(fb):
        raise ShapeError("feature lists differ in length")
    return math.fsum(float(np.mean((gram(x) - gram(y)) ** 2)) for x, y in zip(fa, fb))


def gram_style_loss(a, b, backbone) -> float:
    """Sum over backbone stages of the mean squared Gram-matrix difference."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"style loss: extents differ, {a.shape} vs {b.shape}")
    with dc.precision(np.float64):
        fa = [t.data for t in backbone(Tensor(a))]
        fb = [t.data for t in backbone(Tensor(b))]
    return gram_distance(fa, fb)


# ---------------------------------------------------------------- results

@dataclass
class EvalResult:
    task: str
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    style: list[float] = field(default_factory=list)

    def add(self, sample_id: str, p: float, s: float) -> None:
        if s < 0:
            raise ValueError("style loss must be non-negative")
        self.ids.append(sample_id)
        self.psnr.append(float(p))
        self.style.append(float(s))

    def summary(self) -> dict[str, float]:
        return {
            "psnr_mean": statistics.fmean(self.psnr),
            "psnr_median": statistics.median(self.psnr),
            "style_mean": statistics.fmean(self.style),
            "style_median": statistics.median(self.style),
        }

    def to_text(self) -> str:
        lines = [f"# task {self.task}"]
        lines += [f"{i} {p!r} {s!r}" for i, p, s in zip(self.ids, self.psnr, self.style)]
        if self.ids:
            agg = " ".join(f"{k}={v!r}" for k, v in self.summary().items())
            lines.append(f"# summary n={len(self.ids)} {agg}")
        return "\n".join(lines) + "\n"


def parse_results(text: str) -> list[EvalResult]:
    """Read back every result block of a (possibly appended-to) results file."""
    results: list[EvalResult] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("# task "):
            results.append(EvalResult(line[len("# task "):].strip()))
        elif line.startswith("#"):
            continue
        else:
            if not results:
                raise ValueError(f"line {lineno}: sample line before any '# task' header")
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'id psnr style_loss', got {line!r}")
            results[-1].add(parts[0], float(parts[1]), float(parts[2]))
    return results


def run_task(task: str, scenes: Sequence[Scene], params: GeneratorParams) -> EvalResult:
    """Duplicate: reconstruct each scene from itself. Mirror: from its horizontal mirror."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    result = EvalResult(task)
    for i, s in enumerate(scenes):
        ex = s if task == "duplicate" else s.flip_h()
        out, _ = generator_forward(s.label, Tensor(ex.image, dtype=params.dtype), ex.label, params)
        result.add(s.name or f"sample_{i:04d}", psnr(out.data, s.image),
                   gram_style_loss(out.data, s.image, params.backbone))
    return result
