"""Seeded finite-difference checks of every differentiable primitive."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import ops as dc
from .check import GradCheckReport, grad_check
from .tensor import Tensor, precision

SIZES = ((1, 1, 1), (2, 3, 5), (3, 8, 8))


def _n(r, *shape):
    return r.normal(size=shape)


# name -> (function of tensors, argument maker (c, h, w, rng) -> arrays)
PRIMITIVES = {
    "conv1x1": (lambda x, w, b: dc.conv1x1(x, w, b),
                lambda c, h, w, r: [_n(r, c, h, w), _n(r, c + 1, c), _n(r, c + 1)]),
    "conv3x3_s1": (lambda x, w, b: dc.conv3x3(x, w, b),
                   lambda c, h, w, r: [_n(r, c, h, w), _n(r, 2, c, 3, 3), _n(r, 2)]),
    "conv3x3_s2": (lambda x, w, b: dc.conv3x3(x, w, b, stride=2),
                   lambda c, h, w, r: [_n(r, c, h, w), _n(r, 2, c, 3, 3), _n(r, 2)]),
    "bilinear_up2": (dc.bilinear_up2, lambda c, h, w, r: [_n(r, c, h, w)]),
    "softmax_spatial": (dc.softmax_spatial, lambda c, h, w, r: [_n(r, c, h, w)]),
    "softmax_channel": (dc.softmax_channel, lambda c, h, w, r: [_n(r, c, h, w)]),
    "gap": (dc.gap, lambda c, h, w, r: [_n(r, c, h, w)]),
    "matmul": (dc.matmul, lambda c, h, w, r: [_n(r, c, h), _n(r, h, w)]),
    "leaky_relu": (dc.leaky_relu, lambda c, h, w, r: [_n(r, c, h, w)]),
    "sigmoid": (dc.sigmoid, lambda c, h, w, r: [_n(r, c, h, w)]),
    "tanh": (dc.tanh, lambda c, h, w, r: [_n(r, c, h, w)]),
    "softplus": (dc.softplus, lambda c, h, w, r: [_n(r, c, h, w)]),
    "instance_norm": (dc.instance_norm, lambda c, h, w, r: [_n(r, c, h, w)]),
    "avg_pool2": (dc.avg_pool2, lambda c, h, w, r: [_n(r, c, 2 * h, 2 * w)]),
    "concat": (lambda a, b: dc.concat([a, b], axis=2),
               lambda c, h, w, r: [_n(r, c, h, w), _n(r, c, h, 2)]),
    "mul_broadcast": (dc.mul, lambda c, h, w, r: [_n(r, c, h, w), _n(r, c, 1, 1)]),
    "div": (dc.div, lambda c, h, w, r: [_n(r, c, h, w), r.uniform(1, 2, size=(c, h, w))]),
    "abs": (dc.abs, lambda c, h, w, r: [_n(r, c, h, w)]),
}


@dataclass
class PrimitiveResult:
    name: str
    size: tuple[int, int, int]
    report: GradCheckReport

    def line(self) -> str:
        verdict = "ok" if self.report.passed else "FAIL"
        c, h, w = self.size
        return f"{self.name} {c}x{h}x{w} max_rel_error={self.report.max_rel_error:.3e} {verdict}"


def check_primitive(name: str, c: int, h: int, w: int, seed: int | None = None,
                    eps: float = 1e-4, tol: float = 1e-5, primitives=None) -> GradCheckReport:
    """Check ``sum(r * f(args))`` for a seeded random projection ``r`` in 64-bit."""
    fn, make = (primitives or PRIMITIVES)[name]
    if seed is None:
        seed = zlib.crc32(f"{name}{c}{h}{w}".encode())
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        args = [Tensor(np.asarray(a, dtype=np.float64)) for a in make(c, h, w, rng)]
        r = Tensor(rng.normal(size=fn(*args).shape))
        return grad_check(lambda *a: dc.sum(dc.mul(fn(*a), r)), args, eps=eps, tol=tol, max_entries=60)


def run_suite(sizes=SIZES, tol: float = 1e-5, seed: int = 0, primitives=None) -> list[PrimitiveResult]:
    table = primitives or PRIMITIVES
    return [PrimitiveResult(name, size, check_primitive(name, *size, seed=zlib.crc32(
                f"{seed}{name}{size}".encode()), tol=tol, primitives=table))
            for name in sorted(table) for size in sizes]
