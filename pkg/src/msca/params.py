"""Helpers for walking nested parameter dataclasses by dotted name."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import Tensor


@dataclass
class Conv:
    """Weight and optional bias of one convolution (1x1 when ``w`` is rank 2)."""

    w: Tensor
    b: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, cout: int, cin: int, kernel: int = 1,
             bias: bool = True, gain: float = 1.0, dtype=np.float32) -> "Conv":
        shape = (cout, cin) if kernel == 1 else (cout, cin, kernel, kernel)
        std = gain / np.sqrt(cin * kernel * kernel)
        w = Tensor(rng.normal(0.0, std, size=shape), dtype=dtype, requires_grad=True)
        b = Tensor(np.zeros(cout), dtype=dtype, requires_grad=True) if bias else None
        return cls(w, b)

    @property
    def cout(self) -> int:
        return self.w.shape[0]

    @property
    def cin(self) -> int:
        return self.w.shape[1]


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}

    def collect(name, t):
        out[name] = t
        return t

    _walk(obj, prefix, collect)
    return out


def map_tensors(obj, fn: Callable[[str, Tensor], Tensor], prefix: str = ""):
    """Rebuild ``obj`` with every tensor replaced by ``fn(name, tensor)``."""
    return _walk(obj, prefix, fn)


def _walk(obj, prefix, fn):
    if isinstance(obj, Tensor):
        return fn(prefix, obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        changes = {}
        for f in dataclasses.fields(obj):
            if not f.init or f.metadata.get("static"):
                continue
            val = getattr(obj, f.name)
            changes[f.name] = _walk(val, f"{prefix}.{f.name}" if prefix else f.name, fn)
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, (list, tuple)):
        items = [_walk(v, f"{prefix}.{i}", fn) for i, v in enumerate(obj)]
        return type(obj)(items)
    return obj


def load_arrays(obj, arrays: dict[str, np.ndarray], prefix: str = "", requires_grad=True,
                dtype=None):
    """Fill the tensors of ``obj`` from ``arrays``; every name must be present."""

    def fill(name, t):
        if name not in arrays:
            raise KeyError(f"missing tensor {name!r}")
        arr = arrays[name]
        if arr.shape != t.shape:
            raise ValueError(f"tensor {name!r}: shape {arr.shape} != expected {t.shape}")
        return Tensor(arr, dtype=dtype or arr.dtype, requires_grad=requires_grad and t.requires_grad)

    return map_tensors(obj, fill, prefix)
