"""Immutable tensors and the recording tape used for reverse-mode gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(ValueError):
    """Raised when an operation that needs finite input receives NaN or inf."""


def default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Dense, read-only array plus the bookkeeping needed for gradients.

    ``data`` is never mutated after construction; every operation returns a new
    tensor. Leaves that should receive gradients set ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: arr is freshly computed and owned by the result
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):  # 0-d results come back as numpy scalars
            arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.view())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype, requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    forward: Callable[..., np.ndarray]


@dataclass(eq=False)
class Tape:
    """Explicit recording scope for reverse-mode differentiation.

    Operations performed inside ``with Tape() as tape:`` on tracked inputs are
    appended to ``tape.nodes`` in execution order, which is a topological
    order of the graph. Outside any tape nothing is recorded.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def gradient(self, target: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. each source, as arrays.

        Sources the target does not depend on get zero arrays.
        """
        sources = list(sources)
        if target.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False))
        return out

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward from the recorded inputs."""
        return [node.forward(*(t.data for t in node.inputs)) for node in self.nodes]


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
           forward: Callable[..., np.ndarray]) -> Tensor:
    """Wrap ``out`` as a tensor and, inside a tape, record how it was made.

    ``backward`` maps the output gradient to one gradient (or None) per input;
    ``forward`` recomputes ``out`` from the input arrays and is used by replay.
    This is also the extension point for user-defined primitives.
    """
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        node = Node(op, result, tuple(inputs), backward, forward)
        result._node = node
        tape.nodes.append(node)
    return result


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)
