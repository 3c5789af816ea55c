"""Adam over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffcore import Tensor


@dataclass
class Adam:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        """Return updated copies of ``params``; names without a gradient are unchanged."""
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = dict(params)
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = Tensor(p.data - upd.astype(p.dtype), requires_grad=True)
        return out

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        arrays = {f"{prefix}.t": np.array([self.t], dtype=np.float64)}
        for name in sorted(self.m):
            arrays[f"{prefix}.m.{name}"] = self.m[name]
            arrays[f"{prefix}.v.{name}"] = self.v[name]
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        self.m, self.v = {}, {}
        for key, arr in arrays.items():
            for slot, store in (("m", self.m), ("v", self.v)):
                head = f"{prefix}.{slot}."
                if key.startswith(head):
                    store[key[len(head):]] = np.array(arr)
