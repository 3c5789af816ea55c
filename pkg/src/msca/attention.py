"""Masked spatial-channel attention.

The exemplar is summarized into ``K`` region vectors (spatial attention and
aggregation), the vectors are gated by a label-conditioned sigmoid mask, and
every target pixel mixes the gated vectors with a per-pixel softmax over the
``K`` slots (channel attention and aggregation). Memory and time are linear in
the pixel count; :func:`effective_attention_oracle` materializes the implied
pixel-to-pixel matrix for verification.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .imageio import write_gray
from .pyramid import FeaturePyramid

DEFAULT_K = (8, 16, 16, 16, 16)
ORACLE_PIXEL_BUDGET = 64 * 64


@dataclass
class MscaParams:
    """Per-scale attention weights.

    ``phi``: ``(K, N + M2)`` spatial-attention kernel; ``psi``: ``(K, M1)``
    channel-attention kernel; ``w1, b1, w2, b2``: gate MLP taking the pooled
    label features of both scenes.
    """

    phi: Tensor
    psi: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n: int, m1: int, m2: int, k: int,
             hidden: int | None = None, dtype=np.float32) -> "MscaParams":
        hidden = hidden or 2 * k

        def p(shape, fan_in, zero=False):
            arr = np.zeros(shape) if zero else rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
            return Tensor(arr, dtype=dtype, requires_grad=True)

        return cls(
            phi=p((k, n + m2), n + m2),
            psi=p((k, m1), m1),
            w1=p((hidden, m1 + m2), m1 + m2),
            b1=p((hidden,), 1, zero=True),
            w2=p((k, hidden), hidden),
            b2=p((k,), 1, zero=True),
        )

    @property
    def k(self) -> int:
        return self.phi.shape[0]


@dataclass
class AttentionPack:
    """Everything one alignment computed, for inspection and export."""

    alpha: Tensor        # (K, Hs, Ws), each slice sums to 1
    beta: Tensor         # (K, Ht, Wt), sums to 1 over K
    bank: Tensor         # (N, K)
    gate: Tensor         # (K,)
    masked_bank: Tensor  # (N, K)


def spatial_logits(fx2: Tensor, fc2: Tensor, phi: Tensor) -> Tensor:
    if fx2.shape[1:] != fc2.shape[1:]:
        raise ShapeError(f"exemplar image features {fx2.shape} and label features {fc2.shape} "
                         "must share spatial extent")
    if phi.shape[1] != fx2.shape[0] + fc2.shape[0]:
        raise ShapeError(f"phi expects {phi.shape[1]} input channels, "
                         f"got {fx2.shape[0]} + {fc2.shape[0]}")
    return dc.conv1x1(dc.concat([fx2, fc2], axis=0), phi)


def spatial_attention(fx2: Tensor, fc2: Tensor, phi: Tensor) -> Tensor:
    """``K`` softmax maps over the exemplar pixels."""
    return dc.softmax_spatial(spatial_logits(fx2, fc2, phi))


def spatial_aggregate(fx2: Tensor, alpha: Tensor) -> Tensor:
    """Region vectors ``V = F alpha^T`` of shape ``(N, K)``."""
    if fx2.shape[1:] != alpha.shape[1:]:
        raise ShapeError(f"features {fx2.shape} and attention {alpha.shape} differ in extent")
    n, h, w = fx2.shape
    k = alpha.shape[0]
    return dc.matmul(dc.reshape(fx2, (n, h * w)), dc.transpose(dc.reshape(alpha, (k, h * w))))


def gate(fc1: Tensor, fc2: Tensor, params: MscaParams) -> Tensor:
    pooled = dc.concat([dc.gap(fc1), dc.gap(fc2)], axis=0)
    if params.w1.shape[1] != pooled.shape[0]:
        raise ShapeError(f"gate MLP expects {params.w1.shape[1]} inputs, "
                         f"pooled label features have {pooled.shape[0]}")
    z = dc.reshape(pooled, (pooled.shape[0], 1))
    hidden = dc.leaky_relu(dc.add(dc.matmul(params.w1, z), dc.reshape(params.b1, (-1, 1))))
    logits = dc.add(dc.matmul(params.w2, hidden), dc.reshape(params.b2, (-1, 1)))
    return dc.reshape(dc.sigmoid(logits), (params.k,))


def apply_gate(bank: Tensor, g: Tensor) -> Tensor:
    if bank.shape[1] != g.shape[0]:
        raise ShapeError(f"bank has {bank.shape[1]} slots, gate has {g.shape[0]}")
    return dc.mul(bank, dc.reshape(g, (1, g.shape[0])))


def feature_mask(bank: Tensor, fc1: Tensor, fc2: Tensor, params: MscaParams) -> tuple[Tensor, Tensor]:
    """Scale slot ``k`` of the bank by the gate value ``g[k]``."""
    g = gate(fc1, fc2, params)
    return apply_gate(bank, g), g


def channel_attention(fc1: Tensor, psi: Tensor) -> Tensor:
    if psi.shape[1] != fc1.shape[0]:
        raise ShapeError(f"psi expects {psi.shape[1]} channels, target features have {fc1.shape[0]}")
    return dc.softmax_channel(dc.conv1x1(fc1, psi))


def channel_aggregate(masked_bank: Tensor, beta: Tensor) -> Tensor:
    """Per-pixel mix of the bank columns, ``(N, K) x (K, Ht, Wt) -> (N, Ht, Wt)``."""
    n, k = masked_bank.shape
    if beta.shape[0] != k:
        raise ShapeError(f"bank has {k} slots, channel attention has {beta.shape[0]}")
    _, h, w = beta.shape
    return dc.reshape(dc.matmul(masked_bank, dc.reshape(beta, (k, h * w))), (n, h, w))


def msca_forward(fx2: Tensor, fc1: Tensor, fc2: Tensor,
                 params: MscaParams) -> tuple[Tensor, AttentionPack]:
    """Align exemplar features ``fx2`` to the target layout described by ``fc1``.

    ``fc1`` may have a different extent from ``fx2``/``fc2``.
    """
    alpha = spatial_attention(fx2, fc2, params.phi)
    bank = spatial_aggregate(fx2, alpha)
    masked, g = feature_mask(bank, fc1, fc2, params)
    beta = channel_attention(fc1, params.psi)
    out = channel_aggregate(masked, beta)
    return out, AttentionPack(alpha, beta, bank, g, masked)


def effective_attention_oracle(fx2, alpha, g, beta, pixel_budget: int = ORACLE_PIXEL_BUDGET,
                               allow_large: bool = False, return_matrix: bool = False):
    """Explicit ``(HsWs, HtWt)`` attention ``A = alpha^T diag(g) beta`` applied to ``fx2``.

    Quadratic memory by construction; inputs above ``pixel_budget`` pixels on
    either side are refused unless ``allow_large`` is set.
    """
    fx2, alpha, g, beta = (np.asarray(getattr(a, "data", a)) for a in (fx2, alpha, g, beta))
    n, hs, ws = fx2.shape
    k, ht, wt = beta.shape
    if not allow_large and max(hs * ws, ht * wt) > pixel_budget:
        raise ValueError(f"oracle refuses {hs}x{ws} -> {ht}x{wt}: above the pixel budget of "
                         f"{pixel_budget}; pass allow_large=True to override")
    if alpha.shape != (k, hs, ws) or g.shape != (k,):
        raise ShapeError("oracle: inconsistent alpha / gate / beta shapes")
    a = alpha.reshape(k, hs * ws)
    b = beta.reshape(k, ht * wt)
    matrix = (a.T * g) @ b
    out = (fx2.reshape(n, hs * ws) @ matrix).reshape(n, ht, wt)
    return (out, matrix) if return_matrix else out


def msca_multiscale(image_pyr: FeaturePyramid, target_pyr: FeaturePyramid,
                    exemplar_pyr: FeaturePyramid,
                    params: Sequence[MscaParams]) -> tuple[FeaturePyramid, list[AttentionPack]]:
    """Independent attention at every scale."""
    if not (len(image_pyr) == len(target_pyr) == len(exemplar_pyr) == len(params)):
        raise ShapeError(f"level counts differ: image {len(image_pyr)}, target {len(target_pyr)}, "
                         f"exemplar {len(exemplar_pyr)}, params {len(params)}")
    outs, packs = [], []
    for fx2, fc1, fc2, p in zip(image_pyr, target_pyr, exemplar_pyr, params):
        out, pack = msca_forward(fx2, fc1, fc2, p)
        outs.append(out)
        packs.append(pack)
    return FeaturePyramid(tuple(outs)), packs


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchRow:
    side: int
    pixels: int
    msca_seconds: float
    oracle_seconds: float
    msca_peak_bytes: int
    oracle_peak_bytes: int
    max_rel_diff: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    k: int
    channels: int
    threads: int
    msca_time_slope: float
    oracle_time_slope: float
    msca_memory_slope: float
    oracle_memory_slope: float

    def lines(self) -> list[str]:
        out = [f"# attention benchmark: K={self.k} N={self.channels} threads={self.threads} "
               "(BLAS pinned to one thread)",
               "side pixels msca_s oracle_s msca_peak_B oracle_peak_B max_rel_diff"]
        for r in self.rows:
            out.append(f"{r.side} {r.pixels} {r.msca_seconds:.6g} {r.oracle_seconds:.6g} "
                       f"{r.msca_peak_bytes} {r.oracle_peak_bytes} {r.max_rel_diff:.3g}")
        out.append(f"slope time: msca {self.msca_time_slope:.3f} oracle {self.oracle_time_slope:.3f}")
        out.append(f"slope memory: msca {self.msca_memory_slope:.3f} "
                   f"oracle {self.oracle_memory_slope:.3f}")
        return out


def _timed(fn, repetitions):
    best = float("inf")
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return best, peak


def _slope(pixels, costs) -> float:
    return float(np.polyfit(np.log(pixels), np.log(costs), 1)[0])


def bench_attention(sides: Sequence[int] = (16, 32, 64), k: int = 16, repetitions: int = 3,
                    channels: int = 32, label_channels: int = 32, seed: int = 0) -> BenchReport:
    """Time and peak allocation of the decoupled path against the explicit oracle.

    Both paths are checked for numerical agreement at each size before timing.
    """
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=1), dc.precision(np.float64):
        params = MscaParams.init(rng, channels, label_channels, label_channels, k, dtype=np.float64)
        for side in sides:
            fx2 = Tensor(rng.normal(size=(channels, side, side)))
            fc1 = Tensor(rng.normal(size=(label_channels, side, side)))
            fc2 = Tensor(rng.normal(size=(label_channels, side, side)))
            fast, pack = msca_forward(fx2, fc1, fc2, params)
            slow = effective_attention_oracle(fx2, pack.alpha, pack.gate, pack.beta,
                                              allow_large=True)
            diff = float(np.max(np.abs(fast.data - slow)) / max(np.max(np.abs(slow)), 1e-300))
            if diff > 1e-6:
                raise AssertionError(f"paths disagree at {side}x{side}: rel diff {diff:.3g}")
            t_fast, m_fast = _timed(lambda: msca_forward(fx2, fc1, fc2, params), repetitions)

            def oracle():
                return effective_attention_oracle(fx2, pack.alpha, pack.gate, pack.beta,
                                                  allow_large=True)

            t_slow, m_slow = _timed(oracle, repetitions)
            rows.append(BenchRow(side, side * side, t_fast, t_slow, m_fast, m_slow, diff))
    px = [r.pixels for r in rows]
    return BenchReport(
        rows=rows, k=k, channels=channels, threads=1,
        msca_time_slope=_slope(px, [r.msca_seconds for r in rows]),
        oracle_time_slope=_slope(px, [r.oracle_seconds for r in rows]),
        msca_memory_slope=_slope(px, [r.msca_peak_bytes for r in rows]),
        oracle_memory_slope=_slope(px, [r.oracle_peak_bytes for r in rows]),
    )


# ---------------------------------------------------------------- export

def export_attention(packs: Sequence[AttentionPack], directory, prefix: str = "") -> list:
    """Write every alpha/beta slice as a grayscale PNG plus a ``gates.txt`` listing.

    Files are named ``{prefix}alpha_s{scale}_k{slot}.png`` and
    ``{prefix}beta_s{scale}_k{slot}.png``; each map is min-max normalized.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written, lines = [], ["scale slot gate"]
    for s, pack in enumerate(packs):
        for k in range(pack.alpha.shape[0]):
            for name, maps in (("alpha", pack.alpha), ("beta", pack.beta)):
                path = directory / f"{prefix}{name}_s{s}_k{k}.png"
                write_gray(path, maps.data[k])
                written.append(path)
            lines.append(f"{s} {k} {float(pack.gate.data[k])!r}")
    gates = directory / f"{prefix}gates.txt"
    gates.write_text("\n".join(lines) + "\n")
    written.append(gates)
    return written
