"""Fused dequantize-matmul reference and throughput reporting.

Throughput numbers depend on the host and are reported, never asserted.
Resident weight bytes are checked against the size predictions.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import bitpack, quant
from .model import ModelSpec, forward_batch, spec_of
from .sizing import QuantPlan, size_report
from .types import Checkpoint, QuantizedTensor

TILE_ROWS = 64


def matmul_dequant_fused(qt: QuantizedTensor, x: np.ndarray, tile_rows: int = TILE_ROWS) -> np.ndarray:
    """``x @ dequantize(qt)`` computed one row tile of ``qt`` at a time.

    Each tile is unpacked straight from the packed code bytes, so the full
    float matrix never exists. ``tile_rows`` is rounded up to a multiple of 8
    so every tile starts on a packing-group boundary.
    """
    k, n = qt.shape
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != k:
        raise ValueError(f"cannot multiply {x.shape} by {qt.shape}")
    tile_rows = max(8, -(-tile_rows // 8) * 8)
    packed = np.frombuffer(qt.packed, dtype=np.uint8)
    out = np.zeros((x.shape[0], n), dtype=np.float32)
    for r0 in range(0, k, tile_rows):
        r1 = min(k, r0 + tile_rows)
        start, stop = r0 * n, r1 * n
        # start is a multiple of 8 codes, so it lands on a byte/group boundary
        b0 = bitpack.packed_length(start, qt.bits)
        b1 = b0 + bitpack.packed_length(stop - start, qt.bits)
        codes = bitpack.unpack(packed[b0:b1], qt.bits, stop - start).reshape(r1 - r0, n)
        out += x[:, r0:r1] @ quant.dequantize_rows(qt, codes)
    return out


def resident_weight_bytes(ckpt: Checkpoint) -> int:
    """Bytes the weights occupy in their stored form (packed codes, f16 scales,
    float data at its dtype)."""
    return ckpt.nbytes()


def flops_per_token(spec: ModelSpec, seq_len: int = 0) -> int:
    """Multiply-add FLOPs (2 per MAC) one token costs in a forward pass.

    Top-1 routing runs exactly one expert per MoE layer, so only the router
    product grows with the number of experts. ``seq_len`` adds the
    attention score/context products; the default counts weights only.
    """
    d, f = spec.d_model, spec.d_ffn
    attn = 2 * 4 * d * d + 2 * 2 * seq_len * d
    total = 0
    for stack, n_layers in (("enc", spec.enc_layers), ("dec", spec.dec_layers)):
        for i in range(n_layers):
            total += attn * (2 if stack == "dec" else 1)
            if f:
                total += 2 * 2 * d * f
                if spec.is_moe_layer(i):
                    total += 2 * d * spec.n_experts
    return total + 2 * d * spec.vocab


@dataclass(frozen=True)
class BenchRow:
    variant: str
    tokens: int
    repetitions: int
    median_seconds: float
    tokens_per_second: float
    resident_bytes: int
    predicted_bytes: int | None
    threads: int

    @property
    def bytes_match(self) -> bool | None:
        if self.predicted_bytes is None:
            return None
        return abs(self.resident_bytes - self.predicted_bytes) <= 0.05 * self.predicted_bytes

    def row(self) -> dict[str, object]:
        return {
            "variant": self.variant,
            "threads": self.threads,
            "reps": self.repetitions,
            "tokens": self.tokens,
            "median_s": f"{self.median_seconds:.6f}",
            "tokens_per_s": f"{self.tokens_per_second:.1f}",
            "resident_bytes": self.resident_bytes,
            "predicted_bytes": self.predicted_bytes if self.predicted_bytes is not None else "-",
            "bytes_match": {None: "-", True: "yes", False: "NO"}[self.bytes_match],
        }


def throughput_report(
    variants: Mapping[str, tuple[Checkpoint, QuantPlan | None]],
    probe: Sequence[Sequence[int]],
    repetitions: int = 3,
    threads: int = 1,
    spec: ModelSpec | None = None,
) -> list[BenchRow]:
    """Median wall-clock throughput per variant after one discarded warm-up.

    Each variant is ``(checkpoint, plan)``; with a plan, resident weight bytes
    are paired with the payload bytes :func:`moqe.sizing.size_report` predicts.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be at least 3")
    n_tokens = sum(len(s) for s in probe)
    rows = []
    for name, (ckpt, plan) in variants.items():
        vspec = spec or spec_of(ckpt)
        forward_batch(probe, ckpt, vspec, threads=threads)
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            forward_batch(probe, ckpt, vspec, threads=threads)
            times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        predicted = size_report(vspec, plan).payload_bytes if plan is not None else None
        rows.append(BenchRow(name, n_tokens, repetitions, med, n_tokens / med if med > 0 else float("inf"),
                             resident_weight_bytes(ckpt), predicted, threads))
    return rows
