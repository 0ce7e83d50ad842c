"""Quick invariant checks bundled with the CLI (``moqe selftest``)."""

from __future__ import annotations

import io
from typing import Callable

import numpy as np

from . import bench, bitpack, quant, tensorio
from .model import TOY_MOE, RouterState, init_checkpoint, quantize_model, top1_route
from .types import Granularity, LayerGroup, Scheme


def _pack_roundtrip(rng):
    for bits in bitpack.SUPPORTED_BITS:
        lo, hi = bitpack.code_range(bits)
        for count in range(65):
            codes = rng.integers(lo, hi + 1, count)
            data = bitpack.pack(codes, bits)
            assert len(data) == bitpack.packed_length(count, bits)
            assert np.array_equal(bitpack.unpack(data, bits, count), codes)


def _linear_bound(rng):
    for bits in bitpack.SUPPORTED_BITS:
        for gran in Granularity:
            a = rng.standard_t(3, size=(17, 9)).astype(np.float32)
            qt = quant.quantize_linear(a, bits, gran)
            err = np.abs(a.astype(np.float64) - quant.dequantize(qt))
            assert np.all(err <= qt.channel_scales().astype(np.float64) / 2)


def _log_nearest(rng):
    for bits in (2, 3, 4, 8):
        kmax = (1 << (bits - 1)) - 1
        t = np.clip(rng.uniform(0, 1, 500), 2.0 ** -kmax, 1.0)
        k = quant.log_exponents(t, bits)
        cands = 2.0 ** -np.arange(kmax + 1)
        best = np.argmin(np.abs(t[:, None] - cands[None, :]), axis=1)
        assert np.array_equal(k, best)


def _router(rng):
    h = rng.normal(size=(40, 16)).astype(np.float32)
    idx, gate = top1_route(h, RouterState(rng.normal(size=(16, 5)).astype(np.float32)))
    assert idx.shape == (40,) and np.all((idx >= 0) & (idx < 5))
    assert np.all((gate > 0) & (gate <= 1))
    idx1, gate1 = top1_route(h, RouterState(np.ones((16, 1), np.float32)))
    assert np.all(idx1 == 0) and np.all(gate1 == 1.0)


def _container(rng):
    spec = TOY_MOE.replace(enc_layers=2, dec_layers=1, vocab=50)
    ckpt = quantize_model(init_checkpoint(spec, 3), {LayerGroup.EXPERT_FFN}, 3, float_dtype="f16")
    buf = io.BytesIO()
    tensorio.write_checkpoint(ckpt, buf)
    assert tensorio.read_checkpoint(io.BytesIO(buf.getvalue())) == ckpt


def _fused(rng):
    a = rng.normal(size=(64, 64)).astype(np.float32)
    x = rng.normal(size=(8, 64)).astype(np.float32)
    for bits in bitpack.SUPPORTED_BITS:
        qt = quant.quantize(a, bits, Scheme.LINEAR)
        ref = x @ quant.dequantize(qt)
        out = bench.matmul_dequant_fused(qt, x)
        assert np.linalg.norm(out - ref) <= 1e-5 * np.linalg.norm(ref)


CHECKS: list[tuple[str, Callable]] = [
    ("pack-roundtrip", _pack_roundtrip),
    ("linear-error-bound", _linear_bound),
    ("log-nearest-power", _log_nearest),
    ("router-invariants", _router),
    ("container-roundtrip", _container),
    ("fused-matmul", _fused),
]


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, check in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            check(rng)
            results.append((name, True, ""))
        except Exception as exc:  # report every failure, keep going
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
    return results
