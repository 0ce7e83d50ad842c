"""Weight-only quantizers: linear abs-max and log-scale (power-of-two) codes.

Channels are matrix columns: ``A[:, j]`` shares one scale. Weight matrices in
this toolkit are stored ``[in_features, out_features]`` so a channel is an
output feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bitpack
from .tensorio import ceil_to_binary16, round_to_binary16
from .types import Granularity, QuantizedTensor, Scheme

MAX_FIT_ITERS = 50
FIT_TOL = 1e-6


@dataclass(frozen=True)
class ErrorReport:
    max_abs_err: float
    mse: float
    relative_frobenius_err: float


def _as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite values")
    return arr


def _absmax(a: np.ndarray, granularity: Granularity) -> np.ndarray:
    if a.size == 0:
        n = a.shape[1] if granularity is Granularity.CHANNEL else 1
        return np.zeros(n)
    m = np.abs(a).max(axis=0) if granularity is Granularity.CHANNEL else np.array([np.abs(a).max()])
    return m.astype(np.float64)


def linear_scales(a, bits: int, granularity: Granularity = Granularity.CHANNEL) -> np.ndarray:
    """Abs-max scales ``2 * max|A| / (2**bits - 1)`` as binary16.

    The exact value is rounded *up* to the next binary16 number so that the
    clamped top code never pushes the round-trip error past half a step.
    """
    a = _as_matrix(a)
    bitpack.code_range(bits)
    exact = 2.0 * _absmax(a, Granularity(granularity)) / ((1 << bits) - 1)
    return ceil_to_binary16(exact)


def quantize_linear(a, bits: int, granularity: Granularity = Granularity.CHANNEL) -> QuantizedTensor:
    a = _as_matrix(a)
    granularity = Granularity(granularity)
    scales = linear_scales(a, bits, granularity)
    lo, hi = bitpack.code_range(bits)
    s = scales.astype(np.float64)
    if granularity is Granularity.TENSOR:
        s = np.full(a.shape[1], s[0])
    safe = np.where(s > 0, s, 1.0)
    q = np.rint(a.astype(np.float64) / safe)
    q[:, s == 0] = 0
    codes = np.clip(q, lo, hi).astype(np.int8)
    return QuantizedTensor(Scheme.LINEAR, bits, granularity, codes, scales)


def log_exponents(t: np.ndarray, bits: int) -> np.ndarray:
    """Exponent index ``k = -ceil(log2(2t/3))`` for ``t`` already clipped.

    Evaluated exactly from the binary exponent of ``t``: with
    ``t = m * 2**e`` and ``m`` in [0.5, 1), ``ceil(log2(2t/3))`` is ``e - 1``
    when ``m <= 0.75`` and ``e`` otherwise.
    """
    m, e = np.frexp(np.asarray(t, dtype=np.float64))
    q = np.where(m <= 0.75, e - 1, e)
    kmax = (1 << (bits - 1)) - 1
    return np.clip(-q, 0, kmax).astype(np.int64)


def _log_assign(a: np.ndarray, s: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Signs (+1/-1) and exponent indices for ``a`` under per-column scale ``s``."""
    kmax = (1 << (bits - 1)) - 1
    lower = 2.0 ** (1 - (1 << (bits - 1)))
    safe = np.where(s > 0, s, 1.0)
    t = np.clip(np.abs(a) / safe, lower, 1.0)
    k = log_exponents(t, bits)
    k = np.where(s > 0, k, kmax)
    sign = np.where(a < 0, -1.0, 1.0)
    return sign, k


def _fit_alternating(col: np.ndarray, bits: int) -> float:
    s = float(np.abs(col).max())
    for _ in range(MAX_FIT_ITERS):
        sign, k = _log_assign(col, np.float64(s), bits)
        d = sign * np.ldexp(1.0, -k)
        new = float(np.dot(col, d) / np.dot(d, d))
        if new <= 0:
            break
        done = abs(new - s) <= FIT_TOL * s
        s = new
        if done:
            break
    return s


def _fit_exact(col: np.ndarray, bits: int, n_candidates: int = 8) -> list[float]:
    """Scales minimizing the log-quantization MSE, best first.

    For fixed exponents the error is a quadratic in ``s``; the exponent of an
    element ``x`` only changes where ``x / s`` crosses ``1.5 * 2**-k``, i.e.
    at ``s = x * 2**k / 1.5``. Sweeping those breakpoints in order and solving
    the quadratic on every interval gives the global minimum. Scales above
    ``4/3 * max|x|`` never help: halving such a scale reproduces every value
    at least as well, so the sweep stops there.
    """
    x = np.abs(col)
    kmax = (1 << (bits - 1)) - 1
    nz = x[x > 0]
    top = 4.0 / 3.0 * float(nz.max())
    # zeros sit at the smallest power for every s > 0
    n_zero = x.size - nz.size
    sum_xd = float(nz.sum())
    sum_dd = float(nz.size) + n_zero * 4.0 ** -kmax

    ks = np.arange(1, kmax + 1, dtype=np.float64)
    bp = nz[:, None] * np.exp2(ks)[None, :] / 1.5
    keep = bp < top
    pts = bp[keep]
    kk = np.broadcast_to(ks, bp.shape)[keep]
    xx = np.broadcast_to(nz[:, None], bp.shape)[keep]
    order = np.argsort(pts, kind="stable")
    pts, kk, xx = pts[order], kk[order], xx[order]
    # element moves from exponent k-1 to k when s passes its breakpoint
    d_xd = -xx * np.exp2(-kk)
    d_dd = -3.0 * np.exp2(-2.0 * kk)
    s_xd = sum_xd + np.concatenate([[0.0], np.cumsum(d_xd)])
    s_dd = sum_dd + np.concatenate([[0.0], np.cumsum(d_dd)])
    lo = np.concatenate([[0.0], pts])
    hi = np.concatenate([pts, [top]])
    s_opt = np.clip(s_xd / s_dd, lo, hi)
    s_opt = np.where(s_opt > 0, s_opt, hi)
    sse = float(np.dot(x, x)) - 2 * s_opt * s_xd + s_opt**2 * s_dd
    best = np.argsort(sse, kind="stable")[:n_candidates]
    return [float(v) for v in s_opt[best]]


def _binary16_neighbours(s: np.ndarray) -> np.ndarray:
    """Nearest, next-up and next-down binary16 values of every scale in ``s``."""
    r = round_to_binary16(s).astype(np.float64)
    up16 = ceil_to_binary16(s)
    down = np.where(up16 > s, np.nextafter(up16, np.float16(0)), up16).astype(np.float64)
    v = np.concatenate([r, up16.astype(np.float64), down])
    return np.unique(v[v > 0])


def _log_mse_many(col: np.ndarray, scales: np.ndarray, bits: int) -> np.ndarray:
    """Log-quantization MSE of ``col`` under each scale in ``scales``."""
    a = np.broadcast_to(col[:, None], (col.size, scales.size))
    sign, k = _log_assign(a, scales, bits)
    recon = sign * np.ldexp(scales[None, :], -k)
    return np.mean((a - recon) ** 2, axis=0)


def fit_log_scale(column, bits: int, method: str = "exact") -> np.float16:
    """MSE-optimal scale for log quantization of one channel, as binary16.

    ``method="exact"`` (default) searches all exponent-assignment intervals
    for the global optimum; ``"alternating"`` iterates exponent assignment and
    least-squares refits from the abs-max start and can stall in a local
    minimum. Either way the result is never worse than the abs-max scale.
    """
    col = np.asarray(column, dtype=np.float64).reshape(-1)
    if col.size == 0 or not np.any(col):
        raise ValueError("cannot fit a log scale to an empty or all-zero column")
    absmax = float(np.abs(col).max())
    if method == "exact":
        raw = _fit_exact(col, bits)
    elif method == "alternating":
        raw = [_fit_alternating(col, bits)]
    else:
        raise ValueError(f"unknown fit method {method!r}")
    baseline = float(round_to_binary16(absmax))
    others = _binary16_neighbours(np.asarray(raw, dtype=np.float64))
    candidates = np.concatenate([[baseline] if baseline > 0 else [], others])
    if not candidates.size:
        return np.float16(0)
    # first minimum wins, so the abs-max scale is kept on ties
    return np.float16(candidates[int(np.argmin(_log_mse_many(col, candidates, bits)))])


def _pack_log(sign: np.ndarray, k: np.ndarray, bits: int) -> np.ndarray:
    half = 1 << (bits - 1)
    u = np.where(sign < 0, half, 0) | k
    return (u - half).astype(np.int8)


def _unpack_log(codes: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    half = 1 << (bits - 1)
    u = codes.astype(np.int64) + half
    sign = np.where(u & half, -1.0, 1.0)
    return sign, u & (half - 1)


def quantize_log(
    a,
    bits: int,
    granularity: Granularity = Granularity.CHANNEL,
    scale_mode: str = "mse",
) -> QuantizedTensor:
    """Log-scale quantization: one sign bit plus a ``bits - 1`` wide exponent.

    ``scale_mode`` is ``"absmax"`` or ``"mse"``.
    """
    a = _as_matrix(a)
    granularity = Granularity(granularity)
    bitpack.code_range(bits)
    if scale_mode not in ("absmax", "mse"):
        raise ValueError(f"unknown scale mode {scale_mode!r}")
    groups = [a[:, j] for j in range(a.shape[1])] if granularity is Granularity.CHANNEL else [a.reshape(-1)]
    scales = np.zeros(len(groups), dtype=np.float16)
    for i, g in enumerate(groups):
        if not np.any(g):
            continue
        if scale_mode == "mse":
            scales[i] = fit_log_scale(g, bits)
        else:
            scales[i] = np.float16(round_to_binary16(np.abs(g).max()))
    s = scales.astype(np.float64)
    if granularity is Granularity.TENSOR:
        s = np.full(a.shape[1], s[0])
    sign, k = _log_assign(a.astype(np.float64), s, bits)
    return QuantizedTensor(Scheme.LOG, bits, granularity, _pack_log(sign, k, bits), scales)


def quantize(a, bits: int, scheme: Scheme = Scheme.LINEAR, granularity: Granularity = Granularity.CHANNEL,
             scale_mode: str = "mse") -> QuantizedTensor:
    if Scheme(scheme) is Scheme.LINEAR:
        return quantize_linear(a, bits, granularity)
    return quantize_log(a, bits, granularity, scale_mode)


def dequantize_rows(qt: QuantizedTensor, codes: np.ndarray) -> np.ndarray:
    """Dequantize a block of rows (``codes`` has ``qt.shape[1]`` columns)."""
    s = qt.channel_scales()
    if qt.scheme is Scheme.LINEAR:
        return codes.astype(np.float32) * s
    sign, k = _unpack_log(codes, qt.bits)
    out = sign * np.ldexp(s.astype(np.float64), -k)
    out[:, s == 0] = 0.0
    return out.astype(np.float32)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return dequantize_rows(qt, qt.codes)


def log_components(qt: QuantizedTensor) -> tuple[np.ndarray, np.ndarray]:
    """(sign, exponent index) arrays of a log-quantized tensor."""
    if qt.scheme is not Scheme.LOG:
        raise ValueError("not a log-quantized tensor")
    return _unpack_log(qt.codes, qt.bits)


def error_between(a, recon) -> ErrorReport:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(recon, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return ErrorReport(0.0, 0.0, 0.0)
    diff = a - b
    norm = float(np.linalg.norm(a))
    err = float(np.linalg.norm(diff))
    return ErrorReport(
        max_abs_err=float(np.abs(diff).max()),
        mse=float(np.mean(diff**2)),
        relative_frobenius_err=err / norm if norm > 0 else 0.0,
    )


def quant_error(a, qt: QuantizedTensor) -> ErrorReport:
    if tuple(np.shape(a)) != qt.shape:
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {qt.shape}")
    return error_between(a, dequantize(qt))
