"""Sub-byte packing of signed integer codes.

Codes are stored offset-binary (``u = q + 2**(bits-1)``), LSB-first inside each
byte. 2/4/8-bit codes never straddle a byte; 3-bit codes are packed eight at a
time into a little-endian 24-bit group, code ``i`` at bits ``[3i, 3i+3)``.
"""

from __future__ import annotations

import numpy as np

SUPPORTED_BITS = (2, 3, 4, 8)


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")


def code_range(bits: int) -> tuple[int, int]:
    """Inclusive two's-complement range of a ``bits``-wide code."""
    _check_bits(bits)
    half = 1 << (bits - 1)
    return -half, half - 1


def packed_length(count: int, bits: int) -> int:
    """Number of bytes :func:`pack` emits for ``count`` codes."""
    _check_bits(bits)
    if count < 0:
        raise ValueError("count must be non-negative")
    if bits == 3:
        return 3 * (-(-count // 8))
    return -(-count * bits // 8)


def pack(codes, bits: int) -> bytes:
    """Pack signed codes into bytes.

    Raises:
        ValueError: if any code falls outside :func:`code_range`.
    """
    lo, hi = code_range(bits)
    q = np.asarray(codes).reshape(-1)
    if q.size and (q.min() < lo or q.max() > hi):
        raise ValueError(f"code out of range [{lo}, {hi}] for {bits}-bit packing")
    u = (q.astype(np.int64) - lo).astype(np.uint32)
    n = u.size
    if bits == 8:
        return u.astype(np.uint8).tobytes()
    if bits == 3:
        groups = -(-n // 8)
        padded = np.zeros(groups * 8, dtype=np.uint32)
        padded[:n] = u
        shifts = np.arange(8, dtype=np.uint32) * 3
        word = (padded.reshape(groups, 8) << shifts).sum(axis=1, dtype=np.uint32)
        out = np.empty((groups, 3), dtype=np.uint8)
        out[:, 0] = word & 0xFF
        out[:, 1] = (word >> 8) & 0xFF
        out[:, 2] = (word >> 16) & 0xFF
        return out.tobytes()
    per_byte = 8 // bits
    nbytes = -(-n // per_byte)
    padded = np.zeros(nbytes * per_byte, dtype=np.uint32)
    padded[:n] = u
    shifts = np.arange(per_byte, dtype=np.uint32) * bits
    packed = (padded.reshape(nbytes, per_byte) << shifts).sum(axis=1, dtype=np.uint32)
    return packed.astype(np.uint8).tobytes()


def unpack(data, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack`; returns an int8 array of ``count`` codes.

    Raises:
        ValueError: if ``len(data)`` does not equal ``packed_length(count, bits)``.
    """
    expected = packed_length(count, bits)
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size != expected:
        raise ValueError(
            f"packed length mismatch: got {raw.size} bytes, expected {expected} "
            f"for {count} codes at {bits} bits"
        )
    offset = 1 << (bits - 1)
    if bits == 8:
        u = raw.astype(np.int16)
    elif bits == 3:
        g = raw.reshape(-1, 3).astype(np.uint32)
        word = g[:, 0] | (g[:, 1] << 8) | (g[:, 2] << 16)
        shifts = np.arange(8, dtype=np.uint32) * 3
        u = ((word[:, None] >> shifts) & 0x7).reshape(-1).astype(np.int16)
    else:
        per_byte = 8 // bits
        mask = (1 << bits) - 1
        shifts = np.arange(per_byte, dtype=np.uint8) * bits
        u = ((raw[:, None] >> shifts) & mask).reshape(-1).astype(np.int16)
    return (u[:count] - offset).astype(np.int8)
