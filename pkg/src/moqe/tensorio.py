"""The ``MQE1`` container format and binary16 helpers.

Layout (all integers little-endian)::

    b"MQE1" | u32 version | u64 index length | UTF-8 index | pad to 64
    data section: every blob (codes, scales, float data) starts 64-byte aligned

The index is tab-separated text, one record per line::

    meta    <key>   <value>
    tensor  <name>  <group> <dtype> <bits> <granularity> <shape> \
            <offset> <length> <scale_offset> <scale_length>

Offsets are relative to the start of the data section, so the index never
depends on its own length. ``dtype`` is one of ``f32``, ``f16``, ``q-lin`` and
``q-log``; float tensors use ``-`` for granularity and ``0 0`` for the scale
fields.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Mapping

import numpy as np

from . import bitpack
from .types import Checkpoint, Entry, Granularity, LayerGroup, QuantizedTensor, Scheme

MAGIC = b"MQE1"
VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")
HEADER_SIZE = _HEADER.size

_QDTYPES = {Scheme.LINEAR: "q-lin", Scheme.LOG: "q-log"}
_SCHEMES = {v: k for k, v in _QDTYPES.items()}
FLOAT16_MAX = 65504.0


class CheckpointFormatError(Exception):
    """Base class for container decoding failures."""


class BadMagicError(CheckpointFormatError):
    pass


class VersionMismatchError(CheckpointFormatError):
    pass


class TruncatedError(CheckpointFormatError):
    pass


class IndexInconsistencyError(CheckpointFormatError):
    pass


class NonFiniteError(ValueError):
    pass


def round_to_binary16(x):
    """Round to the nearest binary16 value (ties to even), returned as float32.

    Raises:
        OverflowError: if the value rounds to binary16 infinity.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("cannot round non-finite value to binary16")
    with np.errstate(over="ignore"):
        h = arr.astype(np.float16)
    if np.any(np.isinf(h)):
        raise OverflowError(f"value exceeds binary16 range (max {FLOAT16_MAX})")
    out = h.astype(np.float32)
    return out if out.ndim else np.float32(out)


def ceil_to_binary16(x) -> np.ndarray:
    """Smallest binary16 value >= x, as a float16 array."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("cannot round non-finite value to binary16")
    with np.errstate(over="ignore"):
        h = np.atleast_1d(arr.astype(np.float16))
        flat = np.atleast_1d(arr)
        low = h.astype(np.float64) < flat
        h[low] = np.nextafter(h[low], np.float16(np.inf))
    if np.any(np.isinf(h)):
        raise OverflowError(f"value exceeds binary16 range (max {FLOAT16_MAX})")
    return h.reshape(arr.shape)


@dataclass
class TensorRecord:
    """One index line; offsets are filled in by :func:`assign_offsets`."""

    name: str
    group: LayerGroup
    dtype: str
    bits: int
    granularity: str
    shape: tuple[int, ...]
    length: int
    scale_length: int = 0
    offset: int = 0
    scale_offset: int = 0

    def line(self) -> str:
        shape = "x".join(str(d) for d in self.shape)
        fields = [
            "tensor", self.name, self.group.value, self.dtype, str(self.bits), self.granularity,
            shape, str(self.offset), str(self.length), str(self.scale_offset), str(self.scale_length),
        ]
        return "\t".join(fields)


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def expected_lengths(dtype: str, bits: int, granularity: str, shape: tuple[int, ...]) -> tuple[int, int]:
    """Data and scale byte lengths implied by a record's type fields."""
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if dtype == "f32":
        return 4 * count, 0
    if dtype == "f16":
        return 2 * count, 0
    if dtype in _SCHEMES:
        if len(shape) != 2:
            raise IndexInconsistencyError(f"quantized tensor must be 2-D, got shape {shape}")
        n_scales = shape[1] if granularity == Granularity.CHANNEL.value else 1
        return bitpack.packed_length(count, bits), 2 * n_scales
    raise IndexInconsistencyError(f"unknown dtype {dtype!r}")


def describe(entry: Entry) -> TensorRecord:
    p = entry.payload
    if isinstance(p, QuantizedTensor):
        dtype, bits, gran = _QDTYPES[p.scheme], p.bits, p.granularity.value
    elif p.dtype == np.float32:
        dtype, bits, gran = "f32", 32, "-"
    else:
        dtype, bits, gran = "f16", 16, "-"
    shape = tuple(int(d) for d in p.shape)
    length, scale_length = expected_lengths(dtype, bits, gran, shape)
    return TensorRecord(entry.name, entry.group, dtype, bits, gran, shape, length, scale_length)


def assign_offsets(records: Iterable[TensorRecord]) -> int:
    """Lay records out in order; returns the data section length."""
    pos = 0
    for r in records:
        pos = _align(pos)
        r.offset = pos
        pos += r.length
        if r.scale_length:
            pos = _align(pos)
            r.scale_offset = pos
            pos += r.scale_length
        else:
            r.scale_offset = 0
    return pos


def _check_text(value: str, what: str) -> None:
    if any(c in value for c in "\t\n\r"):
        raise ValueError(f"{what} may not contain tabs or newlines: {value!r}")


def build_index(records: list[TensorRecord], meta: Mapping[str, str]) -> bytes:
    lines = []
    for key, value in meta.items():
        _check_text(key, "meta key")
        _check_text(value, "meta value")
        lines.append(f"meta\t{key}\t{value}")
    for r in records:
        _check_text(r.name, "tensor name")
        lines.append(r.line())
    return "".join(line + "\n" for line in lines).encode("utf-8")


def container_size(records: list[TensorRecord], meta: Mapping[str, str]) -> int:
    """Exact file size the writer produces for these records and meta."""
    data_len = assign_offsets(records)
    index = build_index(records, meta)
    return _align(HEADER_SIZE + len(index)) + data_len


def _float_bytes(arr: np.ndarray, name: str) -> bytes:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"tensor {name!r} contains non-finite values")
    le = "<f4" if arr.dtype == np.float32 else "<f2"
    return np.ascontiguousarray(arr, dtype=le).tobytes()


def write_checkpoint(ckpt: Checkpoint, sink: BinaryIO) -> int:
    """Serialize ``ckpt`` to ``sink``; returns the number of bytes written.

    Raises:
        NonFiniteError: a float tensor contains NaN or Inf.
        ValueError: a tensor has a zero-sized dimension.
    """
    records = []
    for entry in ckpt:
        if any(d <= 0 for d in entry.payload.shape):
            raise ValueError(f"tensor {entry.name!r} has a zero-sized dimension {entry.payload.shape}")
        records.append(describe(entry))
    data_len = assign_offsets(records)
    index = build_index(records, ckpt.meta)
    header = _HEADER.pack(MAGIC, VERSION, len(index))
    data_start = _align(len(header) + len(index))

    buf = bytearray(data_start + data_len)
    buf[: len(header)] = header
    buf[len(header) : len(header) + len(index)] = index
    for entry, rec in zip(ckpt, records):
        p = entry.payload
        if isinstance(p, QuantizedTensor):
            blob = p.packed
            scales = p.scales.astype("<f2").tobytes()
            at = data_start + rec.scale_offset
            buf[at : at + len(scales)] = scales
        else:
            blob = _float_bytes(p, entry.name)
        at = data_start + rec.offset
        buf[at : at + len(blob)] = blob
    sink.write(bytes(buf))
    return len(buf)


def _parse_int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise IndexInconsistencyError(f"bad {what}: {text!r}") from None


def _parse_index(text: str) -> tuple[dict[str, str], list[TensorRecord]]:
    meta: dict[str, str] = {}
    records: list[TensorRecord] = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        fields = line.split("\t")
        if fields[0] == "meta" and len(fields) == 3:
            meta[fields[1]] = fields[2]
        elif fields[0] == "tensor" and len(fields) == 11:
            _, name, group, dtype, bits, gran, shape, off, length, soff, slen = fields
            try:
                grp = LayerGroup(group)
            except ValueError:
                raise IndexInconsistencyError(f"line {lineno}: unknown group {group!r}") from None
            dims = tuple(_parse_int(d, "shape") for d in shape.split("x")) if shape else ()
            if not dims or any(d <= 0 for d in dims):
                raise IndexInconsistencyError(f"line {lineno}: bad shape {shape!r}")
            rec = TensorRecord(
                name, grp, dtype, _parse_int(bits, "bits"), gran, dims,
                _parse_int(length, "length"), _parse_int(slen, "scale length"),
                _parse_int(off, "offset"), _parse_int(soff, "scale offset"),
            )
            records.append(rec)
        else:
            raise IndexInconsistencyError(f"line {lineno}: malformed index record")
    return meta, records


def _validate_layout(records: list[TensorRecord]) -> int:
    seen = set()
    expected = [
        TensorRecord(r.name, r.group, r.dtype, r.bits, r.granularity, r.shape, r.length, r.scale_length)
        for r in records
    ]
    for r in records:
        if r.name in seen:
            raise IndexInconsistencyError(f"duplicate tensor {r.name!r}")
        seen.add(r.name)
        if r.dtype in _SCHEMES and r.bits not in bitpack.SUPPORTED_BITS:
            raise IndexInconsistencyError(f"tensor {r.name!r}: unsupported bits {r.bits}")
        if r.dtype in _SCHEMES and r.granularity not in ("channel", "tensor"):
            raise IndexInconsistencyError(f"tensor {r.name!r}: bad granularity {r.granularity!r}")
        length, scale_length = expected_lengths(r.dtype, r.bits, r.granularity, r.shape)
        if (length, scale_length) != (r.length, r.scale_length):
            raise IndexInconsistencyError(
                f"tensor {r.name!r}: lengths {r.length}/{r.scale_length} do not match "
                f"{r.dtype} shape {r.shape} ({length}/{scale_length})"
            )
    data_len = assign_offsets(expected)
    for r, e in zip(records, expected):
        if (r.offset, r.scale_offset) != (e.offset, e.scale_offset):
            raise IndexInconsistencyError(f"tensor {r.name!r}: offset {r.offset} inconsistent with layout")
    return data_len


def read_index(source: BinaryIO | bytes) -> tuple[dict[str, str], list[TensorRecord], int]:
    """Decode header and index only. Returns (meta, records, data_start)."""
    head = source[:HEADER_SIZE] if isinstance(source, (bytes, bytearray)) else source.read(HEADER_SIZE)
    if len(head) < 4 or head[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(head[:4])!r}, expected {MAGIC!r}")
    if len(head) < HEADER_SIZE:
        raise TruncatedError("truncated header")
    _, version, index_len = _HEADER.unpack(head)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported format version {version} (reader supports {VERSION})")
    if isinstance(source, (bytes, bytearray)):
        raw_index = source[HEADER_SIZE : HEADER_SIZE + index_len]
    else:
        raw_index = source.read(index_len)
    if len(raw_index) < index_len:
        raise TruncatedError(f"truncated index: {len(raw_index)} of {index_len} bytes")
    try:
        text = bytes(raw_index).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IndexInconsistencyError(f"index is not valid UTF-8: {exc}") from None
    meta, records = _parse_index(text)
    return meta, records, _align(HEADER_SIZE + index_len)


def read_checkpoint(source: BinaryIO | bytes) -> Checkpoint:
    """Inverse of :func:`write_checkpoint`.

    Raises:
        BadMagicError, VersionMismatchError, TruncatedError,
        IndexInconsistencyError: one per failure class.
    """
    raw = source if isinstance(source, (bytes, bytearray)) else source.read()
    raw = bytes(raw)
    meta, records, data_start = read_index(raw)
    data_len = _validate_layout(records)
    available = len(raw) - data_start
    entries = []
    for r in records:
        end = max(r.offset + r.length, r.scale_offset + r.scale_length)
        if end > available:
            raise TruncatedError(f"data for tensor {r.name!r} is truncated ({max(available, 0)} of {end} bytes)")
        blob = raw[data_start + r.offset : data_start + r.offset + r.length]
        if r.dtype == "f32":
            payload = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(r.shape)
        elif r.dtype == "f16":
            payload = np.frombuffer(blob, dtype="<f2").astype(np.float16).reshape(r.shape)
        else:
            count = int(np.prod(r.shape))
            codes = bitpack.unpack(blob, r.bits, count).reshape(r.shape)
            sblob = raw[data_start + r.scale_offset : data_start + r.scale_offset + r.scale_length]
            scales = np.frombuffer(sblob, dtype="<f2").astype(np.float16)
            try:
                payload = QuantizedTensor(_SCHEMES[r.dtype], r.bits, Granularity(r.granularity), codes, scales)
            except (ValueError, TypeError) as exc:
                raise IndexInconsistencyError(f"tensor {r.name!r}: {exc}") from None
        entries.append(Entry(r.name, r.group, payload))
    if available > data_len:
        raise IndexInconsistencyError(f"{available - data_len} trailing bytes after data section")
    return Checkpoint(entries, meta)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> int:
    with open(path, "wb") as fh:
        return write_checkpoint(ckpt, fh)


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(ckpt, buf)
    return buf.getvalue()


# Raw-directory ingestion: for every tensor ``<name>.bin`` holds little-endian
# float32 data and ``<name>.shape`` holds the dimensions on its first line and,
# optionally, the layer group on its second. ``meta.txt`` (``key = value``
# lines) is copied into the checkpoint meta when present.


def read_raw_directory(path: str | os.PathLike, group_of: Callable[[str], LayerGroup] | None = None) -> Checkpoint:
    root = Path(path)
    if not root.is_dir():
        raise CheckpointFormatError(f"{root} is not a directory")
    entries = []
    for shape_file in sorted(root.glob("*.shape")):
        name = shape_file.name[: -len(".shape")]
        lines = shape_file.read_text().splitlines()
        if not lines:
            raise CheckpointFormatError(f"{shape_file}: empty shape file")
        try:
            shape = tuple(int(d) for d in lines[0].split())
        except ValueError:
            raise CheckpointFormatError(f"{shape_file}: bad shape line {lines[0]!r}") from None
        if len(lines) > 1 and lines[1].strip():
            group = LayerGroup.parse(lines[1])
        elif group_of is not None:
            group = group_of(name)
        else:
            group = LayerGroup.OTHER
        bin_file = root / f"{name}.bin"
        data = np.fromfile(bin_file, dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise CheckpointFormatError(f"{bin_file}: {data.size} values, shape {shape} needs {int(np.prod(shape))}")
        entries.append(Entry(name, group, data.astype(np.float32).reshape(shape)))
    meta = {}
    meta_file = root / "meta.txt"
    if meta_file.exists():
        for line in meta_file.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    return Checkpoint(entries, meta)


def write_raw_directory(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for entry in ckpt:
        p = entry.payload
        if isinstance(p, QuantizedTensor):
            raise ValueError(f"raw directories hold float tensors only ({entry.name!r} is quantized)")
        np.ascontiguousarray(p, dtype="<f4").tofile(root / f"{entry.name}.bin")
        (root / f"{entry.name}.shape").write_text(" ".join(map(str, p.shape)) + "\n" + entry.group.value + "\n")
    if ckpt.meta:
        (root / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in ckpt.meta.items()))
