"""Core data types shared across the toolkit."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Mapping, Union

import numpy as np

from . import bitpack


class LayerGroup(str, enum.Enum):
    EXPERT_FFN = "expert_ffn"
    DENSE_FFN = "dense_ffn"
    SELF_ATTN = "self_attn"
    CROSS_ATTN = "cross_attn"
    EMBEDDING = "embedding"
    ROUTER = "router"
    OTHER = "other"

    @classmethod
    def parse(cls, text: str) -> "LayerGroup":
        try:
            return cls(text.strip().lower().replace("-", "_"))
        except ValueError:
            names = ", ".join(g.value for g in cls)
            raise ValueError(f"unknown layer group {text!r} (expected one of: {names})") from None


class Scheme(str, enum.Enum):
    LINEAR = "linear"
    LOG = "log"


class Granularity(str, enum.Enum):
    CHANNEL = "channel"
    TENSOR = "tensor"


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """A 2-D weight matrix stored as integer codes plus binary16 scales.

    ``codes`` has the matrix shape and dtype int8. For the linear scheme they
    are the signed integers ``q``. For the log scheme the sign bit and the
    exponent index ``k`` are combined into an unsigned field
    ``u = (sign_bit << (bits - 1)) | k`` and stored as ``u - 2**(bits-1)`` so
    both schemes share the same packed layout.
    """

    scheme: Scheme
    bits: int
    granularity: Granularity
    codes: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        if self.codes.ndim != 2:
            raise ValueError("quantized tensors must be 2-D")
        lo, hi = bitpack.code_range(self.bits)
        if self.codes.size and (self.codes.min() < lo or self.codes.max() > hi):
            raise ValueError(f"codes out of range for {self.bits} bits")
        expected = self.shape[1] if self.granularity is Granularity.CHANNEL else 1
        if self.scales.shape != (expected,):
            raise ValueError(f"expected {expected} scales, got shape {self.scales.shape}")
        if self.scales.dtype != np.float16:
            raise TypeError("scales must be float16")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales < 0):
            raise ValueError("scales must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.codes.shape)

    @property
    def size(self) -> int:
        return int(self.codes.size)

    @cached_property
    def packed(self) -> bytes:
        return bitpack.pack(self.codes, self.bits)

    @property
    def nbytes(self) -> int:
        """Storage footprint: packed codes plus binary16 scales."""
        return bitpack.packed_length(self.size, self.bits) + 2 * self.scales.size

    def channel_scales(self) -> np.ndarray:
        """Scales broadcast to one float32 value per column."""
        s = self.scales.astype(np.float32)
        if self.granularity is Granularity.TENSOR:
            s = np.full(self.shape[1], s[0], dtype=np.float32)
        return s

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.scheme is other.scheme
            and self.bits == other.bits
            and self.granularity is other.granularity
            and self.codes.shape == other.codes.shape
            and np.array_equal(self.codes, other.codes)
            and self.scales.tobytes() == other.scales.tobytes()
        )

    __hash__ = None


Payload = Union[np.ndarray, QuantizedTensor]


def payloads_equal(a: Payload, b: Payload) -> bool:
    """Bit-level equality of two payloads (dtype, shape and bytes)."""
    if isinstance(a, QuantizedTensor) or isinstance(b, QuantizedTensor):
        return isinstance(a, QuantizedTensor) and isinstance(b, QuantizedTensor) and a == b
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class Entry:
    name: str
    group: LayerGroup
    payload: Payload


class Checkpoint:
    """Ordered, immutable collection of named, group-tagged tensors.

    Float payloads are numpy arrays of dtype float32 or float16; the dtype
    decides how the tensor is serialized. ``meta`` holds free-form string
    key/value pairs (model hyperparameters live under ``spec.*``).
    """

    def __init__(self, entries: Iterable[Entry] = (), meta: Mapping[str, str] | None = None):
        self._entries: dict[str, Entry] = {}
        for entry in entries:
            if entry.name in self._entries:
                raise ValueError(f"duplicate tensor name {entry.name!r}")
            if not isinstance(entry.group, LayerGroup):
                raise TypeError(f"{entry.name}: group must be a LayerGroup")
            payload = entry.payload
            if isinstance(payload, np.ndarray):
                if payload.dtype not in (np.float32, np.float16):
                    raise TypeError(f"{entry.name}: float payloads must be float32 or float16")
                payload.flags.writeable = False
            elif not isinstance(payload, QuantizedTensor):
                raise TypeError(f"{entry.name}: unsupported payload {type(payload).__name__}")
            self._entries[entry.name] = entry
        self.meta: dict[str, str] = dict(meta or {})

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Entry]:
        return iter(self._entries.values())

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Payload:
        return self._entries[name].payload

    def entry(self, name: str) -> Entry:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def replace(self, payloads: Mapping[str, Payload]) -> "Checkpoint":
        """Return a new checkpoint with some payloads swapped out."""
        unknown = set(payloads) - set(self._entries)
        if unknown:
            raise KeyError(f"unknown tensors: {sorted(unknown)}")
        entries = [
            Entry(e.name, e.group, payloads.get(e.name, e.payload)) for e in self._entries.values()
        ]
        return Checkpoint(entries, self.meta)

    def nbytes(self) -> int:
        """Total payload storage bytes (no container overhead)."""
        return sum(e.payload.nbytes for e in self)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.meta != other.meta or self.names() != other.names():
            return False
        return all(
            a.group is b.group and payloads_equal(a.payload, b.payload)
            for a, b in zip(self, other)
        )

    __hash__ = None

    def __repr__(self):
        return f"Checkpoint({len(self)} tensors, {self.nbytes()} bytes)"
