"""Parameter counts and exact serialized-size predictions."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import bitpack, tensorio
from .model import ModelSpec, checkpoint_layout, layer_selected
from .types import Granularity, LayerGroup, Scheme

GIB = 1024**3


@dataclass(frozen=True)
class QuantRule:
    group: LayerGroup
    layers: str = "all"
    bits: int = 4
    scheme: Scheme = Scheme.LINEAR
    granularity: Granularity = Granularity.CHANNEL


@dataclass(frozen=True)
class QuantPlan:
    """Which tensors get quantized and how; everything else is stored at
    ``default_bits`` (16 or 32)."""

    rules: tuple[QuantRule, ...] = ()
    default_bits: int = 16

    def __post_init__(self):
        if self.default_bits not in (16, 32):
            raise ValueError("default_bits must be 16 or 32")
        seen = set()
        for r in self.rules:
            bitpack.code_range(r.bits)
            layers = ("even", "odd") if r.layers == "all" else (r.layers,)
            for key in ((r.group, layer) for layer in layers):
                if key in seen:
                    raise ValueError(f"more than one rule for {r.group.value} layers {key[1]}")
                seen.add(key)

    def rule_for(self, name: str, group: LayerGroup, shape: tuple[int, ...]) -> QuantRule | None:
        if len(shape) != 2:
            return None
        for r in self.rules:
            if r.group is group and layer_selected(name, r.layers):
                return r
        return None

    @classmethod
    def moqe(cls, bits: int, scheme: Scheme = Scheme.LINEAR) -> "QuantPlan":
        return cls((QuantRule(LayerGroup.EXPERT_FFN, "all", bits, scheme),))

    @classmethod
    def from_text(cls, text: str) -> "QuantPlan":
        """Parse a plan file.

        ``default_bits = 16`` sets the float storage width;
        ``rule = <group> <layers> <bits> [scheme] [granularity]`` adds a rule.
        """
        rules, default_bits = [], 16
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key == "default_bits":
                default_bits = int(value)
            elif key == "rule":
                parts = value.split()
                if not 3 <= len(parts) <= 5:
                    raise ValueError(f"line {lineno}: rule needs <group> <layers> <bits> [scheme] [granularity]")
                if parts[1] not in ("all", "even", "odd"):
                    raise ValueError(f"line {lineno}: layers must be all, even or odd")
                rules.append(QuantRule(
                    LayerGroup.parse(parts[0]), parts[1], int(parts[2]),
                    Scheme(parts[3]) if len(parts) > 3 else Scheme.LINEAR,
                    Granularity(parts[4]) if len(parts) > 4 else Granularity.CHANNEL,
                ))
            else:
                raise ValueError(f"line {lineno}: unknown plan key {key!r}")
        return cls(tuple(rules), default_bits)

    def to_text(self) -> str:
        lines = [f"default_bits = {self.default_bits}"]
        for r in self.rules:
            lines.append(f"rule = {r.group.value} {r.layers} {r.bits} {r.scheme.value} {r.granularity.value}")
        return "\n".join(lines) + "\n"


@dataclass
class SizeReport:
    params: dict[LayerGroup, int]
    fp16_bytes: int
    planned_bytes: int
    records: list[tensorio.TensorRecord] = field(repr=False)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def ratio(self) -> float:
        return self.planned_bytes / self.fp16_bytes

    @property
    def reduction(self) -> float:
        return 1.0 - self.ratio

    @property
    def fractions(self) -> dict[LayerGroup, float]:
        total = self.total_params
        return {g: n / total for g, n in self.params.items()}

    @property
    def moe_weight_fraction(self) -> float:
        return self.fractions.get(LayerGroup.EXPERT_FFN, 0.0)

    @property
    def payload_bytes(self) -> int:
        """Codes, scales and float data without container index or padding."""
        return sum(r.length + r.scale_length for r in self.records)

    def rows(self) -> list[dict[str, object]]:
        fr = self.fractions
        out = [
            {"key": f"params.{g.value}", "value": n, "detail": f"{fr[g]:.6f}"} for g, n in self.params.items()
        ]
        out += [
            {"key": "params.total", "value": self.total_params, "detail": "1.000000"},
            {"key": "bytes.fp16", "value": self.fp16_bytes, "detail": f"{self.fp16_bytes / GIB:.3f}GiB"},
            {"key": "bytes.planned", "value": self.planned_bytes, "detail": f"{self.planned_bytes / GIB:.3f}GiB"},
            {"key": "ratio", "value": f"{self.ratio:.4f}", "detail": "-"},
            {"key": "reduction", "value": f"{self.reduction:.4f}", "detail": "-"},
            {"key": "moe_weight_fraction", "value": f"{self.moe_weight_fraction:.4f}", "detail": "-"},
        ]
        return out


def param_count(spec: ModelSpec) -> dict[LayerGroup, int]:
    """Parameters per layer group (tied input/output embedding)."""
    counts = {g: 0 for g in LayerGroup}
    for _, group, shape in checkpoint_layout(spec):
        counts[group] += int(np.prod(shape))
    return counts


def _records(spec: ModelSpec, plan: QuantPlan | None) -> list[tensorio.TensorRecord]:
    out = []
    float_dtype = "f16" if plan is None or plan.default_bits == 16 else "f32"
    for name, group, shape in checkpoint_layout(spec):
        rule = plan.rule_for(name, group, shape) if plan is not None else None
        if rule is None:
            dtype, bits, gran = float_dtype, (16 if float_dtype == "f16" else 32), "-"
        else:
            dtype = "q-lin" if rule.scheme is Scheme.LINEAR else "q-log"
            bits, gran = rule.bits, rule.granularity.value
        length, scale_length = tensorio.expected_lengths(dtype, bits, gran, shape)
        out.append(tensorio.TensorRecord(name, group, dtype, bits, gran, shape, length, scale_length))
    return out


def size_report(spec: ModelSpec, plan: QuantPlan, meta: Mapping[str, str] | None = None) -> SizeReport:
    """Predict the container size of ``spec`` quantized per ``plan``.

    ``meta`` defaults to the spec's own metadata, which is what
    :func:`moqe.model.init_checkpoint` and the CLI write.
    """
    meta = spec.to_meta() if meta is None else meta
    records = _records(spec, plan)
    planned = tensorio.container_size(records, meta)
    fp16 = tensorio.container_size(_records(spec, None), meta)
    return SizeReport(param_count(spec), fp16, planned, records)


@dataclass
class VerifyResult:
    ok: bool
    predicted: int
    actual: int
    deltas: list[str]

    @property
    def relative_delta(self) -> float:
        return (self.actual - self.predicted) / self.predicted


def verify_against_checkpoint(report: SizeReport, path: str | os.PathLike, tolerance: float = 0.01) -> VerifyResult:
    """Compare a prediction with a checkpoint file on disk.

    Fails when the file size is off by more than ``tolerance`` or any tensor
    differs from the planned record in name, type or length.
    """
    actual = os.path.getsize(path)
    with open(path, "rb") as fh:
        _, records, _ = tensorio.read_index(fh)
    deltas = []
    planned = {r.name: r for r in report.records}
    found = {r.name: r for r in records}
    for name in planned.keys() - found.keys():
        deltas.append(f"missing\t{name}\t{planned[name].length + planned[name].scale_length}")
    for name in found.keys() - planned.keys():
        deltas.append(f"unexpected\t{name}\t{found[name].length + found[name].scale_length}")
    for r in report.records:
        f = found.get(r.name)
        if f is None:
            continue
        want = (r.dtype, r.bits, r.shape, r.length, r.scale_length)
        got = (f.dtype, f.bits, f.shape, f.length, f.scale_length)
        if want != got:
            delta = (f.length + f.scale_length) - (r.length + r.scale_length)
            deltas.append(f"mismatch\t{r.name}\t{delta:+d}\tplanned {r.dtype}{list(r.shape)} got {f.dtype}{list(f.shape)}")
    deltas.sort(key=lambda line: line.split("\t")[1])
    within = abs(actual - report.planned_bytes) <= tolerance * report.planned_bytes
    return VerifyResult(within and not deltas, report.planned_bytes, actual, deltas)
