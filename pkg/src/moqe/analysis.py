"""Weight-distribution statistics and quantization sensitivity sweeps.

Degradation is measured against the float model on a probe batch with three
proxies: logit MSE, mean KL(float || quantized) of the output distributions,
and mean cosine similarity of final hidden states. They stand in for the
translation-quality scores this toolkit does not compute.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import quant
from .model import (
    ModelSpec,
    as_float,
    forward_batch,
    init_checkpoint,
    layer_selected,
    quantize_model,
)
from .quant import ErrorReport
from .types import Checkpoint, Granularity, LayerGroup, QuantizedTensor, Scheme

NOOP_BITS = 16
DENSE_FC2_SKEW = -1.84


@dataclass(frozen=True)
class DistributionStats:
    min: float
    max: float
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    n_outliers: int


def weight_stats(t) -> DistributionStats:
    """Box-plot statistics with linearly interpolated quartiles.

    Whiskers sit at the 1.5 IQR fences, clipped to the data range.
    """
    x = np.asarray(t, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("weight_stats needs a non-empty tensor")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = float(x.min()), float(x.max())
    wl = max(q1 - 1.5 * iqr, lo)
    wh = min(q3 + 1.5 * iqr, hi)
    outliers = int(np.count_nonzero((x < wl) | (x > wh)))
    return DistributionStats(lo, hi, float(q1), float(med), float(q3), float(wl), float(wh), outliers)


def skewness(t) -> float:
    """Fisher-Pearson moment coefficient ``m3 / m2**1.5``."""
    x = np.asarray(t, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise ValueError("skewness needs at least two values")
    d = x - x.mean()
    m2 = np.mean(d**2)
    if m2 <= 0:
        raise ValueError("skewness is undefined for zero variance")
    return float(np.mean(d**3) / m2**1.5)


@dataclass(frozen=True)
class TensorStats:
    name: str
    group: LayerGroup
    stats: DistributionStats
    skew: float


def checkpoint_stats(ckpt: Checkpoint, matrices_only: bool = True) -> list[TensorStats]:
    out = []
    for e in ckpt:
        if matrices_only and len(e.payload.shape) != 2:
            continue
        w = as_float(e.payload)
        try:
            sk = skewness(w)
        except ValueError:
            sk = 0.0
        out.append(TensorStats(e.name, e.group, weight_stats(w), sk))
    return out


@dataclass(frozen=True)
class GroupStats:
    group: LayerGroup
    n_tensors: int
    stats: DistributionStats
    mean_skew: float
    pooled_skew: float


def group_stats(ckpt: Checkpoint) -> list[GroupStats]:
    """Per-group pooled box statistics plus mean and pooled skewness."""
    per_tensor = checkpoint_stats(ckpt)
    out = []
    for g in LayerGroup:
        members = [t for t in per_tensor if t.group is g]
        if not members:
            continue
        pooled = np.concatenate([as_float(ckpt[t.name]).reshape(-1) for t in members])
        try:
            psk = skewness(pooled)
        except ValueError:
            psk = 0.0
        out.append(GroupStats(g, len(members), weight_stats(pooled), float(np.mean([t.skew for t in members])), psk))
    return out


# -- sensitivity ---------------------------------------------------------------


@dataclass(frozen=True)
class Degradation:
    logit_mse: float
    kl: float
    cosine: float

    def at_least_as_bad_as(self, other: "Degradation") -> bool:
        return self.logit_mse >= other.logit_mse and self.kl >= other.kl and self.cosine <= other.cosine

    def strictly_worse_than(self, other: "Degradation") -> bool:
        return self.logit_mse > other.logit_mse and self.kl > other.kl and self.cosine < other.cosine


NO_DEGRADATION = Degradation(0.0, 0.0, 1.0)


@dataclass(frozen=True)
class SensitivityReport:
    target: str
    bits: int
    scheme: Scheme
    granularity: Granularity
    degradation: Degradation
    weight_error: ErrorReport | None
    n_quantized: int
    flag: str = ""

    def row(self) -> dict[str, object]:
        we = self.weight_error
        return {
            "target": self.target,
            "bits": self.bits,
            "scheme": self.scheme.value,
            "granularity": self.granularity.value,
            "n_quantized": self.n_quantized,
            "logit_mse": f"{self.degradation.logit_mse:.6e}",
            "kl": f"{self.degradation.kl:.6e}",
            "cosine": f"{self.degradation.cosine:.9f}",
            "w_max_abs_err": f"{we.max_abs_err:.6e}" if we else "-",
            "w_mse": f"{we.mse:.6e}" if we else "-",
            "w_rel_frob": f"{we.relative_frobenius_err:.6e}" if we else "-",
            "flag": self.flag or "-",
        }


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def degradation(ref: tuple[np.ndarray, np.ndarray], test: tuple[np.ndarray, np.ndarray]) -> Degradation:
    """Compare (logits, hidden) of the float model with a quantized one."""
    lf, hf = ref
    lq, hq = test
    mse = float(np.mean((lf.astype(np.float64) - lq) ** 2))
    lpf, lpq = _log_softmax(lf), _log_softmax(lq)
    kl = float(np.mean(np.sum(np.exp(lpf) * (lpf - lpq), axis=-1)))
    a, b = hf.astype(np.float64), hq.astype(np.float64)
    same = np.all(hf == hq, axis=-1)
    denom = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    cos = np.where(denom > 0, np.sum(a * b, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0)
    cos = np.where(same, 1.0, np.clip(cos, -1.0, 1.0))
    return Degradation(mse, max(kl, 0.0), float(np.mean(cos)))


def pooled_error(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> ErrorReport | None:
    max_abs, sq, ref_sq, count = 0.0, 0.0, 0.0, 0
    for a, b in pairs:
        d = a.astype(np.float64) - b
        max_abs = max(max_abs, float(np.abs(d).max()))
        sq += float(np.sum(d**2))
        ref_sq += float(np.sum(a.astype(np.float64) ** 2))
        count += a.size
    if count == 0:
        return None
    return ErrorReport(max_abs, sq / count, float(np.sqrt(sq / ref_sq)) if ref_sq > 0 else 0.0)


def group_sensitivity(
    ckpt: Checkpoint,
    spec: ModelSpec,
    probe: Sequence[Sequence[int]],
    group: LayerGroup,
    bits: int,
    scheme: Scheme = Scheme.LINEAR,
    granularity: Granularity = Granularity.CHANNEL,
    layer_subset: str = "all",
    scale_mode: str = "mse",
    reference: tuple[np.ndarray, np.ndarray] | None = None,
) -> SensitivityReport:
    """Quantize one layer group (optionally a layer subset) and measure the damage.

    ``bits >= 16`` means no quantization. ``reference`` may carry precomputed
    float-model outputs for ``probe`` to avoid recomputing them in sweeps.
    """
    group = LayerGroup(group)
    scheme, granularity = Scheme(scheme), Granularity(granularity)
    target = group.value if layer_subset == "all" else f"{group.value}[{layer_subset}]"
    if not probe:
        raise ValueError("probe batch is empty")
    selected = [
        e for e in ckpt
        if e.group is group and layer_selected(e.name, layer_subset)
        and isinstance(e.payload, np.ndarray) and e.payload.ndim == 2
    ]
    if not selected:
        return SensitivityReport(target, bits, scheme, granularity, NO_DEGRADATION, None, 0, "group-absent")
    if bits >= NOOP_BITS:
        return SensitivityReport(target, bits, scheme, granularity, NO_DEGRADATION, None, 0, "no-op")
    qckpt = quantize_model(ckpt, {group}, bits, scheme, granularity, layer_subset, scale_mode)
    if reference is None:
        reference = forward_batch(probe, ckpt, spec)
    test = forward_batch(probe, qckpt, spec)
    err = pooled_error((np.asarray(e.payload), quant.dequantize(qckpt[e.name])) for e in selected)
    return SensitivityReport(target, bits, scheme, granularity, degradation(reference, test), err, len(selected))


def dense_layer_subset_sensitivity(
    ckpt: Checkpoint,
    spec: ModelSpec,
    probe: Sequence[Sequence[int]],
    subset: str,
    bits: int,
    scheme: Scheme = Scheme.LINEAR,
    granularity: Granularity = Granularity.CHANNEL,
    reference: tuple[np.ndarray, np.ndarray] | None = None,
) -> SensitivityReport:
    """Quantize dense FFNs of even, odd or all blocks only."""
    return group_sensitivity(ckpt, spec, probe, LayerGroup.DENSE_FFN, bits, scheme, granularity,
                             layer_subset=subset, reference=reference)


def sensitivity_sweep(
    ckpt: Checkpoint,
    spec: ModelSpec,
    probe: Sequence[Sequence[int]],
    groups: Iterable[LayerGroup],
    bits_sweep: Iterable[int],
    scheme: Scheme = Scheme.LINEAR,
    granularity: Granularity = Granularity.CHANNEL,
    layer_subset: str = "all",
) -> list[SensitivityReport]:
    reference = forward_batch(probe, ckpt, spec)
    bits_sweep = list(bits_sweep)
    return [
        group_sensitivity(ckpt, spec, probe, g, b, scheme, granularity, layer_subset, reference=reference)
        for g in groups
        for b in bits_sweep
    ]


def granularity_comparison(a, bits: int, scheme: Scheme = Scheme.LINEAR) -> tuple[ErrorReport, ErrorReport]:
    """(per-channel, per-tensor) reconstruction error of the same matrix."""
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError("granularity comparison needs a 2-D matrix")
    per_channel = quant.quantize(a, bits, scheme, Granularity.CHANNEL)
    per_tensor = quant.quantize(a, bits, scheme, Granularity.TENSOR)
    return quant.quant_error(a, per_channel), quant.quant_error(a, per_tensor)


# -- synthetic checkpoints -------------------------------------------------------


def inject_negative_outliers(w: np.ndarray, target_skew: float, rng: np.random.Generator,
                             fraction: float = 0.002) -> np.ndarray:
    """Push a small random subset of entries to large negative values so the
    whole tensor reaches ``target_skew`` (< 0)."""
    if target_skew >= 0:
        raise ValueError("target skew must be negative")
    flat = w.astype(np.float64).reshape(-1).copy()
    n = max(1, int(round(fraction * flat.size)))
    pos = rng.choice(flat.size, size=n, replace=False)
    sigma = flat.std()
    base = np.abs(flat[pos])

    def skew_at(c: float) -> float:
        trial = flat.copy()
        trial[pos] = -(base + c * sigma)
        return skewness(trial)

    lo, hi = 0.0, 1.0
    while skew_at(hi) > target_skew:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError(f"cannot reach skewness {target_skew} with {n} outliers")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if skew_at(mid) > target_skew:
            lo = mid
        else:
            hi = mid
    flat[pos] = -(base + hi * sigma)
    return flat.reshape(w.shape).astype(np.float32)


def outlier_checkpoint(spec: ModelSpec, seed: int = 0, fc2_skew: float = DENSE_FC2_SKEW) -> Checkpoint:
    """Random checkpoint whose dense FFN fc2 weights carry heavy negative
    outliers while expert weights stay near-symmetric."""
    base = init_checkpoint(spec, seed)
    rng = np.random.default_rng(seed + 7919)
    updates = {
        e.name: inject_negative_outliers(np.asarray(e.payload), fc2_skew, rng)
        for e in base
        if e.group is LayerGroup.DENSE_FFN and e.name.endswith("fc2.weight")
    }
    return base.replace(updates)
