"""Desk-scale pre-LN encoder/decoder transformer with top-1 MoE FFN layers.

Weights are stored ``[in_features, out_features]`` and applied as ``x @ W``.
Any weight matrix may be a :class:`~moqe.types.QuantizedTensor`; it is
dequantized when the layer runs, and for MoE layers only for the experts that
actually receive tokens.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import quant
from .tensorio import round_to_binary16
from .types import Checkpoint, Entry, Granularity, LayerGroup, Payload, QuantizedTensor, Scheme

log = logging.getLogger(__name__)

PLACEMENTS = ("even", "odd", "all", "none")
LN_EPS = 1e-5


class MissingTensorError(KeyError):
    pass


class MixedPrecisionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    enc_layers: int
    dec_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    vocab: int
    n_experts: int = 1
    moe_placement: str = "even"

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "d_ffn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("d_model", "n_heads", "vocab", "n_experts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.moe_placement not in PLACEMENTS:
            raise ValueError(f"moe_placement must be one of {PLACEMENTS}")

    def is_moe_layer(self, index: int) -> bool:
        return {
            "even": index % 2 == 0,
            "odd": index % 2 == 1,
            "all": True,
            "none": False,
        }[self.moe_placement]

    def replace(self, **changes) -> "ModelSpec":
        return ModelSpec(**{**asdict(self), **changes})

    def to_meta(self) -> dict[str, str]:
        return {f"spec.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: Mapping[str, str]) -> "ModelSpec":
        values = {}
        for f in fields(cls):
            key = f"spec.{f.name}"
            if key in meta:
                values[f.name] = meta[key] if f.name == "moe_placement" else int(meta[key])
        try:
            return cls(**values)
        except TypeError as exc:
            raise ValueError(f"incomplete model spec in metadata: {exc}") from None

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        meta = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in {f.name for f in fields(cls)}:
                raise ValueError(f"line {lineno}: unknown spec key {key!r}")
            meta[f"spec.{key}"] = value
        return cls.from_meta(meta)


# 24 encoder / 12 decoder layers, d=1024, ffn=4096, 32 experts, 128k vocab.
# The head count is not given for the reference model and does not affect sizes.
REF_MOE = ModelSpec(24, 12, 1024, 4096, 16, 128_000, 32, "even")
REF_DENSE = REF_MOE.replace(n_experts=1, moe_placement="none")
TOY_MOE = ModelSpec(4, 2, 64, 256, 4, 1000, 8, "even")
TOY_DENSE = TOY_MOE.replace(n_experts=1, moe_placement="none")


def _norm(prefix: str, d: int):
    return [(f"{prefix}.weight", LayerGroup.OTHER, (d,)), (f"{prefix}.bias", LayerGroup.OTHER, (d,))]


def _attn(prefix: str, d: int, group: LayerGroup):
    out = []
    for p in "qkvo":
        out += [(f"{prefix}.{p}.weight", group, (d, d)), (f"{prefix}.{p}.bias", group, (d,))]
    return out


def _ffn(prefix: str, d: int, f: int, group: LayerGroup):
    return [
        (f"{prefix}.fc1.weight", group, (d, f)),
        (f"{prefix}.fc1.bias", group, (f,)),
        (f"{prefix}.fc2.weight", group, (f, d)),
        (f"{prefix}.fc2.bias", group, (d,)),
    ]


def _ffn_block(prefix: str, i: int, spec: ModelSpec):
    d, f = spec.d_model, spec.d_ffn
    if f == 0:
        return []
    if spec.is_moe_layer(i):
        out = [(f"{prefix}.moe.router.weight", LayerGroup.ROUTER, (d, spec.n_experts))]
        for e in range(spec.n_experts):
            out += _ffn(f"{prefix}.moe.expert.{e}", d, f, LayerGroup.EXPERT_FFN)
        return out
    return _ffn(f"{prefix}.ffn", d, f, LayerGroup.DENSE_FFN)


def checkpoint_layout(spec: ModelSpec) -> list[tuple[str, LayerGroup, tuple[int, ...]]]:
    """Every tensor a complete checkpoint for ``spec`` holds, in storage order."""
    d = spec.d_model
    out = [("embed.weight", LayerGroup.EMBEDDING, (spec.vocab, d))]
    for i in range(spec.enc_layers):
        p = f"enc.{i}"
        out += _norm(f"{p}.attn_norm", d) + _attn(f"{p}.self_attn", d, LayerGroup.SELF_ATTN)
        if spec.d_ffn:
            out += _norm(f"{p}.ffn_norm", d)
        out += _ffn_block(p, i, spec)
    if spec.enc_layers:
        out += _norm("enc.final_norm", d)
    for i in range(spec.dec_layers):
        p = f"dec.{i}"
        out += _norm(f"{p}.attn_norm", d) + _attn(f"{p}.self_attn", d, LayerGroup.SELF_ATTN)
        out += _norm(f"{p}.cross_norm", d) + _attn(f"{p}.cross_attn", d, LayerGroup.CROSS_ATTN)
        if spec.d_ffn:
            out += _norm(f"{p}.ffn_norm", d)
        out += _ffn_block(p, i, spec)
    if spec.dec_layers:
        out += _norm("dec.final_norm", d)
    return out


_LAYER_RE = re.compile(r"^(enc|dec)\.(\d+)\.")


def layer_index(name: str) -> int | None:
    m = _LAYER_RE.match(name)
    return int(m.group(2)) if m else None


def layer_selected(name: str, subset: str) -> bool:
    if subset == "all":
        return True
    i = layer_index(name)
    if i is None:
        return False
    if subset == "even":
        return i % 2 == 0
    if subset == "odd":
        return i % 2 == 1
    raise ValueError(f"unknown layer subset {subset!r}")


def infer_group(name: str) -> LayerGroup:
    """Layer group implied by this toolkit's tensor naming convention."""
    if name.startswith("embed."):
        return LayerGroup.EMBEDDING
    if ".moe.router." in name:
        return LayerGroup.ROUTER
    if ".moe.expert." in name:
        return LayerGroup.EXPERT_FFN
    if ".ffn." in name:
        return LayerGroup.DENSE_FFN
    if ".cross_attn." in name:
        return LayerGroup.CROSS_ATTN
    if ".self_attn." in name:
        return LayerGroup.SELF_ATTN
    return LayerGroup.OTHER


def init_checkpoint(spec: ModelSpec, seed: int = 0) -> Checkpoint:
    """Random float32 weights, scaled ``1/sqrt(fan_in)`` so activations stay O(1)."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, group, shape in checkpoint_layout(spec):
        if "norm" in name:
            arr = np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
        elif name == "embed.weight":
            arr = rng.normal(0.0, spec.d_model**-0.5, shape)
        elif len(shape) == 2:
            arr = rng.normal(0.0, shape[0] ** -0.5, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        entries.append(Entry(name, group, arr.astype(np.float32)))
    return Checkpoint(entries, spec.to_meta())


def spec_of(ckpt: Checkpoint) -> ModelSpec:
    return ModelSpec.from_meta(ckpt.meta)


def as_float(payload: Payload) -> np.ndarray:
    if isinstance(payload, QuantizedTensor):
        return quant.dequantize(payload)
    return np.asarray(payload, dtype=np.float32)


def dequantize_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Materialize every quantized tensor back to float32."""
    return ckpt.replace({e.name: quant.dequantize(e.payload) for e in ckpt if isinstance(e.payload, QuantizedTensor)})


# -- layers ------------------------------------------------------------------


@dataclass(frozen=True)
class RouterState:
    weight: np.ndarray  # [d_model, n_experts]


@dataclass(frozen=True)
class ExpertWeights:
    w1: Payload
    b1: np.ndarray
    w2: Payload
    b2: np.ndarray


@dataclass(frozen=True)
class ExpertBank:
    experts: tuple[ExpertWeights, ...]

    def __post_init__(self):
        if not self.experts:
            raise ValueError("expert bank is empty")
        first = self.experts[0]
        shapes = (first.w1.shape, first.b1.shape, first.w2.shape, first.b2.shape)
        kinds = set()
        for e in self.experts:
            if (e.w1.shape, e.b1.shape, e.w2.shape, e.b2.shape) != shapes:
                raise ValueError("experts in one bank must share shapes")
            kinds.add(isinstance(e.w1, QuantizedTensor))
            kinds.add(isinstance(e.w2, QuantizedTensor))
        if len(kinds) > 1:
            raise MixedPrecisionError("expert bank mixes float and quantized weights")

    def __len__(self):
        return len(self.experts)


def layer_norm(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * w + b


def ffn(x: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    h = np.maximum(x @ as_float(w1) + as_float(b1), 0.0)
    return h @ as_float(w2) + as_float(b2)


def top1_route(h: np.ndarray, router: RouterState) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 expert per token and its softmax probability."""
    logits = np.asarray(h, dtype=np.float32) @ as_float(router.weight)
    idx = np.argmax(logits, axis=-1)
    top = np.take_along_axis(logits, idx[:, None], axis=-1)
    gate = 1.0 / np.exp(logits - top).sum(axis=-1)
    return idx, gate.astype(np.float32)


def moe_ffn_forward(h: np.ndarray, experts: ExpertBank, router: RouterState, threads: int = 1) -> np.ndarray:
    """Gate-scaled output of each token's top-1 expert."""
    h = np.asarray(h, dtype=np.float32)
    idx, gate = top1_route(h, router)
    used = [int(e) for e in np.unique(idx)]

    def run(e: int) -> np.ndarray:
        w = experts.experts[e]
        rows = idx == e
        return gate[rows, None] * ffn(h[rows], w.w1, w.b1, w.w2, w.b2)

    if threads > 1 and len(used) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, used))
    else:
        outs = [run(e) for e in used]
    y = np.zeros((h.shape[0], experts.experts[0].b2.shape[0]), dtype=np.float32)
    for e, out in zip(used, outs):
        y[idx == e] = out
    return y


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(np.float32)


class _Weights:
    """Checkpoint accessor that reports missing tensors by name."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt

    def raw(self, name: str) -> Payload:
        if name not in self.ckpt:
            raise MissingTensorError(f"checkpoint is missing tensor {name!r}")
        return self.ckpt[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return as_float(self.raw(name))


def _attention(W: _Weights, prefix: str, x: np.ndarray, mem: np.ndarray, n_heads: int, causal: bool) -> np.ndarray:
    n, d = x.shape
    m = mem.shape[0]
    dh = d // n_heads
    q = (x @ W[f"{prefix}.q.weight"] + W[f"{prefix}.q.bias"]).reshape(n, n_heads, dh).transpose(1, 0, 2)
    k = (mem @ W[f"{prefix}.k.weight"] + W[f"{prefix}.k.bias"]).reshape(m, n_heads, dh).transpose(1, 0, 2)
    v = (mem @ W[f"{prefix}.v.weight"] + W[f"{prefix}.v.bias"]).reshape(m, n_heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(dh))
    if causal:
        scores = np.where(np.tri(n, m, dtype=bool), scores, np.float32(-np.inf))
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).transpose(1, 0, 2).reshape(n, d)
    return ctx @ W[f"{prefix}.o.weight"] + W[f"{prefix}.o.bias"]


def _ffn_sublayer(W: _Weights, prefix: str, i: int, spec: ModelSpec, x: np.ndarray, threads: int) -> np.ndarray:
    if spec.is_moe_layer(i):
        p = f"{prefix}.moe"
        bank = ExpertBank(tuple(
            ExpertWeights(
                W.raw(f"{p}.expert.{e}.fc1.weight"), W[f"{p}.expert.{e}.fc1.bias"],
                W.raw(f"{p}.expert.{e}.fc2.weight"), W[f"{p}.expert.{e}.fc2.bias"],
            )
            for e in range(spec.n_experts)
        ))
        return moe_ffn_forward(x, bank, RouterState(W.raw(f"{p}.router.weight")), threads)
    p = f"{prefix}.ffn"
    return ffn(x, W.raw(f"{p}.fc1.weight"), W[f"{p}.fc1.bias"], W.raw(f"{p}.fc2.weight"), W[f"{p}.fc2.bias"])


def _embed(W: _Weights, ids: np.ndarray, spec: ModelSpec) -> np.ndarray:
    table = W["embed.weight"]
    x = table[ids] * np.float32(np.sqrt(spec.d_model))
    return (x + sinusoidal_positions(len(ids), spec.d_model)).astype(np.float32)


def _check_ids(ids, spec: ModelSpec) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size == 0:
        raise ValueError("empty token sequence")
    if arr.min() < 0 or arr.max() >= spec.vocab:
        raise ValueError(f"token id out of range [0, {spec.vocab})")
    return arr


def model_forward(
    tokens: Sequence[int],
    ckpt: Checkpoint,
    spec: ModelSpec | None = None,
    target: Sequence[int] | None = None,
    threads: int = 1,
    return_hidden: bool = False,
):
    """Logits ``[len(target) x vocab]`` for one sequence.

    With a decoder, ``tokens`` feed the encoder and ``target`` (defaulting to
    ``tokens``) is teacher-forced through the decoder. Encoder-only specs
    return one row per input token. Output projection is tied to the input
    embedding.
    """
    spec = spec or spec_of(ckpt)
    W = _Weights(ckpt)
    src = _check_ids(tokens, spec)
    x = _embed(W, src, spec)
    for i in range(spec.enc_layers):
        p = f"enc.{i}"
        hn = layer_norm(x, W[f"{p}.attn_norm.weight"], W[f"{p}.attn_norm.bias"])
        x = x + _attention(W, f"{p}.self_attn", hn, hn, spec.n_heads, causal=False)
        if spec.d_ffn:
            hn = layer_norm(x, W[f"{p}.ffn_norm.weight"], W[f"{p}.ffn_norm.bias"])
            x = x + _ffn_sublayer(W, p, i, spec, hn, threads)
    if spec.enc_layers:
        x = layer_norm(x, W["enc.final_norm.weight"], W["enc.final_norm.bias"])
    if spec.dec_layers:
        memory = x
        tgt = _check_ids(tokens if target is None else target, spec)
        x = _embed(W, tgt, spec)
        for i in range(spec.dec_layers):
            p = f"dec.{i}"
            hn = layer_norm(x, W[f"{p}.attn_norm.weight"], W[f"{p}.attn_norm.bias"])
            x = x + _attention(W, f"{p}.self_attn", hn, hn, spec.n_heads, causal=True)
            hn = layer_norm(x, W[f"{p}.cross_norm.weight"], W[f"{p}.cross_norm.bias"])
            x = x + _attention(W, f"{p}.cross_attn", hn, memory, spec.n_heads, causal=False)
            if spec.d_ffn:
                hn = layer_norm(x, W[f"{p}.ffn_norm.weight"], W[f"{p}.ffn_norm.bias"])
                x = x + _ffn_sublayer(W, p, i, spec, hn, threads)
        x = layer_norm(x, W["dec.final_norm.weight"], W["dec.final_norm.bias"])
    x = x.astype(np.float32)
    logits = x @ W["embed.weight"].T
    return (logits, x) if return_hidden else logits


def forward_batch(batch: Iterable[Sequence[int]], ckpt: Checkpoint, spec: ModelSpec | None = None, threads: int = 1):
    """Run every sequence; returns stacked (logits, final hidden states)."""
    spec = spec or spec_of(ckpt)
    logits, hidden = [], []
    for seq in batch:
        lg, h = model_forward(seq, ckpt, spec, threads=threads, return_hidden=True)
        logits.append(lg)
        hidden.append(h)
    if not logits:
        raise ValueError("empty batch")
    return np.concatenate(logits), np.concatenate(hidden)


# -- quantization of whole checkpoints ----------------------------------------


def quantize_model(
    ckpt: Checkpoint,
    groups: Iterable[LayerGroup],
    bits: int,
    scheme: Scheme = Scheme.LINEAR,
    granularity: Granularity = Granularity.CHANNEL,
    layer_subset: str = "all",
    scale_mode: str = "mse",
    float_dtype: str | None = None,
    threads: int = 1,
) -> Checkpoint:
    """Quantize every 2-D weight whose group is selected; the MoQE recipe is
    ``groups={LayerGroup.EXPERT_FFN}``.

    1-D tensors in selected groups (biases) are left as they are. With
    ``float_dtype="f16"`` every remaining float tensor is stored as binary16.
    """
    groups = {LayerGroup(g) for g in groups}
    if not groups:
        raise ValueError("empty group list")
    if layer_subset not in ("all", "even", "odd"):
        raise ValueError(f"unknown layer subset {layer_subset!r}")
    if float_dtype not in (None, "f16", "f32"):
        raise ValueError(f"unknown float dtype {float_dtype!r}")

    selected = []
    for e in ckpt:
        if e.group not in groups or not layer_selected(e.name, layer_subset):
            continue
        if isinstance(e.payload, QuantizedTensor):
            continue
        if e.payload.ndim != 2:
            # biases are expected here; anything else is worth flagging
            level = logging.DEBUG if e.name.endswith(".bias") else logging.WARNING
            log.log(level, "skipping %d-D tensor %s", e.payload.ndim, e.name)
            continue
        selected.append(e)

    def work(e: Entry) -> QuantizedTensor:
        return quant.quantize(e.payload, bits, scheme, granularity, scale_mode)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, selected))
    else:
        results = [work(e) for e in selected]
    updates: dict[str, Payload] = {e.name: q for e, q in zip(selected, results)}

    if float_dtype is not None:
        for e in ckpt:
            if e.name in updates or isinstance(e.payload, QuantizedTensor):
                continue
            if float_dtype == "f16":
                updates[e.name] = round_to_binary16(e.payload).astype(np.float16)
            else:
                updates[e.name] = e.payload.astype(np.float32)
    return ckpt.replace(updates)
