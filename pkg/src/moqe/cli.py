"""``moqe`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 invariant failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, bench, sizing, tensorio
from .model import (
    REF_DENSE,
    REF_MOE,
    TOY_DENSE,
    TOY_MOE,
    MissingTensorError,
    ModelSpec,
    dequantize_checkpoint,
    forward_batch,
    infer_group,
    init_checkpoint,
    quantize_model,
    spec_of,
)
from .report import write_rows
from .selftest import run_selftest
from .types import Checkpoint, Granularity, LayerGroup, Scheme

log = logging.getLogger("moqe")

EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 1, 2, 3
PRESETS = {"ref-moe": REF_MOE, "ref-dense": REF_DENSE, "toy-moe": TOY_MOE, "toy-dense": TOY_DENSE}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MOQE_THREADS", "1")))
    except ValueError:
        return 1


def _parse_groups(text: str) -> list[LayerGroup]:
    items = [g for g in (p.strip() for p in text.split(",")) if g and g.lower() != "none"]
    if not items:
        raise UsageError("empty group list")
    try:
        return [LayerGroup.parse(g) for g in items]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_spec(text: str) -> ModelSpec:
    if text in PRESETS:
        return PRESETS[text]
    return ModelSpec.from_text(Path(text).read_text())


def _load_input(path: str) -> Checkpoint:
    if Path(path).is_dir():
        return tensorio.read_raw_directory(path, group_of=infer_group)
    return tensorio.load(path)


def _resolve_spec(ckpt: Checkpoint, override: str | None) -> ModelSpec:
    if override:
        return _load_spec(override)
    try:
        return spec_of(ckpt)
    except (ValueError, KeyError):
        raise UsageError("checkpoint carries no model spec; pass --spec") from None


def _read_tokens(path: str) -> list[list[int]]:
    seqs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            seqs.append([int(t) for t in line.split()])
    if not seqs:
        raise ValueError(f"{path}: no token ids")
    return seqs


def _print_size(report: sizing.SizeReport, fmt: str) -> None:
    write_rows(report.rows(), sys.stdout, fmt, title="size report (ratio vs all-fp16 container)")


# -- subcommands -------------------------------------------------------------


def cmd_init(args) -> int:
    spec = _load_spec(args.spec)
    ckpt = analysis.outlier_checkpoint(spec, args.seed) if args.outliers else init_checkpoint(spec, args.seed)
    n = tensorio.save(ckpt, args.output)
    print(f"wrote {args.output} tensors={len(ckpt)} bytes={n}")
    return 0


def cmd_quantize(args) -> int:
    groups = _parse_groups(args.groups)
    ckpt = _load_input(args.input)
    spec = _resolve_spec(ckpt, args.spec)
    if args.spec:
        ckpt = Checkpoint(ckpt, {**ckpt.meta, **spec.to_meta()})
    ckpt = dequantize_checkpoint(ckpt) if any(not isinstance(e.payload, np.ndarray) for e in ckpt) else ckpt
    scheme, gran = Scheme(args.scheme), Granularity(args.granularity)
    q = quantize_model(ckpt, groups, args.bits, scheme, gran, args.layer_subset, args.log_scale_mode,
                       float_dtype=args.float_dtype, threads=args.threads)
    n = tensorio.save(q, args.output)
    plan = sizing.QuantPlan(
        tuple(sizing.QuantRule(g, args.layer_subset, args.bits, scheme, gran) for g in groups),
        16 if args.float_dtype == "f16" else 32,
    )
    report = sizing.size_report(spec, plan, q.meta)
    _print_size(report, args.format)
    print(f"wrote {args.output} bytes={n} predicted={report.planned_bytes}")
    return 0


def cmd_analyze(args) -> int:
    ckpt = _load_input(args.input)
    rows = []
    if args.per_layer:
        for t in analysis.checkpoint_stats(ckpt):
            rows.append({"name": t.name, "group": t.group.value, **_stats_cols(t.stats), "skew": f"{t.skew:.4f}"})
    else:
        for g in analysis.group_stats(ckpt):
            rows.append({"group": g.group.value, "tensors": g.n_tensors, **_stats_cols(g.stats),
                         "mean_skew": f"{g.mean_skew:.4f}", "pooled_skew": f"{g.pooled_skew:.4f}"})
    write_rows(rows, sys.stdout, args.format, title="weight distribution")
    return 0


def _stats_cols(s: analysis.DistributionStats) -> dict[str, object]:
    return {
        "min": f"{s.min:.6g}", "whisker_low": f"{s.whisker_low:.6g}", "q1": f"{s.q1:.6g}",
        "median": f"{s.median:.6g}", "q3": f"{s.q3:.6g}", "whisker_high": f"{s.whisker_high:.6g}",
        "max": f"{s.max:.6g}", "outliers": s.n_outliers,
    }


def cmd_sensitivity(args) -> int:
    groups = _parse_groups(args.groups)
    try:
        bits = [int(b) for b in args.bits_sweep.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"bad --bits-sweep {args.bits_sweep!r}") from None
    if not bits or any(b not in (2, 3, 4, 8) and b < 16 for b in bits):
        raise UsageError("--bits-sweep entries must be 2, 3, 4, 8 or >= 16 (no-op)")
    ckpt = _load_input(args.input)
    spec = _resolve_spec(ckpt, args.spec)
    probe = _read_tokens(args.probe)
    reports = analysis.sensitivity_sweep(ckpt, spec, probe, groups, bits, Scheme(args.scheme),
                                         Granularity(args.granularity), args.layer_subset)
    write_rows([r.row() for r in reports], sys.stdout, args.format,
               title="sensitivity (proxy metrics: logit MSE, KL, hidden cosine; not BLEU)")
    return 0


def cmd_size_report(args) -> int:
    if bool(args.spec) == bool(args.input):
        raise UsageError("pass exactly one of --spec or --input")
    if args.spec:
        spec, meta = _load_spec(args.spec), None
    else:
        with open(args.input, "rb") as fh:
            meta, _, _ = tensorio.read_index(fh)
        spec = ModelSpec.from_meta(meta)
    plan = sizing.QuantPlan.from_text(Path(args.plan).read_text()) if args.plan else sizing.QuantPlan()
    report = sizing.size_report(spec, plan, meta)
    _print_size(report, args.format)
    if args.verify:
        result = sizing.verify_against_checkpoint(report, args.verify)
        print(f"verify predicted={result.predicted} actual={result.actual} "
              f"delta={result.relative_delta:+.4%} {'PASS' if result.ok else 'FAIL'}")
        for line in result.deltas:
            print(line)
        if not result.ok:
            return EXIT_INVARIANT
    return 0


def cmd_forward(args) -> int:
    ckpt = _load_input(args.input)
    spec = _resolve_spec(ckpt, args.spec)
    seqs = _read_tokens(args.tokens)
    with open(args.out, "w") as out:
        for seq in seqs:
            logits, _ = forward_batch([seq], ckpt, spec, threads=args.threads)
            if args.greedy:
                out.write(" ".join(str(int(i)) for i in logits.argmax(axis=-1)) + "\n")
            else:
                for row in logits:
                    out.write("\t".join(f"{v:.9g}" for v in row) + "\n")
    return 0


def _variant(base: Checkpoint, name: str) -> tuple[Checkpoint, sizing.QuantPlan]:
    if name == "fp32":
        return base, sizing.QuantPlan(default_bits=32)
    if name == "fp16":
        return base.replace({e.name: e.payload.astype(np.float16) for e in base}), sizing.QuantPlan()
    parts = name.split(":")
    if len(parts) not in (2, 3):
        raise UsageError(f"bad variant {name!r}; expected fp32, fp16 or <groups>:<bits>[:scheme]")
    groups = [LayerGroup.parse(g) for g in parts[0].split("+")]
    bits = int(parts[1])
    scheme = Scheme(parts[2]) if len(parts) == 3 else Scheme.LINEAR
    q = quantize_model(base, groups, bits, scheme, float_dtype="f16")
    plan = sizing.QuantPlan(tuple(sizing.QuantRule(g, "all", bits, scheme) for g in groups))
    return q, plan


def cmd_bench(args) -> int:
    ckpt = _load_input(args.input)
    spec = _resolve_spec(ckpt, args.spec)
    base = dequantize_checkpoint(ckpt)
    base = base.replace({e.name: e.payload.astype(np.float32) for e in base})
    if args.probe:
        probe = _read_tokens(args.probe)
    else:
        rng = np.random.default_rng(0)
        probe = [rng.integers(0, spec.vocab, args.seq_len).tolist() for _ in range(args.batch)]
    variants = {v: _variant(base, v) for v in (p.strip() for p in args.variants.split(",")) if v}
    if not variants:
        raise UsageError("empty variant list")
    rows = bench.throughput_report(variants, probe, args.reps, args.threads, spec)
    write_rows([r.row() for r in rows], sys.stdout, args.format,
               title="throughput (host-dependent, report only)")
    return EXIT_INVARIANT if any(r.bytes_match is False for r in rows) else 0


def cmd_selftest(args) -> int:
    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f" {detail}" if detail else ""))
    return 0 if all(ok for _, ok, _ in results) else EXIT_INVARIANT


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moqe", description="Weight-only quantization toolkit for mixture-of-experts models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def fmt(sp):
        sp.add_argument("--format", choices=["text", "tsv"], default="text")

    sp = sub.add_parser("init", help="write a random checkpoint for a model spec")
    sp.add_argument("--spec", required=True, help="spec file or preset: " + ", ".join(PRESETS))
    sp.add_argument("--output", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--outliers", action="store_true", help="inject negative outliers into dense FFN fc2")
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("quantize", help="quantize selected layer groups")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--groups", required=True, help="comma-separated layer groups, e.g. expert_ffn")
    sp.add_argument("--bits", type=int, choices=[2, 3, 4, 8], required=True)
    sp.add_argument("--scheme", choices=["linear", "log"], default="linear")
    sp.add_argument("--granularity", choices=["channel", "tensor"], default="channel")
    sp.add_argument("--layer-subset", choices=["even", "odd", "all"], default="all")
    sp.add_argument("--log-scale-mode", choices=["absmax", "mse"], default="mse")
    sp.add_argument("--float-dtype", choices=["f16", "f32"], default="f16")
    sp.add_argument("--spec")
    sp.add_argument("--threads", type=int, default=_default_threads())
    fmt(sp)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("analyze", help="weight distribution statistics")
    sp.add_argument("--input", required=True)
    sp.add_argument("--per-layer", action="store_true")
    fmt(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("sensitivity", help="per-group quantization sensitivity sweep")
    sp.add_argument("--input", required=True)
    sp.add_argument("--probe", required=True)
    sp.add_argument("--groups", required=True)
    sp.add_argument("--bits-sweep", required=True)
    sp.add_argument("--scheme", choices=["linear", "log"], default="linear")
    sp.add_argument("--granularity", choices=["channel", "tensor"], default="channel")
    sp.add_argument("--layer-subset", choices=["even", "odd", "all"], default="all")
    sp.add_argument("--spec")
    fmt(sp)
    sp.set_defaults(func=cmd_sensitivity)

    sp = sub.add_parser("size-report", help="predicted container size for a plan")
    sp.add_argument("--spec")
    sp.add_argument("--input")
    sp.add_argument("--plan")
    sp.add_argument("--verify", metavar="CHECKPOINT")
    fmt(sp)
    sp.set_defaults(func=cmd_size_report)

    sp = sub.add_parser("forward", help="run the model on token files")
    sp.add_argument("--input", required=True)
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--greedy", action="store_true")
    sp.add_argument("--spec")
    sp.add_argument("--threads", type=int, default=_default_threads())
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("bench", help="throughput and resident-bytes report")
    sp.add_argument("--input", required=True)
    sp.add_argument("--variants", default="fp32,fp16,expert_ffn:8,expert_ffn:4")
    sp.add_argument("--threads", type=int, default=_default_threads())
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--probe")
    sp.add_argument("--batch", type=int, default=4)
    sp.add_argument("--seq-len", type=int, default=32)
    sp.add_argument("--spec")
    fmt(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("selftest", help="run embedded invariant checks")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"moqe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (tensorio.CheckpointFormatError, MissingTensorError, ValueError, OSError) as exc:
        print(f"moqe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
