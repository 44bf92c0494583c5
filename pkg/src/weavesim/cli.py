"""Command-line entry point: ``weavesim verify|microbench|latency|throughput|calibrate``.

Every command writes CSV (or JSON with ``--format json``) to ``--out`` or
stdout. Values in a ``--config`` JSON file are defaults; flags override them.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .collectives import RankGroup, ShardMap, fused_allreduce_rmsnorm
from .errors import CalibrationError, ConfigurationError, WeaveSimError
from .numerics import NormParams
from .presets import CHUNK_SIZES, MODELS, THRESHOLDS, model_preset
from .scheduler import BaselineMode, ForwardBatch, iteration_latency, iteration_timeline
from .splitter import DEFAULT_OFFSET_GRID, SplitPolicy
from .verify import guarded, run_all
from .wavemodel import CalibrationTable, calibrate, collective_time, fit_residuals, resolve_profile, rmsnorm_time
from .workloads import DEFAULT_MAX_NUM_SEQS, load_trace, shipped_trace, simulate_throughput, synth_trace

MICROBENCH_TOKENS = (64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768)
LATENCY_TOKENS = (1024, 2048, 4096, 8192, 16384, 32768)
MODES = tuple(m.value for m in BaselineMode)


@dataclass
class RunConfig:
    model: str = "llama-70b"
    profile: str = "h100"
    threshold_tokens: int | None = None
    offset_grid: tuple[int, ...] = DEFAULT_OFFSET_GRID
    smart_split: bool = True
    chunk_size: int | None = None
    max_num_seqs: int | None = DEFAULT_MAX_NUM_SEQS
    mode: str | None = None
    seed: int = 0
    out: str | None = None
    format: str = "csv"

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        data = json.loads(path.read_text())
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        if "offset_grid" in data:
            data["offset_grid"] = tuple(data["offset_grid"])
        return cls(**data)

    def policy(self) -> SplitPolicy:
        threshold = self.threshold_tokens or THRESHOLDS.get(self.model, 1024)
        return SplitPolicy(threshold, self.offset_grid, self.smart_split)

    def chunk(self) -> int:
        return self.chunk_size or CHUNK_SIZES.get(self.model, 2048)


# --------------------------------------------------------------------------
# output helpers


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _emit(cfg: RunConfig, header: list[str], rows: list[list], stream=None) -> None:
    if cfg.format == "json":
        doc = [dict(zip(header, (_fmt(v) for v in row))) for row in rows]
        text = json.dumps(doc, indent=1) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_fmt(v) for v in row] for row in rows])
        text = buf.getvalue()
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        (stream or sys.stdout).write(text)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


# --------------------------------------------------------------------------
# commands


def cmd_verify(cfg: RunConfig, args) -> int:
    if args.corrupt_shard_map:
        # deliberately overlapping ranges; the contract check must reject them
        def corrupted():
            shards = ShardMap(((0, 3), (2, 4)))
            group = RankGroup.from_arrays([[[1.0]] * 4] * 2, [[0.0]] * 4, shards)
            fused_allreduce_rmsnorm(group, NormParams.ones(1), shards)

        result = guarded("corrupted shard map", lambda: corrupted())
        print(f"FAIL corrupted shard map: {result.detail}", file=sys.stderr)
        return 2
    world_sizes = args.world_sizes or (2, 4, 8)
    results = run_all(cfg.seed, world_sizes=world_sizes, instances=args.instances, profile=resolve_profile(cfg.profile))
    rows = [[r.name, "pass" if r.passed else "FAIL", f"{r.max_error:.3e}", r.detail] for r in results]
    _emit(cfg, ["check", "status", "max_abs_error", "detail"], rows)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.name}: {r.detail}", file=sys.stderr)
    return 1 if failed else 0


def cmd_microbench(cfg: RunConfig, args) -> int:
    profile = resolve_profile(cfg.profile)
    tokens = args.tokens or MICROBENCH_TOKENS
    nocomm = (cfg.mode or "").lower() == "nocomm"
    sms = profile.collective_sms
    ar, norm, fused = [], [], []
    for t in tokens:
        ar.append(0.0 if nocomm else collective_time("allreduce", t, args.hidden, sms, profile).duration * 1e6)
        norm.append(rmsnorm_time(t, args.hidden, profile).duration * 1e6)
        fused.append(0.0 if nocomm else collective_time("fused", t, args.hidden, sms, profile).duration * 1e6)
    seq = [a + n for a, n in zip(ar, norm)]
    speedup = [None if nocomm else s / f for s, f in zip(seq, fused)]
    header = ["series"] + [f"{t} tokens" for t in tokens]
    rows = [
        ["AR (us)"] + ar,
        ["RMSNorm (us)"] + norm,
        ["AR+RMSNorm (us)"] + seq,
        ["Fused (us)"] + fused,
        ["Speedup (x)"] + speedup,
    ]
    _emit(cfg, header, rows)
    return 0


def cmd_latency(cfg: RunConfig, args) -> int:
    profile = resolve_profile(cfg.profile)
    spec = model_preset(cfg.model)
    policy = cfg.policy()
    if args.equal_split:
        policy = SplitPolicy(policy.threshold_tokens, policy.offset_grid, smart=False)
    modes = [cfg.mode] if cfg.mode else list(MODES)
    header = ["tokens"] + [f"{m}_ms" for m in modes] + [f"{m}_speedup_vs_multimem (x)" for m in modes]
    rows = []
    for t in args.tokens or LATENCY_TOKENS:
        lat = [iteration_latency(t, spec, profile, m, policy) for m in modes]
        base = iteration_latency(t, spec, profile, "multimem", policy)
        rows.append([t] + [v * 1e3 for v in lat] + [base / v for v in lat])
    _emit(cfg, header, rows)
    if args.timeline:
        t = (args.tokens or LATENCY_TOKENS)[0]
        tl = iteration_timeline(ForwardBatch.prefill(t), spec, profile, cfg.mode or "tokenweave", policy)
        Path(args.timeline).write_text(tl.to_json() + "\n")
    return 0


def _resolve_trace(spec_text: str):
    """``fixed:COUNTxPROMPTxOUTPUT``, a shipped trace name, or a JSONL path."""
    if spec_text.startswith("fixed:"):
        count, prompt, output = (int(v) for v in spec_text[len("fixed:"):].split("x"))
        return synth_trace(count, prompt, output)
    if not Path(spec_text).exists():
        return shipped_trace(spec_text)
    return load_trace(spec_text)


def cmd_throughput(cfg: RunConfig, args) -> int:
    profile = resolve_profile(cfg.profile)
    spec = model_preset(cfg.model)
    policy = cfg.policy()
    chunk = cfg.chunk()
    modes = [cfg.mode] if cfg.mode else ["multimem", "tokenweave"]
    header = ["trace", "mode", "chunk_size (tokens)", "throughput (tokens/s)", "iterations", "mean_iteration_latency (ms)", "total_tokens"]
    rows = []
    for name in args.trace:
        trace = _resolve_trace(name)
        for m in modes:
            r = simulate_throughput(trace, spec, profile, m, policy, chunk, cfg.max_num_seqs)
            rows.append([name, r.mode, chunk, r.tokens_per_second, r.iterations, r.mean_iteration_latency * 1e3, r.total_tokens])
    _emit(cfg, header, rows)
    return 0


def cmd_calibrate(cfg: RunConfig, args) -> int:
    table = CalibrationTable.load(args.table)
    base = resolve_profile(args.base) if args.base else None
    profile = calibrate(table, base=base)
    if cfg.out:
        profile.save(cfg.out)
    else:
        print(json.dumps(profile.to_dict(), indent=2, sort_keys=True))
    residuals = fit_residuals(table, profile)
    writer = csv.writer(sys.stderr if not cfg.out else sys.stdout, lineterminator="\n")
    writer.writerow(["series", "tokens", "relative_residual (%)"])
    for key, errs in residuals.items():
        for (t, _), e in zip(table.series[key], errs):
            writer.writerow([key, t, f"{100 * e:.2f}"])
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override its values")
    common.add_argument("--profile", help="built-in profile (h100, b200), profile JSON or calibration table")
    common.add_argument("--model", choices=sorted(MODELS))
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--chunk-size", type=int)
    common.add_argument("--threshold", type=int, dest="threshold_tokens")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (stdout if omitted)")
    common.add_argument("--format", choices=("csv", "json"))

    parser = argparse.ArgumentParser(prog="weavesim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="randomized oracle and invariant checks")
    p.add_argument("--world-sizes", type=_int_list)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--corrupt-shard-map", action="store_true", help="inject a broken shard map (negative test)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("microbench", parents=[common], help="modeled AR / RMSNorm / fused latency table")
    p.add_argument("--tokens", type=_int_list)
    p.add_argument("--hidden", type=int, default=8192)
    p.set_defaults(func=cmd_microbench)

    p = sub.add_parser("latency", parents=[common], help="iteration latency per mode over a token sweep")
    p.add_argument("--tokens", type=_int_list)
    p.add_argument("--equal-split", action="store_true", help="disable wave-aware split offsets")
    p.add_argument("--timeline", help="write the first sweep point's event timeline as JSON")
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("throughput", parents=[common], help="chunked-prefill throughput on traces")
    p.add_argument("--trace", nargs="+", default=["fixed:128x2048x128"],
                   help="JSONL path, shipped name (sharegpt-like, arxiv-like) or fixed:COUNTxPROMPTxOUTPUT")
    p.add_argument("--max-num-seqs", type=int)
    p.set_defaults(func=cmd_throughput)

    p = sub.add_parser("calibrate", parents=[common], help="fit a hardware profile to a measured table")
    p.add_argument("table")
    p.add_argument("--base", help="profile supplying the non-fitted parameters")
    p.set_defaults(func=cmd_calibrate)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for name in ("profile", "model", "mode", "chunk_size", "threshold_tokens", "seed", "out", "format"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "max_num_seqs", None) is not None:
        cfg.max_num_seqs = args.max_num_seqs
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return 3
    except WeaveSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
