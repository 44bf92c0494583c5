"""Analytic GPU cost model: CTAs, waves, memory-bound kernels and collectives.

All durations are in seconds. GEMMs are wave-quantized: a kernel needing
``ctas`` CTAs on ``sms`` SMs runs ``ceil(ctas / sms)`` waves and a partial
last wave costs as much as a full one. Collectives are affine in the token
count with parameters fitted by :func:`calibrate`.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CalibrationError, ContractError

US = 1e-6


@dataclass(frozen=True)
class HardwareProfile:
    """Hardware and calibration parameters for one GPU system.

    Time-like fields are seconds, bandwidths bytes/s, ``sm_flops`` is the
    effective per-SM dense throughput in flop/s. The collective fields
    describe an affine model at ``reference_hidden``.
    """

    name: str = "h100"
    num_sms: int = 132
    tile_tokens: int = 128
    tile_cols: int = 128
    cta_columns: int = 56
    sm_flops: float = 3.8e12
    attention_efficiency: float = 0.7
    hbm_bandwidth_effective: float = 2.27e12
    norm_launch_overhead: float = 7.0 * US
    launch_overhead: float = 2.0 * US
    collective_base_latency: float = 13.8 * US
    collective_per_token_time: float = 0.0593 * US
    fused_gap: float = 0.03
    rs_base_latency: float = 11.0 * US
    ag_base_latency: float = 11.0 * US
    rs_per_token_time: float = 0.0326 * US
    ag_per_token_time: float = 0.0326 * US
    collective_sms: int = 8
    saturation_sms: int = 8
    saturation_penalty: float = 0.35
    default_ar_scale: float = 1.25
    bytes_per_element: int = 2
    reference_hidden: int = 8192
    non_layer_overhead: float = 3.0e-3

    def __post_init__(self):
        if self.num_sms < 1:
            raise ContractError("num_sms must be >= 1")
        if not 1 <= self.collective_sms < self.num_sms:
            raise ContractError("collective_sms must be in [1, num_sms)")
        for name in ("sm_flops", "hbm_bandwidth_effective", "collective_per_token_time",
                     "attention_efficiency", "tile_tokens", "tile_cols", "cta_columns"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown profile fields: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "HardwareProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def overlap_sms(self) -> int:
        """SMs left for compute while a collective is in flight."""
        return self.num_sms - self.collective_sms


@dataclass(frozen=True)
class KernelCost:
    ctas: int
    waves: int
    duration: float
    sms_used: int
    bytes_moved: float = 0.0

    def __add__(self, other: "KernelCost") -> "KernelCost":
        return KernelCost(
            self.ctas + other.ctas,
            self.waves + other.waves,
            self.duration + other.duration,
            max(self.sms_used, other.sms_used),
            self.bytes_moved + other.bytes_moved,
        )


ZERO_COST = KernelCost(0, 0, 0.0, 0)


@dataclass(frozen=True)
class LayerSpec:
    """Shape of one transformer block and its tensor-parallel degree."""

    hidden: int
    intermediate: int
    num_attention_heads: int
    num_kv_heads: int
    head_dim: int
    num_layers: int
    experts: int = 1
    top_k: int = 1
    tp_degree: int = 8
    name: str = "custom"

    def __post_init__(self):
        if self.tp_degree < 2:
            raise ContractError("tp_degree must be >= 2")
        if self.experts < 1 or not 1 <= self.top_k <= self.experts:
            raise ContractError("need experts >= 1 and 1 <= top_k <= experts")
        if self.num_attention_heads % self.tp_degree:
            raise ContractError("attention heads must divide evenly across TP ranks")
        if self.num_attention_heads % self.num_kv_heads:
            raise ContractError("query heads must be a multiple of KV heads")
        if min(self.hidden, self.intermediate, self.head_dim, self.num_layers) < 1:
            raise ContractError("dimensions must be positive")

    @property
    def heads_per_rank(self) -> int:
        return self.num_attention_heads // self.tp_degree

    @property
    def kv_heads_per_rank(self) -> int:
        # KV heads are replicated when there are fewer of them than ranks
        return max(1, self.num_kv_heads // self.tp_degree)

    @property
    def intermediate_per_rank(self) -> int:
        return math.ceil(self.intermediate / self.tp_degree)

    @property
    def is_moe(self) -> bool:
        return self.experts > 1


# --------------------------------------------------------------------------
# waves and GEMMs


def cta_count(num_tokens: int, profile: HardwareProfile) -> int:
    """CTAs of the profile's reference GEMM for ``num_tokens`` rows."""
    if num_tokens < 0:
        raise ContractError("num_tokens must be >= 0")
    return math.ceil(num_tokens / profile.tile_tokens) * profile.cta_columns


def wave_count(ctas: int, sms_available: int) -> int:
    if sms_available < 1:
        raise ContractError(f"sms_available must be >= 1, got {sms_available}")
    return -(-ctas // sms_available)


def _tiled_gemm(row_tiles: int, m_cols: int, k_depth: int, sms: int, profile: HardwareProfile) -> KernelCost:
    col_tiles = math.ceil(m_cols / profile.tile_cols)
    ctas = row_tiles * col_tiles
    waves = wave_count(ctas, sms)
    one_wave = 2.0 * profile.tile_tokens * profile.tile_cols * k_depth / profile.sm_flops
    return KernelCost(ctas, waves, waves * one_wave, min(ctas, sms))


def gemm_time(
    num_tokens: int, m_cols: int, k_depth: int, sms_available: int, profile: HardwareProfile
) -> KernelCost:
    """Wave-quantized ``(num_tokens x k_depth) @ (k_depth x m_cols)``.

    One wave costs a full tile's flops at one SM's throughput, regardless of
    how many SMs the wave actually fills.
    """
    if num_tokens < 0 or m_cols < 1 or k_depth < 1:
        raise ContractError("gemm dimensions must be positive")
    row_tiles = math.ceil(num_tokens / profile.tile_tokens)
    return _tiled_gemm(row_tiles, m_cols, k_depth, sms_available, profile)


def weight_bound(cost: KernelCost, weight_bytes: float, profile: HardwareProfile) -> KernelCost:
    """Roofline floor: a GEMM never beats streaming its weights once from HBM."""
    if cost.ctas == 0:
        return cost
    floor = weight_bytes / profile.hbm_bandwidth_effective
    return replace(cost, duration=max(cost.duration, floor), bytes_moved=weight_bytes)


def linear_time(num_tokens: int, m_cols: int, k_depth: int, sms: int, profile: HardwareProfile) -> KernelCost:
    cost = gemm_time(num_tokens, m_cols, k_depth, sms, profile)
    return weight_bound(cost, m_cols * k_depth * profile.bytes_per_element, profile)


def ffn_gemms(spec: LayerSpec) -> tuple[tuple[int, int], ...]:
    """(m_cols, k_depth) of the per-rank FFN GEMMs: fused gate/up, then down."""
    inter = spec.intermediate_per_rank
    return ((2 * inter, spec.hidden), (spec.hidden, inter))


def ffn_time(num_tokens: int, spec: LayerSpec, sms_available: int, profile: HardwareProfile) -> KernelCost:
    """Feed-forward block on one rank.

    Dense FFNs are two weight-bound GEMMs. MoE FFNs spread
    ``num_tokens * top_k`` routed rows uniformly over the experts and run
    them as one grouped launch per projection, so wave quantization applies
    to the expert tiles together; every active expert's weights are streamed.
    """
    if num_tokens == 0:
        return ZERO_COST
    bpe = profile.bytes_per_element
    if not spec.is_moe:
        total = ZERO_COST
        for m_cols, k_depth in ffn_gemms(spec):
            total = total + linear_time(num_tokens, m_cols, k_depth, sms_available, profile)
        return total
    routed = num_tokens * spec.top_k
    active = min(spec.experts, routed)
    per_expert = math.ceil(routed / spec.experts)
    rows = active * math.ceil(per_expert / profile.tile_tokens)
    total = ZERO_COST
    for m_cols, k_depth in ffn_gemms(spec):
        cost = _tiled_gemm(rows, m_cols, k_depth, sms_available, profile)
        total = total + weight_bound(cost, active * m_cols * k_depth * bpe, profile)
    return total


# --------------------------------------------------------------------------
# attention


def attention_pairs(chunks: Sequence[tuple[int, int]]) -> int:
    """Causal (query, key) pairs for chunks of ``(new_tokens, cached_context)``."""
    return sum(n * c + n * (n + 1) // 2 for n, c in chunks)


def attention_time(
    num_tokens: int,
    kv_context: int,
    spec: LayerSpec,
    sms_available: int,
    profile: HardwareProfile,
    chunks: Sequence[tuple[int, int]] | None = None,
) -> KernelCost:
    """QKV projection, causal attention core and O projection on one rank.

    By default the ``num_tokens`` new tokens form one sequence chunk that
    also attends to ``kv_context`` cached tokens. ``chunks`` overrides this
    with per-sequence ``(new_tokens, cached_context)`` pairs. The cached KV
    rows are streamed from HBM on top of the wave-quantized compute.
    """
    if chunks is None:
        chunks = ((num_tokens, kv_context),)
    chunks = tuple((int(n), int(c)) for n, c in chunks if n > 0)
    total_new = sum(n for n, _ in chunks)
    if total_new == 0:
        return ZERO_COST
    hpr, kvr, hd = spec.heads_per_rank, spec.kv_heads_per_rank, spec.head_dim
    qkv = linear_time(total_new, (hpr + 2 * kvr) * hd, spec.hidden, sms_available, profile)
    out = linear_time(total_new, spec.hidden, hpr * hd, sms_available, profile)

    pairs = attention_pairs(chunks)
    flops = 4.0 * hpr * hd * pairs
    ctas = sum(math.ceil(n / profile.tile_tokens) for n, _ in chunks) * hpr
    waves = wave_count(ctas, sms_available)
    per_cta = flops / ctas / (profile.sm_flops * profile.attention_efficiency)
    cached = sum(c for _, c in chunks)
    kv_bytes = 2.0 * kvr * hd * cached * profile.bytes_per_element
    core = KernelCost(ctas, waves, waves * per_cta + kv_bytes / profile.hbm_bandwidth_effective,
                      min(ctas, sms_available), kv_bytes)
    return qkv + core + out


# --------------------------------------------------------------------------
# memory-bound norm and collectives


def rmsnorm_time(
    num_tokens: int,
    hidden: int,
    profile: HardwareProfile,
    sharded: bool = False,
    world_size: int = 8,
) -> KernelCost:
    """Residual-add + RMSNorm: two reads and one write of the tensor.

    ``sharded`` touches only this rank's ``1/world_size`` of the tokens.
    """
    if num_tokens <= 0:
        return ZERO_COST
    tokens = num_tokens / world_size if sharded else num_tokens
    nbytes = 3.0 * tokens * hidden * profile.bytes_per_element
    duration = nbytes / profile.hbm_bandwidth_effective + profile.norm_launch_overhead
    return KernelCost(0, 0, duration, profile.num_sms, nbytes)


class CollectiveKind(str, enum.Enum):
    ALL_REDUCE = "allreduce"
    REDUCE_SCATTER = "reduce_scatter"
    ALL_GATHER = "all_gather"
    FUSED_AR_NORM = "fused"

    @classmethod
    def parse(cls, kind) -> "CollectiveKind":
        if isinstance(kind, cls):
            return kind
        try:
            return cls(str(kind).lower())
        except ValueError:
            raise ContractError(f"unknown collective kind {kind!r}") from None


def sm_saturation(sms: int, profile: HardwareProfile) -> float:
    """Slow-down factor of a collective given ``sms`` SMs; flat at or past saturation."""
    if sms < 1:
        raise ContractError("a collective needs at least one SM")
    return 1.0 + profile.saturation_penalty * max(0.0, profile.saturation_sms / sms - 1.0)


def collective_time(
    kind,
    num_tokens: int,
    hidden: int,
    sms: int,
    profile: HardwareProfile,
    implementation: str = "multimem",
) -> KernelCost:
    """Affine collective latency, scaled by ``hidden / reference_hidden``.

    ``implementation="default"`` models the non-Multimem AllReduce path,
    uniformly ``default_ar_scale`` slower.
    """
    kind = CollectiveKind.parse(kind)
    if num_tokens <= 0:
        return ZERO_COST
    scaled = num_tokens * hidden / profile.reference_hidden
    if kind in (CollectiveKind.ALL_REDUCE, CollectiveKind.FUSED_AR_NORM):
        t = profile.collective_base_latency + profile.collective_per_token_time * scaled
        if kind is CollectiveKind.FUSED_AR_NORM:
            t *= 1.0 + profile.fused_gap
    elif kind is CollectiveKind.REDUCE_SCATTER:
        t = profile.rs_base_latency + profile.rs_per_token_time * scaled
    else:
        t = profile.ag_base_latency + profile.ag_per_token_time * scaled
    if implementation == "default":
        t *= profile.default_ar_scale
    elif implementation != "multimem":
        raise ContractError(f"unknown collective implementation {implementation!r}")
    nbytes = num_tokens * hidden * profile.bytes_per_element
    return KernelCost(0, 0, t * sm_saturation(sms, profile), sms, nbytes)


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationTable:
    """Measured ``(tokens, microseconds)`` series at one hidden size."""

    name: str
    hidden: int
    series: dict = field(default_factory=dict)
    bytes_per_element: int = 2
    world_size: int = 8

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationTable":
        try:
            series = {
                key: tuple((int(p["tokens"]), float(p["microseconds"])) for p in points)
                for key, points in data["series"].items()
            }
            return cls(
                name=data.get("name", "table"),
                hidden=int(data["hidden"]),
                series=series,
                bytes_per_element=int(data.get("bytes_per_element", 2)),
                world_size=int(data.get("world_size", 8)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CalibrationError(f"malformed calibration table: {exc}") from exc

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "hidden": self.hidden,
            "bytes_per_element": self.bytes_per_element,
            "world_size": self.world_size,
            "series": {
                k: [{"tokens": t, "microseconds": us} for t, us in v] for k, v in self.series.items()
            },
        }

    def points(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        pts = self.series.get(key, ())
        return (np.array([p[0] for p in pts], dtype=float), np.array([p[1] for p in pts], dtype=float))


# weighting used per series; "absolute" is ordinary least squares,
# "relative" minimizes squared relative error
DEFAULT_WEIGHTING = {
    "allreduce": "absolute",
    "rmsnorm": "relative",
    "reduce_scatter": "absolute",
    "all_gather": "absolute",
}
MAX_FUSED_GAP = 0.03


def fit_affine(x: np.ndarray, y: np.ndarray, weighting: str = "absolute") -> tuple[float, float]:
    """Least-squares ``y ~ intercept + slope * x``; returns ``(intercept, slope)``."""
    if x.size != y.size:
        raise CalibrationError("x and y differ in length")
    if np.unique(x).size < 2:
        raise CalibrationError("need at least two distinct token counts to fit a line")
    if weighting == "absolute":
        w = np.ones_like(y)
    elif weighting == "relative":
        if np.any(y <= 0):
            raise CalibrationError("relative weighting needs positive measurements")
        w = 1.0 / y
    else:
        raise CalibrationError(f"unknown weighting {weighting!r}")
    design = np.column_stack([np.ones_like(x), x]) * w[:, None]
    coef, _, rank, _ = np.linalg.lstsq(design, y * w, rcond=None)
    if rank < 2:
        raise CalibrationError("rank-deficient calibration series")
    return float(coef[0]), float(coef[1])


def _checked_line(key: str, intercept: float, slope: float) -> None:
    if slope <= 0:
        raise CalibrationError(f"{key}: fitted slope {slope:.4g} is not positive")
    if intercept < 0:
        raise CalibrationError(f"{key}: fitted base latency {intercept:.4g} us is negative")


def calibrate(
    table: CalibrationTable,
    base: HardwareProfile | None = None,
    weighting: dict | None = None,
    max_fused_gap: float = MAX_FUSED_GAP,
) -> HardwareProfile:
    """Fit collective and norm parameters of ``base`` to a measured table.

    Series recognised: ``allreduce`` (required), ``rmsnorm``, ``fused``,
    ``reduce_scatter``, ``all_gather``. The fused kernel's relative gap over
    AllReduce is the mean measured ratio, clamped to ``[0, max_fused_gap]``.
    Without RS/AG series their lines are derived from the AllReduce fit.
    """
    base = base or HardwareProfile()
    wmode = dict(DEFAULT_WEIGHTING)
    wmode.update(weighting or {})
    if "allreduce" not in table.series:
        raise CalibrationError("calibration table has no 'allreduce' series")
    hidden_scale = table.hidden / base.reference_hidden
    updates: dict = {"bytes_per_element": table.bytes_per_element}

    tok, us = table.points("allreduce")
    a, b = fit_affine(tok * hidden_scale, us, wmode["allreduce"])
    _checked_line("allreduce", a, b)
    updates["collective_base_latency"] = a * US
    updates["collective_per_token_time"] = b * US

    if "rmsnorm" in table.series:
        tok_n, us_n = table.points("rmsnorm")
        nbytes = 3.0 * tok_n * table.hidden * table.bytes_per_element
        c, d = fit_affine(nbytes, us_n, wmode["rmsnorm"])
        _checked_line("rmsnorm", c, d)
        updates["norm_launch_overhead"] = c * US
        updates["hbm_bandwidth_effective"] = 1.0 / (d * US)

    if "fused" in table.series:
        ar = dict(table.series["allreduce"])
        ratios = [us_f / ar[t] for t, us_f in table.series["fused"] if t in ar]
        if not ratios:
            raise CalibrationError("fused series shares no token counts with allreduce")
        updates["fused_gap"] = float(min(max(np.mean(ratios) - 1.0, 0.0), max_fused_gap))

    for key, prefix in (("reduce_scatter", "rs"), ("all_gather", "ag")):
        if key in table.series:
            t_k, us_k = table.points(key)
            c, d = fit_affine(t_k * hidden_scale, us_k, wmode[key])
            _checked_line(key, c, d)
        else:
            # each half moves ~55% of the AllReduce bytes and pays most of its launch cost
            c, d = 0.8 * a, 0.55 * b
        updates[f"{prefix}_base_latency"] = c * US
        updates[f"{prefix}_per_token_time"] = d * US

    return replace(base, name=table.name, **updates)


def predict_series(key: str, tokens: Iterable[int], hidden: int, profile: HardwareProfile, world_size: int = 8) -> list[float]:
    """Modeled microseconds for a calibration series name."""
    out = []
    for t in tokens:
        if key == "rmsnorm":
            cost = rmsnorm_time(t, hidden, profile)
        elif key == "ar_plus_rmsnorm":
            cost = collective_time("allreduce", t, hidden, profile.collective_sms, profile) + rmsnorm_time(t, hidden, profile)
        else:
            cost = collective_time(key, t, hidden, profile.collective_sms, profile)
        out.append(cost.duration / US)
    return out


def fit_residuals(table: CalibrationTable, profile: HardwareProfile) -> dict[str, list[float]]:
    """Relative error (model / measured - 1) per point of every fitted series."""
    result = {}
    for key in ("allreduce", "rmsnorm", "fused", "reduce_scatter", "all_gather"):
        if key not in table.series:
            continue
        tok, us = table.points(key)
        pred = predict_series(key, tok.astype(int), table.hidden, profile, table.world_size)
        result[key] = [p / m - 1.0 for p, m in zip(pred, us)]
    return result


# --------------------------------------------------------------------------
# shipped profiles

_BASES = {
    "h100": HardwareProfile(name="h100"),
    "b200": HardwareProfile(name="b200", num_sms=148, sm_flops=9.0e12, hbm_bandwidth_effective=6.0e12),
}
_TABLES = {"h100": "h100_microbench.json", "b200": "b200_microbench.json"}


def load_table(name: str) -> CalibrationTable:
    """One of the calibration tables shipped with the package."""
    if name not in _TABLES:
        raise ContractError(f"no shipped table {name!r}; choose from {sorted(_TABLES)}")
    text = resources.files("weavesim.data").joinpath(_TABLES[name]).read_text()
    return CalibrationTable.from_dict(json.loads(text))


@lru_cache(maxsize=None)
def builtin_profile(name: str) -> HardwareProfile:
    """Calibrated profile for ``"h100"`` or ``"b200"``."""
    key = name.lower()
    if key not in _BASES:
        raise ContractError(f"unknown hardware profile {name!r}; choose from {sorted(_BASES)}")
    return calibrate(load_table(key), base=_BASES[key])


def resolve_profile(name_or_path: str) -> HardwareProfile:
    """A built-in profile name, a profile JSON file, or a calibration table file."""
    if name_or_path.lower() in _BASES:
        return builtin_profile(name_or_path)
    path = Path(name_or_path)
    if not path.exists():
        raise ContractError(f"profile {name_or_path!r} is neither built in nor a file")
    data = json.loads(path.read_text())
    if "series" in data:
        return calibrate(CalibrationTable.from_dict(data))
    return HardwareProfile.from_dict(data)
