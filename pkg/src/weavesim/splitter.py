"""Two-way token splitting: mode selection, wave-aware offsets, sequence boundaries.

A batch of ``T`` tokens is cut at position ``T_a`` into a prefix split and a
suffix split. The offset is measured from the equal split ``ceil(T / 2)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .errors import ContractError
from .wavemodel import HardwareProfile, LayerSpec, cta_count, ffn_time, wave_count

DEFAULT_OFFSET_GRID = (0, 64, 128, 192, 256, 512)


class Mode(str, enum.Enum):
    NO_SPLIT = "nosplit"
    FUSED_ONLY = "fusedonly"
    OVERLAP = "overlap"


@dataclass(frozen=True)
class SplitPolicy:
    threshold_tokens: int = 1024
    offset_grid: tuple[int, ...] = DEFAULT_OFFSET_GRID
    smart: bool = True

    def __post_init__(self):
        object.__setattr__(self, "offset_grid", tuple(int(v) for v in self.offset_grid))
        if self.threshold_tokens < 1:
            raise ContractError("threshold_tokens must be >= 1")
        grid = self.offset_grid
        if any(v < 0 for v in grid) or list(grid) != sorted(grid):
            raise ContractError(f"offset grid must be nonnegative and ascending, got {grid}")


@dataclass(frozen=True)
class SplitPlan:
    """Where the flattened batch is cut and how the batch will run.

    ``partial_sequence_boundaries[i]`` is how many tokens of sequence ``i``
    land in the prefix split; it is empty until sequence lengths are placed.
    """

    total_tokens: int
    prefix_tokens: int
    suffix_tokens: int
    offset: int
    mode: Mode
    sequence_lengths: tuple[int, ...] = ()
    partial_sequence_boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        if self.prefix_tokens < 0 or self.suffix_tokens < 0:
            raise ContractError("split sizes must be nonnegative")
        if self.prefix_tokens + self.suffix_tokens != self.total_tokens:
            raise ContractError(
                f"prefix {self.prefix_tokens} + suffix {self.suffix_tokens} != total {self.total_tokens}"
            )

    @property
    def is_split(self) -> bool:
        return self.prefix_tokens > 0 and self.suffix_tokens > 0

    @property
    def straddler(self) -> int | None:
        """Index of the sequence cut by the split boundary, if any."""
        for i, (length, pre) in enumerate(zip(self.sequence_lengths, self.partial_sequence_boundaries)):
            if 0 < pre < length:
                return i
        return None


def select_mode(num_tokens: int, policy: SplitPolicy) -> Mode:
    """Overlap at or above the threshold; fused kernel alone below it."""
    return Mode.OVERLAP if num_tokens >= policy.threshold_tokens else Mode.FUSED_ONLY


def equal_split(num_tokens: int) -> tuple[int, int]:
    half = -(-num_tokens // 2)
    return half, num_tokens - half


def split_waves(prefix_tokens: int, suffix_tokens: int, profile: HardwareProfile, sms: int | None = None) -> int:
    """Total waves of the reference GEMM run once per split."""
    sms = sms or profile.num_sms
    return wave_count(cta_count(prefix_tokens, profile), sms) + wave_count(cta_count(suffix_tokens, profile), sms)


def _candidate_prefixes(num_tokens: int, tile: int) -> list[int]:
    # CTA counts only change at tile boundaries, so tile-aligned cuts plus
    # the equal split cover every distinct cost
    half, _ = equal_split(num_tokens)
    cands = {half}
    cands.update(range(tile, num_tokens, tile))
    return sorted(c for c in cands if 0 < c < num_tokens)


def smart_offset_analytic(
    num_tokens: int, profile: HardwareProfile, spec: LayerSpec | None = None
) -> int:
    """Offset from the equal split that minimizes split cost.

    The cost is total reference-GEMM waves, or with ``spec`` the modeled FFN
    duration of both splits (waves break ties). Among equal costs the cut
    whose prefix ends on a full last wave wins, then the cut closest to the
    equal split, then a nonnegative offset. The offset may be negative when
    the best full-wave prefix sits below the half. A single-wave unsplit
    kernel returns the all-prefix offset, which disables splitting.
    """
    if num_tokens < 2:
        return num_tokens - equal_split(num_tokens)[0]
    half, _ = equal_split(num_tokens)
    sms = profile.num_sms
    if wave_count(cta_count(num_tokens, profile), sms) <= 1:
        return num_tokens - half

    def key(prefix: int):
        suffix = num_tokens - prefix
        waves = split_waves(prefix, suffix, profile)
        if spec is None:
            cost = (waves,)
        else:
            t = ffn_time(prefix, spec, sms, profile).duration + ffn_time(suffix, spec, sms, profile).duration
            cost = (round(t, 15), waves)
        full_last = cta_count(prefix, profile) % sms == 0
        return cost + (not full_last, abs(prefix - half), prefix < half)

    best = min(_candidate_prefixes(num_tokens, profile.tile_tokens), key=key)
    return best - half


def smart_offset_sweep(
    num_tokens: int,
    policy: SplitPolicy,
    simulate_forward: Callable[[int, int], float],
) -> int:
    """Profiling-style sweep: try each grid offset, keep the fastest.

    Offsets at or beyond half the batch are skipped. Strict comparison keeps
    the smaller offset on ties. Returns 0 if no offset is feasible.
    """
    half_tokens = num_tokens // 2
    best_offset, best_time = 0, math.inf
    for offset in policy.offset_grid:
        if offset >= half_tokens:
            continue
        t = simulate_forward(half_tokens + offset, num_tokens - half_tokens - offset)
        if t < best_time:
            best_offset, best_time = offset, t
    return best_offset


def plan_split(
    num_tokens: int,
    policy: SplitPolicy,
    profile: HardwareProfile,
    spec: LayerSpec | None = None,
    sequence_lengths: Sequence[int] | None = None,
) -> SplitPlan:
    """Choose mode and cut for a batch; places sequence boundaries if given."""
    mode = select_mode(num_tokens, policy)
    offset = 0
    prefix = num_tokens
    if mode is Mode.OVERLAP:
        half, _ = equal_split(num_tokens)
        offset = smart_offset_analytic(num_tokens, profile, spec) if policy.smart else 0
        prefix = half + offset
        if prefix >= num_tokens:
            # single-wave batch: everything in the prefix, fused kernel only
            mode = Mode.FUSED_ONLY
    plan = SplitPlan(num_tokens, prefix, num_tokens - prefix, offset, mode)
    if sequence_lengths is not None:
        plan = place_sequence_boundaries(sequence_lengths, plan)
    return plan


def place_sequence_boundaries(batch: Sequence[int], plan: SplitPlan) -> SplitPlan:
    """Record, per sequence, how many of its tokens fall before the cut."""
    lengths = tuple(int(n) for n in batch)
    if any(n < 0 for n in lengths):
        raise ContractError("sequence lengths must be nonnegative")
    if sum(lengths) != plan.total_tokens:
        raise ContractError(f"sequence lengths sum to {sum(lengths)}, plan has {plan.total_tokens} tokens")
    prefix_lens = []
    start = 0
    for n in lengths:
        prefix_lens.append(min(max(plan.prefix_tokens - start, 0), n))
        start += n
    return replace(plan, sequence_lengths=lengths, partial_sequence_boundaries=tuple(prefix_lens))
