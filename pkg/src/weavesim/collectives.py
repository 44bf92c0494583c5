"""In-process tensor-parallel collectives over simulated ranks.

Ranks are plain per-rank numpy buffers. Reductions always add rank 0, 1, ...,
N-1 in that order, so every operation here is bitwise deterministic and the
AllReduce == AllGather(ReduceScatter) identity holds exactly.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericError
from .numerics import NormParams, TokenMatrix, check_finite, rmsnorm_residual


@dataclass(frozen=True)
class ShardMap:
    """Ordered half-open token ranges, one per rank."""

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ranges = tuple(tuple(r) for r in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        if not ranges:
            raise ContractError("shard map has no ranges")
        prev_end = 0
        for rank, (start, end) in enumerate(ranges):
            for b in (start, end):
                if isinstance(b, bool) or not isinstance(b, (int, np.integer)):
                    raise ContractError(f"rank {rank}: boundary {b!r} is not a whole-token index")
            if start != prev_end:
                raise ContractError(
                    f"rank {rank}: range starts at {start}, expected {prev_end} "
                    "(ranges must be contiguous and ascending)"
                )
            if end < start:
                raise ContractError(f"rank {rank}: range [{start}, {end}) is reversed")
            prev_end = end

    @property
    def world_size(self) -> int:
        return len(self.ranges)

    @property
    def num_tokens(self) -> int:
        return self.ranges[-1][1]

    def owned(self, rank: int) -> tuple[int, int]:
        return self.ranges[rank]

    def count(self, rank: int) -> int:
        start, end = self.ranges[rank]
        return end - start

    def check_covers(self, num_tokens: int, world_size: int) -> None:
        if self.world_size != world_size:
            raise ContractError(f"shard map has {self.world_size} ranges for {world_size} ranks")
        if self.num_tokens != num_tokens:
            raise ContractError(f"shard map covers [0, {self.num_tokens}), tensor has {num_tokens} tokens")


def token_shard_map(num_tokens: int, world_size: int) -> ShardMap:
    """Split ``num_tokens`` rows into contiguous per-rank ranges.

    Every rank gets ``num_tokens // world_size`` rows and the first
    ``num_tokens % world_size`` ranks get one more.
    """
    if world_size < 2:
        raise ConfigurationError(f"world_size must be >= 2, got {world_size}")
    if num_tokens < 0:
        raise ContractError(f"num_tokens must be >= 0, got {num_tokens}")
    base, extra = divmod(num_tokens, world_size)
    ranges = []
    start = 0
    for rank in range(world_size):
        end = start + base + (1 if rank < extra else 0)
        ranges.append((start, end))
        start = end
    return ShardMap(tuple(ranges))


@dataclass
class RankGroup:
    """N simulated ranks: full per-rank inputs plus token-sharded residuals.

    ``residual_shards[r]`` holds only the rows rank ``r`` owns under
    ``shards``. Not safe for concurrent mutation; callers serialize
    collective calls.
    """

    inputs: list[TokenMatrix]
    shards: ShardMap | None = None
    residual_shards: list[np.ndarray] | None = None
    access_log: list[tuple[int, str, int, int]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if len(self.inputs) < 2:
            raise ConfigurationError(f"a rank group needs at least 2 ranks, got {len(self.inputs)}")
        shape = self.inputs[0].shape
        for rank, buf in enumerate(self.inputs):
            if buf.shape != shape:
                raise DimensionError(f"rank {rank} holds {buf.shape}, rank 0 holds {shape}")
        if self.residual_shards is not None:
            if self.shards is None:
                raise ContractError("residual shards given without a shard map")
            self._check_residuals(self.shards)

    @classmethod
    def from_arrays(
        cls,
        inputs: Sequence[np.ndarray],
        residual: np.ndarray | None = None,
        shards: ShardMap | None = None,
    ) -> "RankGroup":
        """Build a group from per-rank ``(T, H)`` arrays and an optional full residual."""
        mats = [TokenMatrix.from_array(a) for a in inputs]
        if residual is None:
            return cls(mats, shards)
        num_tokens = mats[0].num_tokens
        if shards is None:
            shards = token_shard_map(num_tokens, len(mats))
        residual = np.asarray(residual, dtype=np.float32)
        if residual.shape != mats[0].shape:
            raise DimensionError(f"residual {residual.shape} vs inputs {mats[0].shape}")
        shards.check_covers(num_tokens, len(mats))
        parts = [residual[s:e].copy() for s, e in shards.ranges]
        return cls(mats, shards, parts)

    @property
    def world_size(self) -> int:
        return len(self.inputs)

    @property
    def num_tokens(self) -> int:
        return self.inputs[0].num_tokens

    @property
    def hidden(self) -> int:
        return self.inputs[0].hidden

    def _check_residuals(self, shards: ShardMap) -> None:
        shards.check_covers(self.num_tokens, self.world_size)
        if self.residual_shards is None or len(self.residual_shards) != self.world_size:
            raise ContractError("one residual shard per rank is required")
        for rank, part in enumerate(self.residual_shards):
            want = (shards.count(rank), self.hidden)
            if part.shape != want:
                raise DimensionError(f"rank {rank} residual shard is {part.shape}, expected {want}")

    def read_residual(self, rank: int) -> np.ndarray:
        start, end = self.shards.owned(rank)
        self.access_log.append((rank, "read", start, end))
        return self.residual_shards[rank]

    def write_residual(self, rank: int, rows: np.ndarray) -> None:
        start, end = self.shards.owned(rank)
        self.access_log.append((rank, "write", start, end))
        self.residual_shards[rank] = rows

    def full_residual(self) -> TokenMatrix:
        """Materialize the replicated residual (an AllGather of the shards)."""
        return all_gather(self.residual_shards, self.shards)


def _run_ranks(fn, world_size: int, parallel: bool) -> list:
    if not parallel:
        return [fn(rank) for rank in range(world_size)]
    with ThreadPoolExecutor(max_workers=world_size) as pool:
        return list(pool.map(fn, range(world_size)))


def _reduce_rows(group: RankGroup, start: int, end: int) -> np.ndarray:
    acc = np.array(group.inputs[0].as_array()[start:end], dtype=np.float32)
    for buf in group.inputs[1:]:
        acc += buf.as_array()[start:end]
    return acc


def all_reduce(group: RankGroup) -> TokenMatrix:
    """Elementwise sum of every rank's input; every rank receives this result."""
    return TokenMatrix.from_array(_reduce_rows(group, 0, group.num_tokens))


def reduce_scatter(group: RankGroup, shards: ShardMap, parallel: bool = False) -> list[np.ndarray]:
    """Each rank receives the reduced rows it owns under ``shards``."""
    shards.check_covers(group.num_tokens, group.world_size)
    return _run_ranks(lambda r: _reduce_rows(group, *shards.owned(r)), group.world_size, parallel)


def all_gather(per_rank_shards: Sequence[np.ndarray], shards: ShardMap) -> TokenMatrix:
    """Concatenate per-rank row blocks in token order."""
    if len(per_rank_shards) != shards.world_size:
        raise DimensionError(
            f"{len(per_rank_shards)} shards supplied for a {shards.world_size}-rank map"
        )
    hidden = None
    for rank, part in enumerate(per_rank_shards):
        part = np.asarray(part)
        if part.ndim != 2:
            raise DimensionError(f"rank {rank} shard must be 2-D, got shape {part.shape}")
        if part.shape[0] != shards.count(rank):
            raise DimensionError(
                f"rank {rank} shard has {part.shape[0]} rows, map assigns {shards.count(rank)}"
            )
        if hidden is None:
            hidden = part.shape[1]
        elif part.shape[1] != hidden:
            raise DimensionError(f"rank {rank} shard hidden {part.shape[1]} != {hidden}")
    out = np.concatenate([np.asarray(p, dtype=np.float32) for p in per_rank_shards], axis=0)
    return TokenMatrix.from_array(out)


def fused_allreduce_rmsnorm(
    group: RankGroup,
    params: NormParams,
    shards: ShardMap,
    parallel: bool = False,
) -> tuple[TokenMatrix, list[np.ndarray]]:
    """AllReduce + residual add + RMSNorm with token-sharded residuals.

    Each rank reduces only its owned rows, adds its residual shard, normalizes
    those rows and "multicasts" them into the replicated output. The residual
    shard is overwritten with the pre-norm sum, mirroring the kernel's
    in-register update. Returns ``(output, residual_shards)``; the group's
    shards are updated in place as well.
    """
    if group.world_size < 2:
        raise ConfigurationError("fused AllReduce-RMSNorm needs at least 2 ranks")
    if group.shards != shards:
        raise ContractError("residual shards were laid out with a different shard map")
    if params.hidden != group.hidden:
        raise DimensionError(f"weight length {params.hidden} != hidden {group.hidden}")
    group._check_residuals(shards)
    hidden = group.hidden
    weight = params.weight
    for rank, buf in enumerate(group.inputs):
        check_finite(buf.as_array(), f"rank {rank} input")

    def rank_step(rank: int):
        start, end = shards.owned(rank)
        if end == start:
            return rank, np.empty((0, hidden), np.float32)
        temp = _reduce_rows(group, start, end)
        resid = group.read_residual(rank)
        check_finite(resid, f"rank {rank} residual")
        temp += resid
        # variance accumulates column by column like the kernel's inner loop
        variance = np.zeros(end - start, dtype=np.float64)
        for j in range(hidden):
            col = temp[:, j].astype(np.float64)
            variance += col * col
        inv = 1.0 / np.sqrt(variance / hidden + params.epsilon)
        if not np.all(np.isfinite(inv)):
            raise NumericError(f"rank {rank}: zero-norm token with epsilon=0")
        normed = (temp * inv.astype(np.float32)[:, None]) * weight[None, :]
        group.write_residual(rank, temp)
        return rank, normed

    # multicast store: every rank's rows land in one replicated buffer
    output = np.zeros((group.num_tokens, hidden), dtype=np.float32)
    for rank, normed in _run_ranks(rank_step, group.world_size, parallel):
        start, end = shards.owned(rank)
        output[start:end] = normed
    return TokenMatrix.from_array(output), list(group.residual_shards)


def reference_fused(group: RankGroup, params: NormParams) -> tuple[TokenMatrix, TokenMatrix]:
    """Sequential oracle: AllReduce, then residual-add + RMSNorm on the full tensor."""
    reduced = all_reduce(group)
    residual = all_gather(group.residual_shards, group.shards)
    return rmsnorm_residual(reduced, residual, params)
