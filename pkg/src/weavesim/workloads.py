"""Request traces and chunked-prefill batch formation for throughput runs.

Batches are formed offline: requests are admitted first-come first-served in
arrival order, with no wall-clock gating on ``arrival``. Every iteration
packs one decode token per running request first, then fills the rest of
the token budget with prefill chunks.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, TraceParseError
from .scheduler import BaselineMode, ForwardBatch, iteration_latency
from .splitter import SplitPolicy
from .wavemodel import HardwareProfile, LayerSpec

DEFAULT_MAX_NUM_SEQS = 1024


@dataclass(frozen=True)
class Request:
    id: int
    prompt_tokens: int
    output_tokens: int
    arrival: float = 0.0

    def __post_init__(self):
        if self.prompt_tokens < 1:
            raise ContractError(f"request {self.id}: prompt_tokens must be >= 1")
        if self.output_tokens < 0:
            raise ContractError(f"request {self.id}: output_tokens must be >= 0")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.output_tokens


@dataclass(frozen=True)
class IterationBatch:
    """Tokens processed in one forward pass.

    ``prefill_token_slices`` holds ``(request id, start, length)`` prompt
    chunks; ``decode_contexts`` holds the cached length of each decoding request.
    """

    prefill_token_slices: tuple[tuple[int, int, int], ...] = ()
    decode_ids: tuple[int, ...] = ()
    decode_contexts: tuple[int, ...] = ()

    @property
    def prefill_tokens(self) -> int:
        return sum(n for _, _, n in self.prefill_token_slices)

    @property
    def decode_token_count(self) -> int:
        return len(self.decode_ids)

    @property
    def total_tokens(self) -> int:
        return self.prefill_tokens + self.decode_token_count

    def forward_batch(self) -> ForwardBatch:
        """Per-sequence chunks for the cost model; earlier prompt chunks are cached context."""
        chunks = [(n, start) for _, start, n in self.prefill_token_slices]
        chunks += [(1, ctx) for ctx in self.decode_contexts]
        return ForwardBatch(tuple(chunks))


# --------------------------------------------------------------------------
# trace files

_TRACE_FIELDS = ("prompt_tokens", "output_tokens")


def parse_trace(lines: Iterable[str]) -> list[Request]:
    requests = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise TraceParseError("record is not a JSON object", lineno)
        for key in _TRACE_FIELDS:
            value = record.get(key)
            if isinstance(value, bool) or not isinstance(value, int):
                raise TraceParseError(f"{key!r} must be an integer, got {value!r}", lineno)
        arrival = record.get("arrival_s", 0.0)
        if isinstance(arrival, bool) or not isinstance(arrival, (int, float)) or arrival < 0:
            raise TraceParseError(f"'arrival_s' must be a nonnegative number, got {arrival!r}", lineno)
        rid = record.get("id", len(requests))
        try:
            requests.append(Request(int(rid), record["prompt_tokens"], record["output_tokens"], float(arrival)))
        except (ContractError, TypeError, ValueError) as exc:
            raise TraceParseError(str(exc), lineno) from None
    return requests


def load_trace(path) -> list[Request]:
    """Read a JSON-lines trace; order is preserved."""
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh)


def dump_trace(requests: Sequence[Request]) -> str:
    out = []
    for r in requests:
        out.append(json.dumps({
            "id": r.id,
            "prompt_tokens": r.prompt_tokens,
            "output_tokens": r.output_tokens,
            "arrival_s": r.arrival,
        }))
    return "".join(line + "\n" for line in out)


def save_trace(requests: Sequence[Request], path) -> None:
    Path(path).write_text(dump_trace(requests), encoding="utf-8")


def synth_trace(count: int, prompt_len: int, output_len: int) -> list[Request]:
    """``count`` identical fixed-shape requests."""
    return [Request(i, prompt_len, output_len) for i in range(count)]


def lognormal_trace(
    count: int,
    prompt_median: float,
    output_median: float,
    sigma: float = 1.0,
    seed: int = 0,
    max_len: int = 8192,
) -> list[Request]:
    """Variable-length trace with log-normally distributed lengths."""
    rng = np.random.default_rng(seed)
    prompts = np.clip(np.rint(rng.lognormal(np.log(prompt_median), sigma, count)), 1, max_len)
    outputs = np.clip(np.rint(rng.lognormal(np.log(output_median), sigma, count)), 1, max_len)
    return [Request(i, int(p), int(o)) for i, (p, o) in enumerate(zip(prompts, outputs))]


SHIPPED_TRACES = {"sharegpt-like": "sharegpt_like.jsonl", "arxiv-like": "arxiv_like.jsonl"}


def shipped_trace(name: str) -> list[Request]:
    if name not in SHIPPED_TRACES:
        raise ContractError(f"no shipped trace {name!r}; choose from {sorted(SHIPPED_TRACES)}")
    text = resources.files("weavesim.data").joinpath(SHIPPED_TRACES[name]).read_text()
    return parse_trace(text.splitlines())


# --------------------------------------------------------------------------
# batch formation


@dataclass
class _Active:
    request: Request
    prefilled: int = 0
    decoded: int = 0

    @property
    def context(self) -> int:
        return self.prefilled + self.decoded


@dataclass
class BatchFormer:
    """Chunked-prefill scheduler state; :meth:`step` emits one iteration."""

    requests: Sequence[Request]
    chunk_size: int
    max_num_seqs: int | None = DEFAULT_MAX_NUM_SEQS
    waiting: deque = field(init=False)
    prefilling: list = field(init=False, default_factory=list)
    decoding: list = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ContractError("chunk_size must be >= 1")
        if self.max_num_seqs is not None and self.max_num_seqs < 1:
            raise ContractError("max_num_seqs must be >= 1")
        order = sorted(range(len(self.requests)), key=lambda i: (self.requests[i].arrival, i))
        self.waiting = deque(self.requests[i] for i in order)

    @property
    def done(self) -> bool:
        return not (self.waiting or self.prefilling or self.decoding)

    def _room(self) -> bool:
        live = len(self.prefilling) + len(self.decoding)
        return self.max_num_seqs is None or live < self.max_num_seqs

    def step(self) -> IterationBatch:
        budget = self.chunk_size
        stepped = self.decoding[:budget]
        decode_ids = tuple(a.request.id for a in stepped)
        decode_ctx = tuple(a.context for a in stepped)
        budget -= len(stepped)

        slices = []
        # partially prefilled requests first, then newly admitted ones
        for act in self.prefilling:
            if budget == 0:
                break
            n = min(budget, act.request.prompt_tokens - act.prefilled)
            slices.append((act, act.prefilled, n))
            budget -= n
        while budget > 0 and self.waiting and self._room():
            act = _Active(self.waiting.popleft())
            self.prefilling.append(act)
            n = min(budget, act.request.prompt_tokens)
            slices.append((act, 0, n))
            budget -= n

        for act in stepped:
            act.decoded += 1
        self.decoding = [a for a in self.decoding if a.decoded < a.request.output_tokens]
        for act, _, n in slices:
            act.prefilled += n
            if act.prefilled == act.request.prompt_tokens:
                self.prefilling.remove(act)
                if act.request.output_tokens > 0:
                    self.decoding.append(act)
        return IterationBatch(
            tuple((a.request.id, start, n) for a, start, n in slices), decode_ids, decode_ctx
        )


def form_batches(
    requests: Sequence[Request],
    chunk_size: int,
    max_num_seqs: int | None = DEFAULT_MAX_NUM_SEQS,
) -> Iterator[IterationBatch]:
    """Yield iterations until every request has finished."""
    former = BatchFormer(requests, chunk_size, max_num_seqs)
    while not former.done:
        yield former.step()


# --------------------------------------------------------------------------
# throughput


@dataclass(frozen=True)
class ThroughputResult:
    mode: str
    total_tokens: int
    total_time: float
    iteration_latencies: tuple[float, ...]

    @property
    def tokens_per_second(self) -> float:
        return self.total_tokens / self.total_time if self.total_time > 0 else 0.0

    @property
    def iterations(self) -> int:
        return len(self.iteration_latencies)

    @property
    def mean_iteration_latency(self) -> float:
        return self.total_time / self.iterations if self.iterations else 0.0


def simulate_throughput(
    trace: Sequence[Request],
    spec: LayerSpec,
    profile: HardwareProfile,
    mode,
    policy: SplitPolicy,
    chunk_size: int,
    max_num_seqs: int | None = DEFAULT_MAX_NUM_SEQS,
) -> ThroughputResult:
    """Run the trace to completion and report processed tokens per simulated second."""
    mode = BaselineMode.parse(mode)
    expected = sum(r.total_tokens for r in trace)
    latencies = []
    processed = 0
    cache: dict = {}
    for batch in form_batches(trace, chunk_size, max_num_seqs):
        fwd = batch.forward_batch()
        if fwd.chunks not in cache:
            cache[fwd.chunks] = iteration_latency(fwd, spec, profile, mode, policy)
        latencies.append(cache[fwd.chunks])
        processed += batch.total_tokens
    if processed != expected:
        raise ContractError(f"token accounting broke: processed {processed}, trace holds {expected}")
    return ThroughputResult(mode.value, processed, float(sum(latencies)), tuple(latencies))
