"""Two-stream event simulation of one forward iteration.

A forward pass is a DAG of kernels, each pinned to the compute or the
communication stream. Streams run their kernels in issue order; a kernel
starts once its stream is free and its dependencies are done. While any
communication kernel is in flight, compute kernels only get
``num_sms - collective_sms`` SMs and their remaining work is rescaled.
"""
from __future__ import annotations

import enum
import graphlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import ContractError
from .splitter import Mode, SplitPlan, SplitPolicy, place_sequence_boundaries, plan_split
from .wavemodel import (
    HardwareProfile,
    LayerSpec,
    attention_time,
    collective_time,
    ffn_time,
    rmsnorm_time,
)


class OpKind(str, enum.Enum):
    ATTENTION = "attention"
    FFN = "ffn"
    FUSED_AR_NORM = "fused_ar_norm"
    ALL_REDUCE = "allreduce"
    ALL_GATHER = "all_gather"
    RMSNORM = "rmsnorm"
    MISC = "misc"


class Stream(str, enum.Enum):
    COMPUTE = "compute"
    COMM = "comm"


class BaselineMode(str, enum.Enum):
    DEFAULT = "default"
    MULTIMEM = "multimem"
    NOCOMM = "nocomm"
    FUSEONLY = "fuseonly"
    TOKENWEAVE = "tokenweave"

    @classmethod
    def parse(cls, value) -> "BaselineMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractError(f"unknown mode {value!r}; choose from {[m.value for m in cls]}") from None


# kernels launched per scheduled op: QKV / core / O, and up / down
_KERNELS = {OpKind.ATTENTION: 3, OpKind.FFN: 2}


@dataclass
class EventNode:
    """A not-yet-scheduled kernel. ``cost(sms)`` gives its duration in seconds."""

    id: int
    op_kind: OpKind
    split: str
    stream: Stream
    cost: Callable[[int], float] = field(repr=False)
    depends_on: tuple[int, ...] = ()
    layer: int = -1


@dataclass
class EventDag:
    nodes: list[EventNode] = field(default_factory=list)

    def add(self, op_kind, split, stream, cost, depends_on=(), layer=-1) -> int:
        node_id = len(self.nodes)
        deps = tuple(d for d in depends_on if d is not None)
        if not isinstance(op_kind, OpKind):
            op_kind = OpKind(op_kind)
        if not isinstance(stream, Stream):
            stream = Stream(stream)
        self.nodes.append(EventNode(node_id, op_kind, split, stream, cost, deps, layer))
        return node_id

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class StreamEvent:
    id: int
    op_kind: OpKind
    split: str
    stream: Stream
    start: float
    end: float
    depends_on: tuple[int, ...]
    layer: int = -1

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Timeline:
    events: tuple[StreamEvent, ...]
    iteration_latency: float

    def busy_time(self, stream: Stream, kinds: Sequence[OpKind] | None = None) -> float:
        return sum(e.duration for e in self.events if e.stream is stream and (kinds is None or e.op_kind in kinds))

    def to_json(self) -> str:
        rows = [
            {
                "id": e.id,
                "op": e.op_kind.value,
                "split": e.split,
                "stream": e.stream.value,
                "layer": e.layer,
                "start_us": round(e.start * 1e6, 6),
                "end_us": round(e.end * 1e6, 6),
                "depends_on": list(e.depends_on),
            }
            for e in self.events
        ]
        doc = {"iteration_latency_us": round(self.iteration_latency * 1e6, 6), "events": rows}
        return json.dumps(doc, indent=1)


# --------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class ForwardBatch:
    """Per-sequence ``(new_tokens, cached_context)`` pairs of one iteration."""

    chunks: tuple[tuple[int, int], ...]

    def __post_init__(self):
        chunks = tuple((int(n), int(c)) for n, c in self.chunks)
        if any(n < 1 or c < 0 for n, c in chunks):
            raise ContractError("every chunk needs >= 1 new token and a nonnegative context")
        object.__setattr__(self, "chunks", chunks)

    @classmethod
    def prefill(cls, num_tokens: int) -> "ForwardBatch":
        return cls(((num_tokens, 0),) if num_tokens > 0 else ())

    @property
    def num_tokens(self) -> int:
        return sum(n for n, _ in self.chunks)

    @property
    def is_decode_only(self) -> bool:
        return bool(self.chunks) and all(n == 1 and c > 0 for n, c in self.chunks)

    def split(self, plan: SplitPlan) -> tuple[tuple, tuple]:
        """Prefix and suffix chunks; suffix pieces see their prefix pieces as context."""
        lengths = [n for n, _ in self.chunks]
        if plan.sequence_lengths != tuple(lengths):
            raise ContractError("plan sequence boundaries do not match this batch")
        prefix, suffix = [], []
        for (n, ctx), pre in zip(self.chunks, plan.partial_sequence_boundaries):
            if pre:
                prefix.append((pre, ctx))
            if n - pre:
                suffix.append((n - pre, ctx + pre))
        return tuple(prefix), tuple(suffix)


# --------------------------------------------------------------------------
# costs


def _memo(fn: Callable[[int], float]) -> Callable[[int], float]:
    cache: dict[int, float] = {}

    def cost(sms: int) -> float:
        if sms not in cache:
            cache[sms] = fn(sms)
        return cache[sms]

    return cost


class _Costs:
    """Shared, memoized cost callables for one batch on one profile."""

    def __init__(self, spec: LayerSpec, profile: HardwareProfile):
        self.spec, self.profile = spec, profile
        self._cache: dict = {}

    def attention(self, chunks) -> Callable[[int], float]:
        key = ("attention", chunks)
        if key not in self._cache:
            spec, prof = self.spec, self.profile
            launch = _KERNELS[OpKind.ATTENTION] * prof.launch_overhead
            self._cache[key] = _memo(lambda sms: attention_time(0, 0, spec, sms, prof, chunks).duration + launch)
        return self._cache[key]

    def ffn(self, tokens: int) -> Callable[[int], float]:
        key = ("ffn", tokens)
        if key not in self._cache:
            spec, prof = self.spec, self.profile
            launch = _KERNELS[OpKind.FFN] * prof.launch_overhead
            self._cache[key] = _memo(lambda sms: ffn_time(tokens, spec, sms, prof).duration + launch)
        return self._cache[key]

    def collective(self, kind: str, tokens: int, implementation: str = "multimem") -> Callable[[int], float]:
        key = (kind, tokens, implementation)
        if key not in self._cache:
            prof, hidden = self.profile, self.spec.hidden
            d = collective_time(kind, tokens, hidden, prof.collective_sms, prof, implementation).duration
            self._cache[key] = self.constant(d)
        return self._cache[key]

    def rmsnorm(self, tokens: int) -> Callable[[int], float]:
        key = ("rmsnorm", tokens)
        if key not in self._cache:
            self._cache[key] = self.constant(rmsnorm_time(tokens, self.spec.hidden, self.profile).duration)
        return self._cache[key]

    def constant(self, seconds: float) -> Callable[[int], float]:
        return lambda sms: seconds


# --------------------------------------------------------------------------
# graph construction

_SEQUENTIAL = (BaselineMode.DEFAULT, BaselineMode.MULTIMEM, BaselineMode.NOCOMM, BaselineMode.FUSEONLY)


def _sequential_half(dag, costs, mode, layer, prev, compute_cost, op_kind, tokens):
    """One compute op followed by its reduction step; returns the last event."""
    node = dag.add(op_kind, "whole", Stream.COMPUTE, compute_cost, (prev,), layer)
    if mode is BaselineMode.NOCOMM:
        return dag.add(OpKind.RMSNORM, "whole", Stream.COMPUTE, costs.rmsnorm(tokens), (node,), layer)
    if mode is BaselineMode.FUSEONLY:
        return dag.add(OpKind.FUSED_AR_NORM, "whole", Stream.COMM, costs.collective("fused", tokens), (node,), layer)
    impl = "default" if mode is BaselineMode.DEFAULT else "multimem"
    ar = dag.add(OpKind.ALL_REDUCE, "whole", Stream.COMM, costs.collective("allreduce", tokens, impl), (node,), layer)
    return dag.add(OpKind.RMSNORM, "whole", Stream.COMPUTE, costs.rmsnorm(tokens), (ar,), layer)


def _append_layer(dag, costs, batch, plan, mode, layer, incoming):
    """Append one transformer block; ``incoming``/return are the tail events per split."""
    tokens = batch.num_tokens
    if mode in _SEQUENTIAL:
        prev = incoming[-1] if incoming else None
        mid = _sequential_half(dag, costs, mode, layer, prev, costs.attention(batch.chunks), OpKind.ATTENTION, tokens)
        last = _sequential_half(dag, costs, mode, layer, mid, costs.ffn(tokens), OpKind.FFN, tokens)
        return (last,)

    pre_chunks, suf_chunks = batch.split(plan)
    t_a, t_b = plan.prefix_tokens, plan.suffix_tokens
    in_p, in_s = incoming if incoming else (None, None)
    C, M = Stream.COMPUTE, Stream.COMM
    attn_p = dag.add(OpKind.ATTENTION, "prefix", C, costs.attention(pre_chunks), (in_p,), layer)
    # suffix attention reads the prefix's keys and values of this layer
    attn_s = dag.add(OpKind.ATTENTION, "suffix", C, costs.attention(suf_chunks), (in_s, attn_p), layer)
    ar_p1 = dag.add(OpKind.FUSED_AR_NORM, "prefix", M, costs.collective("fused", t_a), (attn_p,), layer)
    ar_s1 = dag.add(OpKind.FUSED_AR_NORM, "suffix", M, costs.collective("fused", t_b), (attn_s,), layer)
    ffn_p = dag.add(OpKind.FFN, "prefix", C, costs.ffn(t_a), (ar_p1,), layer)
    ffn_s = dag.add(OpKind.FFN, "suffix", C, costs.ffn(t_b), (ar_s1,), layer)
    ar_p2 = dag.add(OpKind.FUSED_AR_NORM, "prefix", M, costs.collective("fused", t_a), (ffn_p,), layer)
    ar_s2 = dag.add(OpKind.FUSED_AR_NORM, "suffix", M, costs.collective("fused", t_b), (ffn_s,), layer)
    return (ar_p2, ar_s2)


def _check_plan(plan: SplitPlan, mode: BaselineMode) -> None:
    if mode is BaselineMode.TOKENWEAVE and not plan.is_split:
        raise ContractError("overlap scheduling needs a plan with two nonempty splits")


def build_layer_graph(
    plan: SplitPlan,
    spec: LayerSpec,
    profile: HardwareProfile,
    mode,
    batch: ForwardBatch | None = None,
) -> EventDag:
    """Event DAG of a single transformer block for ``mode``."""
    mode = BaselineMode.parse(mode)
    _check_plan(plan, mode)
    batch = batch or ForwardBatch.prefill(plan.total_tokens)
    if not plan.sequence_lengths:
        plan = place_sequence_boundaries([n for n, _ in batch.chunks], plan)
    dag = EventDag()
    _append_layer(dag, _Costs(spec, profile), batch, plan, mode, 0, ())
    return dag


def build_iteration_graph(
    batch: ForwardBatch,
    plan: SplitPlan,
    spec: LayerSpec,
    profile: HardwareProfile,
    mode,
) -> EventDag:
    """All layers, the tail that re-replicates a sharded residual, and non-layer work."""
    mode = BaselineMode.parse(mode)
    _check_plan(plan, mode)
    dag = EventDag()
    if batch.num_tokens == 0:
        return dag
    costs = _Costs(spec, profile)
    tails: tuple = ()
    for layer in range(spec.num_layers):
        tails = _append_layer(dag, costs, batch, plan, mode, layer, tails)
    tokens = batch.num_tokens
    if mode in (BaselineMode.FUSEONLY, BaselineMode.TOKENWEAVE):
        ag = dag.add(OpKind.ALL_GATHER, "whole", Stream.COMM, costs.collective("all_gather", tokens), tails, spec.num_layers)
        tails = (dag.add(OpKind.RMSNORM, "whole", Stream.COMPUTE, costs.rmsnorm(tokens), (ag,), spec.num_layers),)
    dag.add(OpKind.MISC, "whole", Stream.COMPUTE, costs.constant(profile.non_layer_overhead), tails, spec.num_layers)
    return dag


# --------------------------------------------------------------------------
# simulation


def check_acyclic(dag: EventDag) -> None:
    # builders only point backwards, which is acyclic by construction
    if all(0 <= d < node.id for node in dag.nodes for d in node.depends_on):
        return
    graph = {node.id: set(node.depends_on) for node in dag.nodes}
    for node in dag.nodes:
        for dep in node.depends_on:
            if dep not in graph:
                raise ContractError(f"event {node.id} depends on unknown event {dep}")
    try:
        graphlib.TopologicalSorter(graph).prepare()
    except graphlib.CycleError as exc:
        raise ContractError(f"dependency cycle: {exc.args[1]}") from None


def simulate(dag: EventDag, profile: HardwareProfile) -> Timeline:
    """List-schedule the DAG on the two in-order streams.

    A compute kernel's progress is tracked as the fraction of work left; each
    time a communication kernel starts or ends its rate is recomputed from
    the SMs it can use.
    """
    started, finished = _schedule(dag, profile)
    events = tuple(
        StreamEvent(n.id, n.op_kind, n.split, n.stream, started[n.id], finished[n.id], n.depends_on, n.layer)
        for n in dag.nodes
    )
    latency = max((e.end for e in events), default=0.0)
    return Timeline(events, latency)


def makespan(dag: EventDag, profile: HardwareProfile) -> float:
    """Latency of :func:`simulate` without materializing the events."""
    _, finished = _schedule(dag, profile)
    return max(finished.values(), default=0.0)


def _schedule(dag: EventDag, profile: HardwareProfile) -> tuple[dict, dict]:
    check_acyclic(dag)
    queues = {s: [n for n in dag.nodes if n.stream is s] for s in Stream}
    heads = {s: 0 for s in Stream}
    finished: dict[int, float] = {}
    started: dict[int, float] = {}
    full, taxed = profile.num_sms, profile.overlap_sms
    now = 0.0
    comm = None  # (node, end time)
    compute = None  # [node, fraction of work left]

    def ready(node) -> bool:
        return all(d in finished for d in node.depends_on)

    while True:
        if comm is None and heads[Stream.COMM] < len(queues[Stream.COMM]):
            node = queues[Stream.COMM][heads[Stream.COMM]]
            if ready(node):
                heads[Stream.COMM] += 1
                started[node.id] = now
                comm = (node, now + node.cost(profile.collective_sms))
        if compute is None and heads[Stream.COMPUTE] < len(queues[Stream.COMPUTE]):
            node = queues[Stream.COMPUTE][heads[Stream.COMPUTE]]
            if ready(node):
                heads[Stream.COMPUTE] += 1
                started[node.id] = now
                compute = [node, 1.0]
        if comm is None and compute is None:
            if any(heads[s] < len(queues[s]) for s in Stream):
                raise ContractError("stream issue order conflicts with dependencies (deadlock)")
            break

        comp_dur = compute[0].cost(taxed if comm is not None else full) if compute else math.inf
        comp_end = now + compute[1] * comp_dur if compute else math.inf
        comm_end = comm[1] if comm else math.inf
        step_to = min(comp_end, comm_end)
        if compute is not None:
            if comp_end <= comm_end:
                finished[compute[0].id] = comp_end
                compute = None
            else:
                compute[1] -= (step_to - now) / comp_dur
        if comm is not None and comm_end <= step_to:
            finished[comm[0].id] = comm_end
            comm = None
        now = step_to
    return started, finished


# --------------------------------------------------------------------------
# iteration entry points


def resolve_plan(
    batch: ForwardBatch,
    spec: LayerSpec,
    profile: HardwareProfile,
    mode: BaselineMode,
    policy: SplitPolicy,
) -> tuple[BaselineMode, SplitPlan]:
    """Effective mode and split for a batch; overlap mode falls back to the fused kernel alone."""
    lengths = [n for n, _ in batch.chunks]
    total = batch.num_tokens
    if mode is not BaselineMode.TOKENWEAVE:
        plan = SplitPlan(total, total, 0, 0, Mode.NO_SPLIT, tuple(lengths), tuple(lengths))
        return mode, plan
    plan = plan_split(total, policy, profile, spec, lengths)
    if plan.mode is not Mode.OVERLAP or batch.is_decode_only or not plan.is_split:
        plan = SplitPlan(total, total, 0, 0, Mode.FUSED_ONLY, tuple(lengths), tuple(lengths))
        return BaselineMode.FUSEONLY, plan
    return mode, plan


def iteration_timeline(
    batch: ForwardBatch,
    spec: LayerSpec,
    profile: HardwareProfile,
    mode,
    policy: SplitPolicy | None = None,
) -> Timeline:
    mode = BaselineMode.parse(mode)
    policy = policy or SplitPolicy()
    effective, plan = resolve_plan(batch, spec, profile, mode, policy)
    return simulate(build_iteration_graph(batch, plan, spec, profile, effective), profile)


def iteration_latency(
    batch,
    spec: LayerSpec,
    profile: HardwareProfile,
    mode,
    policy: SplitPolicy | None = None,
) -> float:
    """Seconds for one forward pass; ``batch`` may be a token count (single prefill)."""
    if isinstance(batch, int):
        batch = ForwardBatch.prefill(batch)
    mode = BaselineMode.parse(mode)
    effective, plan = resolve_plan(batch, spec, profile, mode, policy or SplitPolicy())
    return makespan(build_iteration_graph(batch, plan, spec, profile, effective), profile)
