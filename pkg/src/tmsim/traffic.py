from __future__ import annotations

import dataclasses
import heapq
import itertools
import logging
import math
from pathlib import Path
from typing import (
    Annotated,
    Callable,
    Iterator,
    Literal,
    NamedTuple,
    Sequence,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from tmsim.core import (
    DEFAULT_MTU,
    CellGeometry,
    PacketDescriptor,
    SimTime,
)
from tmsim.structures import NS_PER_SEC, Duration, Rate, Size

logger = logging.getLogger("TMSIM")

DEFAULT_RTO_NS = 5_000_000
DEFAULT_WINDOW_BYTES = 64 * 1024


class CdfLoadError(Exception): ...


class EmpiricalCdf:
    def __init__(self, sizes: Sequence[int], probs: Sequence[float]) -> None:
        if not sizes or len(sizes) != len(probs):
            raise CdfLoadError("CDF needs matching, non-empty columns")
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.probs = np.asarray(probs, dtype=np.float64)
        if self.sizes[0] < 1:
            raise CdfLoadError(f"flow sizes must be >= 1, got {sizes[0]!r}")
        if np.any(np.diff(self.sizes) <= 0):
            raise CdfLoadError("CDF sizes must be strictly increasing")
        if self.probs[0] <= 0 or np.any(np.diff(self.probs) <= 0):
            raise CdfLoadError("CDF probabilities must be strictly increasing")
        if not math.isclose(self.probs[-1], 1.0, abs_tol=1e-9):
            raise CdfLoadError(
                f"CDF must end at probability 1, got {self.probs[-1]!r}"
            )
        self.probs[-1] = 1.0

    @classmethod
    def load(cls, path: Path) -> EmpiricalCdf:
        sizes: list[int] = []
        probs: list[float] = []
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise CdfLoadError(f"cannot read CDF file {str(path)!r}: {e}")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CdfLoadError(
                    f"{path.name}:{lineno}: expected 'size<TAB>probability'"
                )
            try:
                sizes.append(int(parts[0]))
                probs.append(float(parts[1]))
            except ValueError:
                raise CdfLoadError(f"{path.name}:{lineno}: bad number")
        return cls(sizes, probs)

    def quantile(self, u: float) -> int:
        index = int(np.searchsorted(self.probs, u, side="left"))
        return int(self.sizes[min(index, len(self.sizes) - 1)])

    def sample(
        self, rng: np.random.Generator, size: int | None = None
    ) -> int | np.ndarray:
        u = rng.random(size)
        index = np.searchsorted(self.probs, u, side="left")
        if size is None:
            return int(self.sizes[index])
        return self.sizes[index]

    def mean(self) -> float:
        weights = np.diff(self.probs, prepend=0.0)
        return float(np.dot(self.sizes, weights))


def sample_flow_size(cdf: EmpiricalCdf, rng: np.random.Generator) -> int:
    return int(cdf.sample(rng))


class _GeneratorBase(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str | None = None
    priority_class: int = Field(default=0, ge=0)


class PoissonFlows(_GeneratorBase):
    kind: Literal["poisson_flows"]
    queues: list[int] = Field(min_length=1)
    flows_per_sec: float | None = Field(default=None, gt=0)
    load: float | None = Field(default=None, gt=0)
    cdf_path: str | None = None
    start_ns: Duration = 0
    stop_ns: Duration | None = None
    max_flows: int | None = Field(default=None, ge=1)
    sender_rate_bps: Rate | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _one_rate(self) -> PoissonFlows:
        if (self.flows_per_sec is None) == (self.load is None):
            raise ValueError("give exactly one of flows_per_sec or load")
        return self


class IncastQuery(_GeneratorBase):
    kind: Literal["incast"]
    queue: int
    fan_in: int = Field(ge=1)
    query_size_bytes: Size = Field(gt=0)
    start_ns: Duration = 0
    spacing: Literal["fixed", "poisson"] = "fixed"
    period_ns: Duration | None = Field(default=None, gt=0)
    queries_per_sec: float | None = Field(default=None, gt=0)
    count: int = Field(default=1, ge=1)
    sender_rate_bps: Rate | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _spacing_given(self) -> IncastQuery:
        if self.query_size_bytes < self.fan_in:
            raise ValueError("query_size_bytes must be at least fan_in")
        if self.count > 1:
            if self.spacing == "fixed" and self.period_ns is None:
                raise ValueError("fixed spacing needs period_ns")
            if self.spacing == "poisson" and self.queries_per_sec is None:
                raise ValueError("poisson spacing needs queries_per_sec")
        return self


class LongLived(_GeneratorBase):
    kind: Literal["long_lived"]
    queue: int
    flow_count: int = Field(default=1, ge=1)
    rate_bps: Rate = Field(gt=0)
    packet_bytes: Size | None = Field(default=None, gt=0)
    start_ns: Duration = 0
    stop_ns: Duration | None = None


class RawBurst(_GeneratorBase):
    kind: Literal["raw_burst"]
    queue: int
    start_ns: Duration = 0
    burst_size_bytes: Size = Field(gt=0)
    packet_bytes: Size | None = Field(default=None, gt=0)
    rate_bps: Rate | None = Field(default=None, gt=0)


GeneratorSpec = Annotated[
    Union[PoissonFlows, IncastQuery, LongLived, RawBurst],
    Field(discriminator="kind"),
]


class WorkloadSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    generators: list[GeneratorSpec] = Field(default_factory=list)

    def queue_ids(self) -> set[int]:
        ids: set[int] = set()
        for gen in self.generators:
            if isinstance(gen, PoissonFlows):
                ids.update(gen.queues)
            else:
                ids.add(gen.queue)
        return ids


class Injection(NamedTuple):
    time: SimTime
    queue_id: int
    pd: PacketDescriptor


@dataclasses.dataclass(slots=True)
class FlowState:
    flow_id: int
    total_bytes: int
    queue_id: int
    start_time: SimTime
    window_packets: int
    rto: SimTime = DEFAULT_RTO_NS
    mtu: int = DEFAULT_MTU
    priority_class: int = 0
    sender_rate_bps: int | None = None
    query_id: int | None = None
    tag: str = ""
    sent_bytes: int = 0
    acked_bytes: int = 0
    next_seq: int = 0
    base: int = 0
    next_send_time: SimTime = 0
    rto_deadline: SimTime | None = None
    retransmits: int = 0
    finish_time: SimTime | None = None

    @property
    def n_packets(self) -> int:
        return -(-self.total_bytes // self.mtu)

    @property
    def outstanding(self) -> set[int]:
        return set(range(self.base, self.next_seq))

    @property
    def fct(self) -> SimTime | None:
        if self.finish_time is None:
            return None
        return self.finish_time - self.start_time

    def packet_length(self, seq: int) -> int:
        return min(self.mtu, self.total_bytes - seq * self.mtu)


@dataclasses.dataclass(slots=True)
class QueryState:
    query_id: int
    flow_ids: frozenset[int]
    issue_time: SimTime
    tag: str = ""
    completion_time: SimTime | None = None

    @property
    def qct(self) -> SimTime | None:
        if self.completion_time is None:
            return None
        return self.completion_time - self.issue_time


class FlowStart(NamedTuple):
    time: SimTime
    flows: list[FlowState]
    query: QueryState | None = None


def tx_time_ns(length_bytes: int, rate_bps: int) -> int:
    return -(-length_bytes * 8 * NS_PER_SEC // rate_bps)


def drive_transport(
    flow: FlowState, now: SimTime, geom: CellGeometry
) -> list[Injection]:
    if flow.finish_time is not None:
        return []

    n = flow.n_packets
    if (
        flow.rto_deadline is not None
        and now >= flow.rto_deadline
        and flow.base < n
    ):
        logger.debug(
            f"RTO on flow {flow.flow_id!r}: rewinding to seq {flow.base}"
        )
        flow.next_seq = flow.base
        flow.rto_deadline = None
        flow.retransmits += 1

    injections: list[Injection] = []
    limit = min(n, flow.base + flow.window_packets)
    while flow.next_seq < limit:
        seq = flow.next_seq
        length = flow.packet_length(seq)
        send_at = now
        if flow.sender_rate_bps:
            send_at = max(now, flow.next_send_time)
            flow.next_send_time = send_at + tx_time_ns(
                length, flow.sender_rate_bps
            )
        pd = PacketDescriptor.build(
            flow_id=flow.flow_id,
            length_bytes=length,
            geom=geom,
            arrival_time=send_at,
            priority_class=flow.priority_class,
            seq=seq,
            mtu=flow.mtu,
        )
        injections.append(Injection(send_at, flow.queue_id, pd))
        flow.next_seq += 1
        flow.sent_bytes = max(flow.sent_bytes, seq * flow.mtu + length)
        if flow.rto_deadline is None:
            flow.rto_deadline = send_at + flow.rto
    return injections


def deliver(flow: FlowState, seq: int, now: SimTime) -> bool:
    """Go-back-N receiver: in-order packets advance the window."""
    if flow.finish_time is not None or seq != flow.base:
        return False
    flow.acked_bytes += flow.packet_length(seq)
    flow.base += 1
    if flow.next_seq < flow.base:
        flow.next_seq = flow.base
    if flow.base == flow.n_packets:
        flow.finish_time = now
        flow.rto_deadline = None
    elif flow.next_seq > flow.base:
        flow.rto_deadline = now + flow.rto
    else:
        flow.rto_deadline = None
    return True


def issue_incast(
    spec: IncastQuery,
    now: SimTime,
    query_id: int,
    flow_ids: Iterator[int],
    window_packets: int,
    rto: SimTime = DEFAULT_RTO_NS,
    mtu: int = DEFAULT_MTU,
) -> tuple[QueryState, list[FlowState]]:
    share, extra = divmod(spec.query_size_bytes, spec.fan_in)
    flows = [
        FlowState(
            flow_id=next(flow_ids),
            total_bytes=share + (1 if i < extra else 0),
            queue_id=spec.queue,
            start_time=now,
            window_packets=window_packets,
            rto=rto,
            mtu=mtu,
            priority_class=spec.priority_class,
            sender_rate_bps=spec.sender_rate_bps,
            query_id=query_id,
            tag=spec.name or "incast",
        )
        for i in range(spec.fan_in)
    ]
    query = QueryState(
        query_id=query_id,
        flow_ids=frozenset(f.flow_id for f in flows),
        issue_time=now,
        tag=spec.name or "incast",
    )
    return query, flows


class Transport:
    def __init__(self, geom: CellGeometry) -> None:
        self.geom = geom
        self.flows: dict[int, FlowState] = {}
        self.queries: dict[int, QueryState] = {}
        self._timers: list[tuple[SimTime, int]] = []

    def _arm(self, flow: FlowState) -> None:
        if flow.rto_deadline is not None:
            heapq.heappush(self._timers, (flow.rto_deadline, flow.flow_id))

    def start(
        self, flows: list[FlowState], query: QueryState | None, now: SimTime
    ) -> list[Injection]:
        if query is not None:
            self.queries[query.query_id] = query
        injections: list[Injection] = []
        for flow in flows:
            self.flows[flow.flow_id] = flow
            injections.extend(drive_transport(flow, now, self.geom))
            self._arm(flow)
        return injections

    def on_delivery(
        self, pd: PacketDescriptor, now: SimTime
    ) -> list[Injection]:
        flow = self.flows.get(pd.flow_id)
        if flow is None or not deliver(flow, pd.seq, now):
            return []
        if flow.finish_time is not None:
            self._complete_query(flow)
            return []
        injections = drive_transport(flow, now, self.geom)
        self._arm(flow)
        return injections

    def _complete_query(self, flow: FlowState) -> None:
        if flow.query_id is None:
            return
        query = self.queries[flow.query_id]
        finishes = [self.flows[fid].finish_time for fid in query.flow_ids]
        if all(t is not None for t in finishes):
            query.completion_time = max(t for t in finishes if t is not None)

    def next_deadline(self) -> SimTime | None:
        while self._timers:
            deadline, flow_id = self._timers[0]
            if self.flows[flow_id].rto_deadline == deadline:
                return deadline
            heapq.heappop(self._timers)
        return None

    def fire_timers(self, now: SimTime) -> list[Injection]:
        injections: list[Injection] = []
        while (deadline := self.next_deadline()) is not None and (
            deadline <= now
        ):
            _, flow_id = heapq.heappop(self._timers)
            flow = self.flows[flow_id]
            injections.extend(drive_transport(flow, deadline, self.geom))
            self._arm(flow)
        return injections


@dataclasses.dataclass(slots=True)
class BuildContext:
    geom: CellGeometry
    mtu: int
    duration: SimTime
    seed: int
    window_packets: int
    rto: SimTime
    port_rates: dict[int, int]
    queue_port: dict[int, int]
    flow_ids: Iterator[int] = dataclasses.field(
        default_factory=lambda: itertools.count()
    )
    query_ids: Iterator[int] = dataclasses.field(
        default_factory=lambda: itertools.count()
    )


class OpenLoopFlow(NamedTuple):
    flow_id: int
    tag: str
    queue_id: int
    priority_class: int
    total_bytes: int | None
    start_time: SimTime


Item = Union[Injection, FlowStart]


def _long_lived(
    spec: LongLived, ctx: BuildContext, flow_id: int, offset: int
) -> Iterator[Item]:
    length = spec.packet_bytes or ctx.mtu
    stop = ctx.duration if spec.stop_ns is None else spec.stop_ns
    seq = 0
    while True:
        t = spec.start_ns + offset + seq * length * 8 * NS_PER_SEC // (
            spec.rate_bps
        )
        if t >= stop:
            return
        pd = PacketDescriptor.build(
            flow_id, length, ctx.geom, t, spec.priority_class, seq, ctx.mtu
        )
        yield Injection(t, spec.queue, pd)
        seq += 1


def _raw_burst(
    spec: RawBurst, ctx: BuildContext, flow_id: int
) -> Iterator[Item]:
    length = spec.packet_bytes or ctx.mtu
    n = -(-spec.burst_size_bytes // length)
    sent = 0
    for seq in range(n):
        size = min(length, spec.burst_size_bytes - sent)
        t = spec.start_ns
        if spec.rate_bps:
            t += sent * 8 * NS_PER_SEC // spec.rate_bps
        pd = PacketDescriptor.build(
            flow_id, size, ctx.geom, t, spec.priority_class, seq, ctx.mtu
        )
        yield Injection(t, spec.queue, pd)
        sent += size


def _poisson_flows(
    spec: PoissonFlows,
    ctx: BuildContext,
    rng: np.random.Generator,
    cdf: EmpiricalCdf,
) -> Iterator[Item]:
    rate = spec.flows_per_sec
    if rate is None:
        ports = {ctx.queue_port[q] for q in spec.queues}
        capacity = sum(ctx.port_rates[p] for p in ports)
        rate = (spec.load or 0) * capacity / (8 * cdf.mean())
    stop = ctx.duration if spec.stop_ns is None else spec.stop_ns
    t = float(spec.start_ns)
    issued = 0
    while spec.max_flows is None or issued < spec.max_flows:
        t += rng.exponential(NS_PER_SEC / rate)
        if t >= stop:
            return
        now = int(t)
        flow = FlowState(
            flow_id=next(ctx.flow_ids),
            total_bytes=sample_flow_size(cdf, rng),
            queue_id=int(rng.choice(spec.queues)),
            start_time=now,
            window_packets=ctx.window_packets,
            rto=ctx.rto,
            mtu=ctx.mtu,
            priority_class=spec.priority_class,
            sender_rate_bps=spec.sender_rate_bps,
            tag=spec.name or "poisson",
        )
        issued += 1
        yield FlowStart(now, [flow])


def _incast(
    spec: IncastQuery, ctx: BuildContext, rng: np.random.Generator
) -> Iterator[Item]:
    t = spec.start_ns
    for i in range(spec.count):
        if i:
            if spec.spacing == "fixed":
                t += spec.period_ns or 0
            else:
                gap = rng.exponential(NS_PER_SEC / (spec.queries_per_sec or 1))
                t += int(gap)
        if t >= ctx.duration:
            return
        query, flows = issue_incast(
            spec,
            t,
            next(ctx.query_ids),
            ctx.flow_ids,
            ctx.window_packets,
            ctx.rto,
            ctx.mtu,
        )
        yield FlowStart(t, flows, query)


def build_sources(
    workload: WorkloadSpec,
    ctx: BuildContext,
    cdf_loader: Callable[[str | None], EmpiricalCdf],
) -> tuple[list[Iterator[Item]], list[OpenLoopFlow]]:
    """Lazily ordered arrival sources plus the open-loop flows they feed."""
    sources: list[Iterator[Item]] = []
    open_loop: list[OpenLoopFlow] = []
    for index, gen in enumerate(workload.generators):
        rng = np.random.default_rng([ctx.seed, index])
        match gen:
            case LongLived():
                length = gen.packet_bytes or ctx.mtu
                interval = length * 8 * NS_PER_SEC // gen.rate_bps
                for f in range(gen.flow_count):
                    flow_id = next(ctx.flow_ids)
                    open_loop.append(
                        OpenLoopFlow(
                            flow_id,
                            gen.name or "long_lived",
                            gen.queue,
                            gen.priority_class,
                            None,
                            gen.start_ns,
                        )
                    )
                    offset = f * interval // gen.flow_count
                    sources.append(_long_lived(gen, ctx, flow_id, offset))
            case RawBurst():
                flow_id = next(ctx.flow_ids)
                open_loop.append(
                    OpenLoopFlow(
                        flow_id,
                        gen.name or "raw_burst",
                        gen.queue,
                        gen.priority_class,
                        gen.burst_size_bytes,
                        gen.start_ns,
                    )
                )
                sources.append(_raw_burst(gen, ctx, flow_id))
            case PoissonFlows():
                sources.append(
                    _poisson_flows(gen, ctx, rng, cdf_loader(gen.cdf_path))
                )
            case IncastQuery():
                sources.append(_incast(gen, ctx, rng))
    return sources, open_loop
