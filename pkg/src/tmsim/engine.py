from __future__ import annotations

import dataclasses
import functools
import itertools
import logging
from enum import StrEnum
from pathlib import Path
from typing import Iterator, NamedTuple

from sortedcontainers import SortedList

from tmsim.admission import AdmissionPolicy, Decision, admit
from tmsim.core import (
    DEFAULT_MTU,
    CellGeometry,
    PacketDescriptor,
    PortSpec,
    QueueState,
    SharedBufferState,
    SimTime,
    dequeue_head,
    enqueue,
)
from tmsim.expulsion import (
    ArbiterRequest,
    ArbiterSource,
    Grant,
    OverAllocationBitmap,
    PipelineCounters,
    RoundRobinPointer,
    TokenBucket,
    TokenSource,
    arbitrate,
    head_drop,
    refill_tokens,
    refresh_bitmap,
    rr_next,
    withdraw_tokens,
)
from tmsim.scheduling import SchedulerState, pick_next
from tmsim.structures import NS_PER_SEC, Registry
from tmsim.traffic import (
    DEFAULT_RTO_NS,
    DEFAULT_WINDOW_BYTES,
    BuildContext,
    EmpiricalCdf,
    FlowStart,
    Injection,
    Item,
    OpenLoopFlow,
    QueryState,
    Transport,
    WorkloadSpec,
    build_sources,
)

logger = logging.getLogger("TMSIM")


class EngineConfigError(Exception): ...


class EventKind(StrEnum):
    ARRIVAL = "Arrival"
    ADMIT = "Admit"
    TAIL_DROP = "TailDrop"
    HEAD_DROP = "HeadDrop"
    DEQUEUE_START = "DequeueStart"
    DEQUEUE_COMPLETE = "DequeueComplete"
    PUSHOUT_EXPEL = "PushoutExpel"


class EventRecord(NamedTuple):
    time: SimTime
    kind: EventKind
    queue_id: int
    flow_id: int
    length_cells: int

    def to_line(self) -> str:
        return (
            f"{self.time}\t{self.kind}\t{self.queue_id}\t{self.flow_id}\t"
            f"{self.length_cells}"
        )

    @classmethod
    def from_line(cls, line: str) -> EventRecord:
        time, kind, queue_id, flow_id, cells = line.rstrip("\n").split("\t")
        return cls(
            int(time), EventKind(kind), int(queue_id), int(flow_id), int(cells)
        )


class FlowRecord(NamedTuple):
    flow_id: int
    tag: str
    priority_class: int
    queue_id: int
    total_bytes: int | None
    start_time: SimTime
    finish_time: SimTime | None
    query_id: int | None = None

    @property
    def fct(self) -> SimTime | None:
        if self.finish_time is None:
            return None
        return self.finish_time - self.start_time


@dataclasses.dataclass(slots=True)
class EngineConfig:
    ports: list[PortSpec]
    buffer_cells: int
    policy: AdmissionPolicy
    sim_duration: SimTime
    geometry: CellGeometry = dataclasses.field(default_factory=CellGeometry)
    expulsion_enabled: bool = False
    random_seed: int = 0
    aggregate_bps: int | None = None
    token_interval: SimTime | None = None
    burst_cap: int | None = None
    max_head_drops_per_slot: int = 1
    mtu: int = DEFAULT_MTU
    rto: SimTime = DEFAULT_RTO_NS
    window_bytes: int = DEFAULT_WINDOW_BYTES
    cdf_path: str | None = None
    debug_checks: bool = False

    def __post_init__(self) -> None:
        if not self.ports:
            raise EngineConfigError("at least one port is required")
        if self.sim_duration <= 0:
            raise EngineConfigError(
                f"sim_duration must be positive, got {self.sim_duration!r}"
            )
        if self.buffer_cells <= 0:
            raise EngineConfigError(
                f"buffer must hold at least one cell, got {self.buffer_cells!r}"
            )
        seen: set[int] = set()
        for port in self.ports:
            if port.line_rate_bits_per_sec <= 0:
                raise EngineConfigError(
                    f"port {port.port_id!r} has non-positive line rate"
                )
            if not port.queue_ids:
                raise EngineConfigError(f"port {port.port_id!r} has no queues")
            for qid in port.queue_ids:
                if qid in seen:
                    raise EngineConfigError(
                        f"queue {qid!r} is bound to more than one port"
                    )
                seen.add(qid)
        if seen != set(range(len(seen))):
            raise EngineConfigError(
                f"queue ids must be contiguous from 0, got {sorted(seen)!r}"
            )
        if self.aggregate_bps is not None and (
            self.aggregate_bps < sum(self.port_rates.values())
        ):
            raise EngineConfigError(
                "aggregate capacity is below the sum of port line rates"
            )
        if self.max_head_drops_per_slot < 1:
            raise EngineConfigError("max_head_drops_per_slot must be >= 1")
        if self.geometry.cells_for(self.mtu) > self.buffer_cells:
            raise EngineConfigError("buffer is smaller than one MTU packet")

    @property
    def port_rates(self) -> dict[int, int]:
        return {p.port_id: p.line_rate_bits_per_sec for p in self.ports}

    @property
    def queue_port(self) -> dict[int, int]:
        return {qid: p.port_id for p in self.ports for qid in p.queue_ids}

    @property
    def queue_ids(self) -> list[int]:
        return sorted(self.queue_port)

    @property
    def aggregate_capacity(self) -> int:
        return self.aggregate_bps or sum(self.port_rates.values())

    @property
    def slot_ns(self) -> SimTime:
        slot = round(
            self.geometry.cell_size_bytes
            * 8
            * NS_PER_SEC
            / self.aggregate_capacity
        )
        return max(1, slot)

    @property
    def effective_token_interval(self) -> SimTime:
        return self.token_interval or self.slot_ns

    @property
    def effective_burst_cap(self) -> int:
        if self.burst_cap is not None:
            return self.burst_cap
        return max(len(self.ports), self.geometry.cells_for(self.mtu))

    @property
    def window_packets(self) -> int:
        return max(1, self.window_bytes // self.mtu)


# Port credit accrues as line rate (bps) times elapsed ns, so one byte is
# BYTE_UNITS and every port rate stays exact in integers.
BYTE_UNITS = 8 * NS_PER_SEC


@dataclasses.dataclass(slots=True)
class Transmission:
    queue_id: int
    pd: PacketDescriptor
    sent: int = 0
    charged_cells: int = 0


@dataclasses.dataclass(slots=True)
class PortRuntime:
    spec: PortSpec
    sched: SchedulerState
    credit_per_slot: int
    credit: int = 0
    tx: Transmission | None = None


@functools.cache
def _load_cdf(path: str) -> EmpiricalCdf:
    return EmpiricalCdf.load(Path(path))


class Engine:
    """Slot-clocked traffic manager over one shared buffer.

    Each slot refills tokens, admits the arrivals that landed in it,
    serializes bytes on every port, then lets the head-drop selector use the
    memory port if the output scheduler left it idle.
    """

    def __init__(
        self,
        config: EngineConfig,
        workload: WorkloadSpec,
        token_ledger: bool = False,
    ) -> None:
        unknown = workload.queue_ids() - set(config.queue_ids)
        if unknown:
            raise EngineConfigError(
                f"workload targets unknown queues {sorted(unknown)!r}"
            )

        self.config = config
        self.workload = workload
        self.slot_ns = config.slot_ns
        self.now: SimTime = 0

        policy = config.policy
        self.buffer = SharedBufferState(
            config.buffer_cells,
            [
                QueueState(qid, port, alpha=policy.alpha_for(qid))
                for qid, port in config.queue_port.items()
            ],
        )
        self.bucket = TokenBucket(
            token_interval=config.effective_token_interval,
            burst_cap=config.effective_burst_cap,
            ledger=[] if token_ledger else None,
        )
        self.rr_pointer = RoundRobinPointer()
        self.pipeline = PipelineCounters()
        self.ports = [
            PortRuntime(
                spec=port,
                sched=SchedulerState.for_port(port),
                credit_per_slot=port.line_rate_bits_per_sec * self.slot_ns,
            )
            for port in config.ports
        ]

        self.transport = Transport(config.geometry)
        ctx = BuildContext(
            geom=config.geometry,
            mtu=config.mtu,
            duration=config.sim_duration,
            seed=config.random_seed,
            window_packets=config.window_packets,
            rto=config.rto,
            port_rates=config.port_rates,
            queue_port=config.queue_port,
        )
        self.sources, open_loop = build_sources(workload, ctx, self._cdf)
        self.open_loop: dict[int, OpenLoopFlow] = {
            f.flow_id: f for f in open_loop
        }
        self.open_loop_delivered: dict[int, int] = dict.fromkeys(
            self.open_loop, 0
        )
        self.open_loop_finish: dict[int, SimTime] = {}

        self._order = itertools.count()
        self._pending: SortedList = SortedList()
        for index, source in enumerate(self.sources):
            self._pull(index)

        self._out: list[EventRecord] = []
        self.slots_run = 0
        self.scheduler_slots = 0
        self.expulsions_denied = 0
        self.finished = False

    def _cdf(self, path: str | None) -> EmpiricalCdf:
        registry = Registry()
        path = path or self.config.cdf_path
        resolved = (
            registry.default_cdf
            if path is None
            else registry.resolve_resource(path)
        )
        return _load_cdf(str(resolved))

    def _pull(self, source_index: int) -> None:
        item = next(self.sources[source_index], None)
        if item is not None:
            self._push(item.time, item, source_index)

    def _push(self, time: SimTime, item: Item, source_index: int = -1) -> None:
        self._pending.add((time, next(self._order), source_index, item))

    def _emit(
        self,
        time: SimTime,
        kind: EventKind,
        queue_id: int,
        pd: PacketDescriptor,
    ) -> None:
        self._out.append(
            EventRecord(time, kind, queue_id, pd.flow_id, pd.length_cells)
        )

    @property
    def flows(self) -> list[FlowRecord]:
        records = [
            FlowRecord(
                f.flow_id,
                f.tag,
                f.priority_class,
                f.queue_id,
                f.total_bytes,
                f.start_time,
                self.open_loop_finish.get(f.flow_id),
            )
            for f in self.open_loop.values()
        ]
        records.extend(
            FlowRecord(
                f.flow_id,
                f.tag,
                f.priority_class,
                f.queue_id,
                f.total_bytes,
                f.start_time,
                f.finish_time,
                f.query_id,
            )
            for f in self.transport.flows.values()
        )
        return sorted(records)

    @property
    def queries(self) -> list[QueryState]:
        queries = self.transport.queries
        return [queries[k] for k in sorted(queries)]

    def run(self) -> Iterator[EventRecord]:
        config = self.config
        logger.debug(
            f"engine start: B={config.buffer_cells} cells, "
            f"slot={self.slot_ns}ns, policy={config.policy.label!r}, "
            f"expulsion={config.expulsion_enabled}"
        )
        slot = 0
        while (t := slot * self.slot_ns) < config.sim_duration:
            yield from self.step_slot(t)
            if config.debug_checks:
                self.buffer.check_conservation()

            slot += 1
            if self._idle():
                upcoming = self._next_wakeup()
                if upcoming is None:
                    break
                slot = max(slot, -(-upcoming // self.slot_ns))

        self.now = min(slot * self.slot_ns, config.sim_duration)
        self.buffer.check_conservation()
        self.buffer.check_no_leak()
        self.finished = True
        logger.debug(
            f"engine done at {self.now}ns after {self.slots_run} slots, "
            f"tokens generated={self.bucket.generated} "
            f"expelled={self.bucket.expulsion_withdrawn}"
        )

    def _idle(self) -> bool:
        return self.buffer.free_cells == self.buffer.capacity_cells and all(
            p.tx is None for p in self.ports
        )

    def _next_wakeup(self) -> SimTime | None:
        candidates = [self._pending[0][0]] if self._pending else []
        deadline = self.transport.next_deadline()
        if deadline is not None:
            candidates.append(deadline)
        return min(candidates, default=None)

    def step_slot(self, t: SimTime) -> list[EventRecord]:
        self._out = []
        self.now = t
        self.slots_run += 1
        refill_tokens(self.bucket, t)
        self._admit_arrivals(t)
        tx_cells = self._transmit(t)
        if self.config.expulsion_enabled:
            self._expel(t, tx_cells)
        return self._out

    def _admit_arrivals(self, t: SimTime) -> None:
        for inj in self.transport.fire_timers(t):
            self._push(inj.time, inj)

        while self._pending and self._pending[0][0] <= t:
            _, _, source_index, item = self._pending.pop(0)
            if source_index >= 0:
                self._pull(source_index)
            match item:
                case FlowStart(time=time, flows=flows, query=query):
                    for inj in self.transport.start(flows, query, time):
                        self._push(inj.time, inj)
                case Injection():
                    self._admit(item)

    def _admit(self, inj: Injection) -> None:
        buf = self.buffer
        q = buf[inj.queue_id]
        pd = inj.pd
        self._emit(inj.time, EventKind.ARRIVAL, q.queue_id, pd)

        verdict = admit(self.config.policy, q, pd, buf)
        match verdict.decision:
            case Decision.ACCEPT:
                enqueue(q, pd, buf)
                self._emit(inj.time, EventKind.ADMIT, q.queue_id, pd)
            case Decision.TAIL_DROP:
                q.stats.tail_dropped += 1
                self._emit(inj.time, EventKind.TAIL_DROP, q.queue_id, pd)
            case Decision.ACCEPT_AFTER_PUSHOUT:
                for victim in verdict.pushout_plan:
                    expelled = head_drop(buf[victim], buf)
                    self.pipeline.charge(transmitted=False)
                    self._emit(
                        inj.time, EventKind.PUSHOUT_EXPEL, victim, expelled
                    )
                enqueue(q, pd, buf)
                self._emit(inj.time, EventKind.ADMIT, q.queue_id, pd)

    def _transmit(self, t: SimTime) -> int:
        """Serialize one slot of bytes per port, returning TX cells charged."""
        cell_units = self.config.geometry.cell_size_bytes * BYTE_UNITS
        charged = 0
        for port in self.ports:
            port.credit += port.credit_per_slot
            while True:
                if port.tx is None:
                    qid = pick_next(port.spec, port.sched, self.buffer.queues)
                    if qid is None:
                        port.credit = 0
                        break
                    pd = dequeue_head(self.buffer[qid], self.buffer)
                    self.pipeline.charge(transmitted=True)
                    self._emit(t, EventKind.DEQUEUE_START, qid, pd)
                    port.tx = Transmission(qid, pd)

                tx = port.tx
                remaining = tx.pd.length_bytes * BYTE_UNITS - tx.sent
                done = port.credit >= remaining
                step = remaining if done else port.credit
                tx.sent += step
                port.credit -= step

                cells = -(-tx.sent // cell_units)
                if cells > tx.charged_cells:
                    withdraw_tokens(
                        self.bucket, cells - tx.charged_cells, TokenSource.TX, t
                    )
                    charged += cells - tx.charged_cells
                    tx.charged_cells = cells

                if not done:
                    break
                self._emit(t, EventKind.DEQUEUE_COMPLETE, tx.queue_id, tx.pd)
                port.tx = None
                self._deliver(tx.pd, t)
        if charged:
            self.scheduler_slots += 1
        return charged

    def _deliver(self, pd: PacketDescriptor, t: SimTime) -> None:
        flow = self.open_loop.get(pd.flow_id)
        if flow is None:
            for inj in self.transport.on_delivery(pd, t):
                self._push(inj.time, inj)
            return
        delivered = self.open_loop_delivered[pd.flow_id] + pd.length_bytes
        self.open_loop_delivered[pd.flow_id] = delivered
        if flow.total_bytes is not None and delivered >= flow.total_bytes:
            self.open_loop_finish.setdefault(pd.flow_id, t)

    def _expel(self, t: SimTime, tx_cells: int) -> None:
        sched_req = (
            ArbiterRequest(ArbiterSource.OUTPUT_SCHEDULER, -1)
            if tx_cells
            else None
        )
        for _ in range(self.config.max_head_drops_per_slot):
            bitmap: OverAllocationBitmap = refresh_bitmap(
                self.buffer, self.config.policy
            )
            if not bitmap:
                return
            # The pointer only advances on a granted drop.
            candidate = RoundRobinPointer(self.rr_pointer.last_granted)
            victim = rr_next(bitmap, candidate)
            if victim is None:
                return
            q = self.buffer[victim]
            head = q.head
            if head is None:
                logger.warning(f"stale victim {victim!r}: queue is empty")
                return
            drop_req = ArbiterRequest(ArbiterSource.HEAD_DROP_SELECTOR, victim)
            grant = arbitrate(
                sched_req, drop_req, self.bucket, head.length_cells
            )
            if grant != Grant.GRANT_HEAD_DROP:
                if grant == Grant.IDLE:
                    self.expulsions_denied += 1
                return
            withdraw_tokens(
                self.bucket, head.length_cells, TokenSource.EXPULSION, t
            )
            self.rr_pointer.last_granted = candidate.last_granted
            pd = head_drop(q, self.buffer)
            self.pipeline.charge(transmitted=False)
            self._emit(t, EventKind.HEAD_DROP, victim, pd)


def run(
    config: EngineConfig, workload: WorkloadSpec
) -> Iterator[EventRecord]:
    return Engine(config, workload).run()
