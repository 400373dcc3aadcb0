from __future__ import annotations

import collections
import dataclasses
import logging
import math
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd
from sortedcontainers import SortedList

from tmsim.core import SharedBufferState, SimTime
from tmsim.engine import (
    Engine,
    EngineConfig,
    EventKind,
    EventRecord,
    FlowRecord,
)
from tmsim.expulsion import TokenBucket, TokenSource
from tmsim.structures import NS_PER_SEC
from tmsim.traffic import QueryState, RawBurst, WorkloadSpec

logger = logging.getLogger("TMSIM")

UTILIZATION_WINDOW_NS = 1_000

DROP_KINDS = frozenset(
    {EventKind.TAIL_DROP, EventKind.HEAD_DROP, EventKind.PUSHOUT_EXPEL}
)
_LEAVE_KINDS = frozenset(
    {EventKind.DEQUEUE_START, EventKind.HEAD_DROP, EventKind.PUSHOUT_EXPEL}
)


class StreamOrderError(Exception): ...


class SlowdownError(Exception): ...


@dataclasses.dataclass(slots=True)
class QueueSummary:
    queue_id: int
    arrivals: int = 0
    admits: int = 0
    deliveries: int = 0
    tail_drops: int = 0
    head_drops: int = 0
    pushout_expels: int = 0
    max_cells: int = 0
    mean_cells: float = 0.0
    residual: int = 0
    residual_cells: int = 0


@dataclasses.dataclass(slots=True)
class RunSummary:
    duration_ns: SimTime
    buffer_cells: int
    queues: dict[int, QueueSummary]
    fct_ns: list[int] = dataclasses.field(default_factory=list)
    qct_ns: list[int] = dataclasses.field(default_factory=list)
    drops_by_class: dict[int, dict[str, int]] = dataclasses.field(
        default_factory=dict
    )
    buffer_utilization_at_drop: list[float] = dataclasses.field(
        default_factory=list
    )
    bandwidth_utilization_at_drop: list[float] = dataclasses.field(
        default_factory=list
    )
    head_dropped_cells: int = 0
    expulsion_rate_cells_per_sec: float = 0.0

    @property
    def tail_drops(self) -> int:
        return sum(q.tail_drops for q in self.queues.values())

    @property
    def head_drops(self) -> int:
        return sum(
            q.head_drops + q.pushout_expels for q in self.queues.values()
        )

    def counting_identity_holds(self) -> bool:
        return all(
            q.admits == q.deliveries + q.head_drops + q.pushout_expels
            + q.residual
            for q in self.queues.values()
        )

    def expulsion_budget_cells_per_sec(self, bucket: TokenBucket) -> float:
        """Token generation minus TX consumption over the run. A TX debt
        still open when the run stops has not been paid yet."""
        owed = max(0, -bucket.tokens)
        spare = bucket.generated - bucket.tx_withdrawn + owed
        return spare * NS_PER_SEC / self.duration_ns

    def expulsion_within_budget(self, bucket: TokenBucket) -> bool:
        return (
            self.expulsion_rate_cells_per_sec
            <= self.expulsion_budget_cells_per_sec(bucket)
        )

    def scalars(self) -> dict[str, float | int | None]:
        rows: dict[str, float | int | None] = {
            "duration_ns": self.duration_ns,
            "buffer_cells": self.buffer_cells,
            "flows_completed": len(self.fct_ns),
            "queries_completed": len(self.qct_ns),
            "tail_drops": self.tail_drops,
            "head_drops": self.head_drops,
            "head_dropped_cells": self.head_dropped_cells,
            "expulsion_rate_cells_per_sec": self.expulsion_rate_cells_per_sec,
        }
        for name, values in (
            ("fct_ns", self.fct_ns),
            ("qct_ns", self.qct_ns),
            ("buffer_utilization_at_drop", self.buffer_utilization_at_drop),
            (
                "bandwidth_utilization_at_drop",
                self.bandwidth_utilization_at_drop,
            ),
        ):
            for p in (50, 99):
                rows[f"{name}_p{p}"] = percentile(values, p) if values else None
        for q in self.queues.values():
            rows[f"q{q.queue_id}_max_cells"] = q.max_cells
            rows[f"q{q.queue_id}_mean_cells"] = round(q.mean_cells, 3)
            rows[f"q{q.queue_id}_tail_drops"] = q.tail_drops
            rows[f"q{q.queue_id}_head_drops"] = q.head_drops
        return rows


def percentile(values: Sequence[float], p: float) -> float:
    if not len(values):
        raise ValueError("percentile of an empty list")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must lie in [0, 100], got {p!r}")
    return float(np.percentile(values, p, method="inverted_cdf"))


def slowdown(actual: float, ideal: float) -> float:
    if ideal <= 0:
        raise SlowdownError(f"ideal duration must be positive, got {ideal!r}")
    return actual / ideal


def _checked(events: Iterable[EventRecord]) -> Iterable[EventRecord]:
    last = -1
    for ev in events:
        if ev.time < last:
            raise StreamOrderError(
                f"event at {ev.time}ns follows one at {last}ns: {ev!r}"
            )
        last = ev.time
        yield ev


def _delta(ev: EventRecord) -> int:
    if ev.kind == EventKind.ADMIT:
        return ev.length_cells
    if ev.kind in _LEAVE_KINDS:
        return -ev.length_cells
    return 0


def summarize(
    events: Iterable[EventRecord],
    config: EngineConfig,
    flows: Sequence[FlowRecord] | None = None,
    queries: Sequence[QueryState] | None = None,
    buffer: SharedBufferState | None = None,
) -> RunSummary:
    """Aggregate a run. With the final buffer the resident packets come from
    the queues themselves, otherwise they are derived from the stream."""
    B = config.buffer_cells
    duration = config.sim_duration
    slot_ns = config.slot_ns
    window_cells = max(1, UTILIZATION_WINDOW_NS // slot_ns)
    flow_class = {f.flow_id: f.priority_class for f in flows or ()}

    queues = {qid: QueueSummary(qid) for qid in config.queue_ids}
    occupancy = dict.fromkeys(queues, 0)
    resident = dict.fromkeys(queues, 0)
    area = dict.fromkeys(queues, 0)
    since = dict.fromkeys(queues, 0)
    occupied = 0
    cell_bits = config.geometry.cell_size_bytes * 8 * NS_PER_SEC
    cell_ns = {
        qid: cell_bits / config.port_rates[port]
        for qid, port in config.queue_port.items()
    }
    reads = SortedList()
    summary = RunSummary(duration_ns=duration, buffer_cells=B, queues=queues)

    for ev in _checked(events):
        q = queues[ev.queue_id]
        if ev.kind in DROP_KINDS:
            cls = flow_class.get(ev.flow_id, 0)
            bucket = summary.drops_by_class.setdefault(
                cls, {"tail": 0, "head": 0}
            )
            bucket["tail" if ev.kind == EventKind.TAIL_DROP else "head"] += 1

            del reads[: reads.bisect_right(ev.time - UTILIZATION_WINDOW_NS)]
            if ev.kind != EventKind.PUSHOUT_EXPEL:
                read_cells = reads.bisect_right(ev.time)
                summary.buffer_utilization_at_drop.append(occupied / B)
                summary.bandwidth_utilization_at_drop.append(
                    min(1.0, read_cells / window_cells)
                )

        match ev.kind:
            case EventKind.ARRIVAL:
                q.arrivals += 1
            case EventKind.ADMIT:
                q.admits += 1
            case EventKind.TAIL_DROP:
                q.tail_drops += 1
            case EventKind.HEAD_DROP:
                q.head_drops += 1
                summary.head_dropped_cells += ev.length_cells
            case EventKind.PUSHOUT_EXPEL:
                q.pushout_expels += 1
            case EventKind.DEQUEUE_START:
                q.deliveries += 1
                # Cell k is read k cell times after serialization starts.
                step = cell_ns[ev.queue_id]
                del reads[: reads.bisect_right(ev.time - UTILIZATION_WINDOW_NS)]
                reads.update(ev.time + k * step for k in range(ev.length_cells))

        if ev.kind == EventKind.ADMIT:
            resident[ev.queue_id] += 1
        elif ev.kind in _LEAVE_KINDS:
            resident[ev.queue_id] -= 1

        delta = _delta(ev)
        if delta:
            qid = ev.queue_id
            area[qid] += occupancy[qid] * (ev.time - since[qid])
            since[qid] = ev.time
            occupancy[qid] += delta
            occupied += delta
            q.max_cells = max(q.max_cells, occupancy[qid])

    for qid, q in queues.items():
        end = max(duration, since[qid])
        area[qid] += occupancy[qid] * (end - since[qid])
        q.mean_cells = area[qid] / end if end else 0.0
        q.residual = resident[qid]
        q.residual_cells = occupancy[qid]
        if buffer is not None:
            q.residual = len(buffer[qid].fifo)
            q.residual_cells = buffer[qid].occupancy_cells

    summary.expulsion_rate_cells_per_sec = (
        summary.head_dropped_cells * NS_PER_SEC / duration
    )
    summary.fct_ns = [f.fct for f in flows or () if f.fct is not None]
    summary.qct_ns = [q.qct for q in queries or () if q.qct is not None]
    return summary


def queue_length_trace(
    events: Iterable[EventRecord], config: EngineConfig
) -> pd.DataFrame:
    occupancy = dict.fromkeys(config.queue_ids, 0)
    rows: list[tuple[int, int, int]] = []
    for ev in _checked(events):
        delta = _delta(ev)
        if delta:
            occupancy[ev.queue_id] += delta
            rows.append((ev.time, ev.queue_id, occupancy[ev.queue_id]))
    return pd.DataFrame(
        rows, columns=["time_ns", "queue_id", "occupancy_cells"]
    )


def occupancy_average(
    events: Iterable[EventRecord],
    config: EngineConfig,
    start: SimTime,
    end: SimTime,
) -> dict[int, float]:
    """Time-averaged occupancy of each queue over [start, end)."""
    if end <= start:
        raise ValueError(f"empty averaging window [{start}, {end})")
    occupancy = dict.fromkeys(config.queue_ids, 0)
    area = dict.fromkeys(config.queue_ids, 0)
    since = dict.fromkeys(config.queue_ids, start)
    for ev in _checked(events):
        if ev.time >= end:
            break
        delta = _delta(ev)
        if not delta:
            continue
        qid = ev.queue_id
        if ev.time > start:
            area[qid] += occupancy[qid] * (ev.time - since[qid])
            since[qid] = ev.time
        occupancy[qid] += delta
    return {
        qid: (area[qid] + occupancy[qid] * (end - since[qid])) / (end - start)
        for qid in occupancy
    }


class DropSnapshot(NamedTuple):
    event: EventRecord
    occupancy: dict[int, int]
    free_cells: int


def first_drop_snapshot(
    events: Iterable[EventRecord],
    config: EngineConfig,
    flow_ids: Iterable[int] | None = None,
    kinds: frozenset[EventKind] = DROP_KINDS,
) -> DropSnapshot | None:
    wanted = None if flow_ids is None else set(flow_ids)
    occupancy = dict.fromkeys(config.queue_ids, 0)
    for ev in _checked(events):
        if ev.kind in kinds and (wanted is None or ev.flow_id in wanted):
            free = config.buffer_cells - sum(occupancy.values())
            return DropSnapshot(ev, dict(occupancy), free)
        occupancy[ev.queue_id] += _delta(ev)
    return None


def drop_audit_pushout(
    events: Iterable[EventRecord], config: EngineConfig
) -> list[EventRecord]:
    """TailDrops that happened although the packet would have fit."""
    free = config.buffer_cells
    violations: list[EventRecord] = []
    for ev in _checked(events):
        if ev.kind == EventKind.TAIL_DROP and free >= ev.length_cells:
            violations.append(ev)
        free -= _delta(ev)
    return violations


def audit_token_ledger(bucket: TokenBucket) -> list[str]:
    problems: list[str] = []
    if bucket.expulsion_withdrawn > bucket.generated:
        problems.append(
            f"expelled {bucket.expulsion_withdrawn} cells with only "
            f"{bucket.generated} tokens generated"
        )
    if bucket.ledger is None:
        return problems
    for entry in bucket.ledger:
        if entry.source == TokenSource.EXPULSION and entry.before < entry.cells:
            problems.append(f"expulsion overdrew tokens: {entry!r}")
        if entry.after < 0 and entry.source != TokenSource.TX:
            problems.append(f"negative level not caused by TX: {entry!r}")
    return problems


def _with_burst(
    workload: WorkloadSpec, burst_name: str, size_bytes: int
) -> WorkloadSpec:
    generators = [
        gen.model_copy(update={"burst_size_bytes": size_bytes})
        if isinstance(gen, RawBurst) and gen.name == burst_name
        else gen
        for gen in workload.generators
    ]
    return workload.model_copy(update={"generators": generators})


def _burst_dropped(
    config: EngineConfig, workload: WorkloadSpec, burst_name: str
) -> bool:
    engine = Engine(config, workload)
    events = list(engine.run())
    burst_flows = {f.flow_id for f in engine.flows if f.tag == burst_name}
    return any(
        ev.kind in DROP_KINDS and ev.flow_id in burst_flows for ev in events
    )


def burst_absorption_capacity(
    config: EngineConfig,
    workload: WorkloadSpec,
    burst_name: str,
    max_packets: int | None = None,
) -> int:
    """Largest burst, in bytes, whose packets all survive."""
    matches = [
        gen
        for gen in workload.generators
        if isinstance(gen, RawBurst) and gen.name == burst_name
    ]
    if len(matches) != 1:
        raise ValueError(f"expected one raw_burst named {burst_name!r}")
    packet = matches[0].packet_bytes or config.mtu
    if max_packets is None:
        buffer_bytes = config.buffer_cells * config.geometry.cell_size_bytes
        max_packets = 4 * math.ceil(buffer_bytes / packet)

    def drops(n: int) -> bool:
        return _burst_dropped(
            config, _with_burst(workload, burst_name, n * packet), burst_name
        )

    if drops(1):
        return 0
    good, bad = 1, 2
    while bad <= max_packets and not drops(bad):
        good, bad = bad, bad * 2
    if bad > max_packets:
        logger.warning(
            f"burst {burst_name!r} never dropped up to {max_packets} packets"
        )
        return max_packets * packet
    while bad - good > 1:
        mid = (good + bad) // 2
        if drops(mid):
            bad = mid
        else:
            good = mid
    return good * packet


def flows_frame(flows: Sequence[FlowRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (f.flow_id, f.priority_class, f.total_bytes, f.fct)
            for f in flows
        ],
        columns=["flow_id", "class", "bytes", "fct_ns"],
    )


def queries_frame(queries: Sequence[QueryState]) -> pd.DataFrame:
    return pd.DataFrame(
        [(q.query_id, q.qct) for q in queries],
        columns=["query_id", "qct_ns"],
    )


def summary_frame(summary: RunSummary) -> pd.DataFrame:
    return pd.DataFrame(
        list(summary.scalars().items()), columns=["metric", "value"]
    )


def qct_by_tag(queries: Sequence[QueryState]) -> Mapping[str, list[int]]:
    out: dict[str, list[int]] = collections.defaultdict(list)
    for q in queries:
        if q.qct is not None:
            out[q.tag].append(q.qct)
    return dict(out)
