from __future__ import annotations

import dataclasses
import logging
from collections import deque
from enum import StrEnum
from fractions import Fraction
from types import MappingProxyType
from typing import Iterator, Mapping, NamedTuple

logger = logging.getLogger("TMSIM")

# Integer nanoseconds; never decreases within a run.
SimTime = int

DEFAULT_CELL_SIZE = 200
DEFAULT_MTU = 1500


class InvalidPacketError(Exception): ...


class NoPacketError(Exception): ...


class BufferOverCommitError(Exception): ...


class ConservationError(Exception): ...


@dataclasses.dataclass(frozen=True, slots=True)
class CellGeometry:
    cell_size_bytes: int = DEFAULT_CELL_SIZE

    def __post_init__(self) -> None:
        if self.cell_size_bytes <= 0:
            raise InvalidPacketError(
                f"cell size must be positive, got {self.cell_size_bytes!r}"
            )

    def cells_for(self, length_bytes: int) -> int:
        return cells_for(length_bytes, self)


def cells_for(length_bytes: int, geom: CellGeometry) -> int:
    if length_bytes < 1:
        raise InvalidPacketError(
            f"packet length must be at least 1 byte, got {length_bytes!r}"
        )
    return -(-length_bytes // geom.cell_size_bytes)


@dataclasses.dataclass(frozen=True, slots=True)
class PacketDescriptor:
    flow_id: int
    length_bytes: int
    length_cells: int
    arrival_time: SimTime
    priority_class: int = 0
    seq: int = 0

    @classmethod
    def build(
        cls,
        flow_id: int,
        length_bytes: int,
        geom: CellGeometry,
        arrival_time: SimTime,
        priority_class: int = 0,
        seq: int = 0,
        mtu: int = DEFAULT_MTU,
    ) -> PacketDescriptor:
        if not 1 <= length_bytes <= mtu:
            raise InvalidPacketError(
                f"packet length {length_bytes!r} outside [1, {mtu}]"
            )
        return cls(
            flow_id=flow_id,
            length_bytes=length_bytes,
            length_cells=cells_for(length_bytes, geom),
            arrival_time=arrival_time,
            priority_class=priority_class,
            seq=seq,
        )


@dataclasses.dataclass(slots=True)
class QueueStats:
    enqueued: int = 0
    dequeued: int = 0
    head_dropped: int = 0
    tail_dropped: int = 0
    enqueued_cells: int = 0
    dequeued_cells: int = 0
    head_dropped_cells: int = 0


@dataclasses.dataclass(slots=True)
class QueueState:
    queue_id: int
    port_id: int
    alpha: Fraction = Fraction(1)
    fifo: deque[PacketDescriptor] = dataclasses.field(default_factory=deque)
    occupancy_cells: int = 0
    occupancy_bytes: int = 0
    stats: QueueStats = dataclasses.field(default_factory=QueueStats)

    def __len__(self) -> int:
        return len(self.fifo)

    @property
    def head(self) -> PacketDescriptor | None:
        return self.fifo[0] if self.fifo else None


class SchedulerKind(StrEnum):
    ROUND_ROBIN = "round_robin"
    DRR = "drr"
    STRICT_PRIORITY = "strict_priority"


class PortSpec(NamedTuple):
    port_id: int
    line_rate_bits_per_sec: int
    queue_ids: tuple[int, ...]
    scheduler_kind: SchedulerKind = SchedulerKind.ROUND_ROBIN
    priorities: Mapping[int, int] = MappingProxyType({})
    drr_quantum_bytes: int = DEFAULT_MTU
    drr_weights: Mapping[int, int] = MappingProxyType({})


class SharedBufferState:
    def __init__(
        self, capacity_cells: int, queues: list[QueueState] | None = None
    ) -> None:
        if capacity_cells <= 0:
            raise BufferOverCommitError(
                f"buffer capacity must be positive, got {capacity_cells!r}"
            )
        self.capacity_cells = capacity_cells
        self.free_cells = capacity_cells
        self.queues: dict[int, QueueState] = {}
        for q in queues or []:
            self.add_queue(q)

    def add_queue(self, q: QueueState) -> None:
        if q.queue_id in self.queues:
            raise ConservationError(f"duplicate queue id {q.queue_id!r}")
        if q.occupancy_cells:
            raise ConservationError(
                f"queue {q.queue_id!r} must start empty"
            )
        self.queues[q.queue_id] = q
        self.queues = dict(sorted(self.queues.items()))

    def __getitem__(self, queue_id: int) -> QueueState:
        return self.queues[queue_id]

    def __iter__(self) -> Iterator[QueueState]:
        return iter(self.queues.values())

    @property
    def occupied_cells(self) -> int:
        return sum(q.occupancy_cells for q in self.queues.values())

    @property
    def utilization(self) -> float:
        return 1 - self.free_cells / self.capacity_cells

    def check_conservation(self) -> None:
        occupied = self.occupied_cells
        if self.free_cells < 0 or self.free_cells + occupied != (
            self.capacity_cells
        ):
            report = ", ".join(
                f"q{q.queue_id}={q.occupancy_cells}" for q in self
            )
            raise ConservationError(
                f"free={self.free_cells} + occupied={occupied} != "
                f"B={self.capacity_cells} ({report})"
            )
        for q in self:
            cells = sum(pd.length_cells for pd in q.fifo)
            size = sum(pd.length_bytes for pd in q.fifo)
            if cells != q.occupancy_cells or size != q.occupancy_bytes:
                raise ConservationError(
                    f"queue {q.queue_id!r} accounting drifted: "
                    f"cells {q.occupancy_cells} vs fifo {cells}, "
                    f"bytes {q.occupancy_bytes} vs fifo {size}"
                )

    def check_no_leak(self) -> None:
        for q in self:
            s = q.stats
            if s.enqueued_cells != (
                s.dequeued_cells + s.head_dropped_cells + q.occupancy_cells
            ):
                raise ConservationError(
                    f"queue {q.queue_id!r} leaked cells: "
                    f"enqueued={s.enqueued_cells} dequeued={s.dequeued_cells}"
                    f" head_dropped={s.head_dropped_cells}"
                    f" resident={q.occupancy_cells}"
                )


def enqueue(
    q: QueueState, pd: PacketDescriptor, buf: SharedBufferState
) -> None:
    if buf.free_cells < pd.length_cells:
        raise BufferOverCommitError(
            f"enqueue of {pd.length_cells} cells into queue {q.queue_id!r} "
            f"with only {buf.free_cells} free cells"
        )
    q.fifo.append(pd)
    q.occupancy_cells += pd.length_cells
    q.occupancy_bytes += pd.length_bytes
    q.stats.enqueued += 1
    q.stats.enqueued_cells += pd.length_cells
    buf.free_cells -= pd.length_cells


def pop_head(q: QueueState, buf: SharedBufferState) -> PacketDescriptor:
    if not q.fifo:
        raise NoPacketError(f"queue {q.queue_id!r} is empty")
    pd = q.fifo.popleft()
    q.occupancy_cells -= pd.length_cells
    q.occupancy_bytes -= pd.length_bytes
    buf.free_cells += pd.length_cells
    return pd


def dequeue_head(q: QueueState, buf: SharedBufferState) -> PacketDescriptor:
    pd = pop_head(q, buf)
    q.stats.dequeued += 1
    q.stats.dequeued_cells += pd.length_cells
    return pd
