"""Packet expulsion over redundant memory bandwidth.

Over-allocated queues are flagged in a bitmap, a round-robin arbiter picks
one of them, and a fixed-priority arbiter lets the head drop through only
when the output scheduler leaves the memory port idle and the token bucket
can pay for the victim's cells.
"""

from __future__ import annotations

import dataclasses
import logging
from enum import StrEnum
from typing import Iterator, NamedTuple

from tmsim.admission import AdmissionPolicy, dt_threshold
from tmsim.core import (
    PacketDescriptor,
    QueueState,
    SharedBufferState,
    SimTime,
    pop_head,
)

logger = logging.getLogger("TMSIM")


class NoVictimError(Exception): ...


class OverAllocationBitmap:
    def __init__(self, size: int, bits: int = 0) -> None:
        self.size = size
        self.bits = bits & ((1 << size) - 1)

    @classmethod
    def from_indices(
        cls, size: int, indices: list[int]
    ) -> OverAllocationBitmap:
        bits = 0
        for i in indices:
            bits |= 1 << i
        return cls(size, bits)

    def set(self, index: int) -> None:
        self.bits |= 1 << index

    def __contains__(self, index: int) -> bool:
        return bool(self.bits >> index & 1)

    def __iter__(self) -> Iterator[int]:
        bits = self.bits
        while bits:
            low = bits & -bits
            yield low.bit_length() - 1
            bits ^= low

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __bool__(self) -> bool:
        return self.bits != 0

    def __str__(self) -> str:
        return format(self.bits, f"0{self.size}b") if self.size else ""

    def __repr__(self) -> str:
        return f"OverAllocationBitmap({self})"


@dataclasses.dataclass(slots=True)
class RoundRobinPointer:
    last_granted: int | None = None


class ArbiterSource(StrEnum):
    OUTPUT_SCHEDULER = "OutputScheduler"
    HEAD_DROP_SELECTOR = "HeadDropSelector"


class ArbiterRequest(NamedTuple):
    source: ArbiterSource
    queue_id: int


class Grant(StrEnum):
    GRANT_SCHEDULER = "GrantScheduler"
    GRANT_HEAD_DROP = "GrantHeadDrop"
    IDLE = "Idle"


class TokenSource(StrEnum):
    TX = "TX"
    EXPULSION = "Expulsion"


class TokenEntry(NamedTuple):
    time: SimTime
    source: TokenSource
    cells: int
    before: int
    after: int


class PipelineOp(StrEnum):
    READ_PD = "ReadPD"
    UNLINK_PD = "UnlinkPD"
    READ_CELL_POINTER = "ReadCellPointer"
    FREE_CELL_POINTER = "FreeCellPointer"
    READ_CELL_DATA = "ReadCellData"


# An expelled packet never has its cell data read.
TRANSMIT_OPS = tuple(PipelineOp)
EXPEL_OPS = tuple(op for op in PipelineOp if op != PipelineOp.READ_CELL_DATA)


@dataclasses.dataclass(slots=True)
class PipelineCounters:
    ops: dict[PipelineOp, int] = dataclasses.field(
        default_factory=lambda: dict.fromkeys(PipelineOp, 0)
    )

    def charge(self, transmitted: bool) -> tuple[PipelineOp, ...]:
        ops = TRANSMIT_OPS if transmitted else EXPEL_OPS
        for op in ops:
            self.ops[op] += 1
        return ops


@dataclasses.dataclass(slots=True)
class TokenBucket:
    token_interval: SimTime
    burst_cap: int
    tokens: int = 0
    last_refill: SimTime = 0
    generated: int = 0
    clamped: int = 0
    tx_withdrawn: int = 0
    expulsion_withdrawn: int = 0
    ledger: list[TokenEntry] | None = None

    def __post_init__(self) -> None:
        if self.token_interval <= 0:
            raise ValueError(
                f"token interval must be positive, got {self.token_interval!r}"
            )
        if self.burst_cap < 1:
            raise ValueError(
                f"burst cap must be at least 1, got {self.burst_cap!r}"
            )


def refresh_bitmap(
    buf: SharedBufferState, policy: AdmissionPolicy
) -> OverAllocationBitmap:
    bitmap = OverAllocationBitmap(max(buf.queues, default=-1) + 1)
    for q in buf:
        if q.occupancy_cells > dt_threshold(buf, policy.alpha_for(q.queue_id)):
            bitmap.set(q.queue_id)
    return bitmap


def rr_next(
    bitmap: OverAllocationBitmap, ptr: RoundRobinPointer
) -> int | None:
    if not bitmap:
        return None
    start = 0 if ptr.last_granted is None else ptr.last_granted + 1
    above = bitmap.bits >> start << start
    pick = above if above else bitmap.bits
    index = (pick & -pick).bit_length() - 1
    ptr.last_granted = index
    return index


def arbitrate(
    sched_req: ArbiterRequest | None,
    drop_req: ArbiterRequest | None,
    bucket: TokenBucket,
    cells_needed: int,
) -> Grant:
    if sched_req is not None:
        return Grant.GRANT_SCHEDULER
    if drop_req is not None and bucket.tokens >= cells_needed:
        return Grant.GRANT_HEAD_DROP
    return Grant.IDLE


def refill_tokens(bucket: TokenBucket, now: SimTime) -> None:
    if now < bucket.last_refill:
        raise ValueError(
            f"token refill went back in time: {now} < {bucket.last_refill}"
        )
    whole = (now - bucket.last_refill) // bucket.token_interval
    if not whole:
        return
    bucket.last_refill += whole * bucket.token_interval
    bucket.generated += whole
    room = max(0, bucket.burst_cap - bucket.tokens)
    added = min(whole, room)
    bucket.clamped += whole - added
    bucket.tokens += added


def withdraw_tokens(
    bucket: TokenBucket,
    cells: int,
    source: TokenSource,
    now: SimTime | None = None,
) -> bool:
    if cells < 1:
        raise ValueError(f"withdrawal must be at least 1 cell, got {cells!r}")
    before = bucket.tokens
    if source == TokenSource.EXPULSION:
        if bucket.tokens < cells:
            return False
        bucket.expulsion_withdrawn += cells
    else:
        bucket.tx_withdrawn += cells
    bucket.tokens -= cells
    if bucket.ledger is not None:
        bucket.ledger.append(
            TokenEntry(
                bucket.last_refill if now is None else now,
                source,
                cells,
                before,
                bucket.tokens,
            )
        )
    return True


def head_drop(q: QueueState, buf: SharedBufferState) -> PacketDescriptor:
    if not q.fifo:
        raise NoVictimError(f"queue {q.queue_id!r} has no head to drop")
    pd = pop_head(q, buf)
    q.stats.head_dropped += 1
    q.stats.head_dropped_cells += pd.length_cells
    return pd
