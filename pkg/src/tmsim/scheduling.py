from __future__ import annotations

import dataclasses
import logging
from typing import Mapping

from tmsim.core import PortSpec, QueueState, SchedulerKind

logger = logging.getLogger("TMSIM")


@dataclasses.dataclass(slots=True)
class SchedulerState:
    kind: SchedulerKind
    rr_pointer: int = -1
    drr_deficits: dict[int, int] = dataclasses.field(default_factory=dict)
    drr_quantum: int = 1500
    priorities: dict[int, int] = dataclasses.field(default_factory=dict)
    drr_weights: dict[int, int] = dataclasses.field(default_factory=dict)
    # DRR: the queue under rr_pointer already got its quantum this visit.
    drr_visit_open: bool = False

    @classmethod
    def for_port(cls, port: PortSpec) -> SchedulerState:
        return cls(
            kind=port.scheduler_kind,
            drr_deficits=dict.fromkeys(port.queue_ids, 0),
            drr_quantum=port.drr_quantum_bytes,
            priorities=dict(port.priorities),
            drr_weights=dict(port.drr_weights),
        )


def pick_next(
    port: PortSpec, sched: SchedulerState, queues: Mapping[int, QueueState]
) -> int | None:
    ids = port.queue_ids
    if not any(queues[qid].fifo for qid in ids):
        return None

    match sched.kind:
        case SchedulerKind.STRICT_PRIORITY:
            return _pick_strict(ids, sched, queues)
        case SchedulerKind.ROUND_ROBIN:
            return _pick_round_robin(ids, sched, queues)
        case SchedulerKind.DRR:
            return _pick_drr(ids, sched, queues)

    raise ValueError(f"unknown scheduler kind {sched.kind!r}")


def _pick_strict(
    ids: tuple[int, ...],
    sched: SchedulerState,
    queues: Mapping[int, QueueState],
) -> int:
    ranked = sorted(
        (sched.priorities.get(qid, 0), index, qid)
        for index, qid in enumerate(ids)
        if queues[qid].fifo
    )
    return ranked[0][2]


def _pick_round_robin(
    ids: tuple[int, ...],
    sched: SchedulerState,
    queues: Mapping[int, QueueState],
) -> int:
    n = len(ids)
    for step in range(1, n + 1):
        index = (sched.rr_pointer + step) % n
        if queues[ids[index]].fifo:
            sched.rr_pointer = index
            return ids[index]
    raise AssertionError("round robin found no backlogged queue")


def _pick_drr(
    ids: tuple[int, ...],
    sched: SchedulerState,
    queues: Mapping[int, QueueState],
) -> int:
    n = len(ids)
    if sched.rr_pointer < 0:
        sched.rr_pointer = 0
        sched.drr_visit_open = False

    while True:
        qid = ids[sched.rr_pointer]
        q = queues[qid]
        if not q.fifo:
            sched.drr_deficits[qid] = 0
            sched.rr_pointer = (sched.rr_pointer + 1) % n
            sched.drr_visit_open = False
            continue

        if not sched.drr_visit_open:
            weight = sched.drr_weights.get(qid, 1)
            sched.drr_deficits[qid] = (
                sched.drr_deficits.get(qid, 0) + sched.drr_quantum * weight
            )
            sched.drr_visit_open = True

        head = q.fifo[0]
        if sched.drr_deficits[qid] >= head.length_bytes:
            sched.drr_deficits[qid] -= head.length_bytes
            if len(q.fifo) == 1:
                sched.drr_deficits[qid] = 0
                sched.rr_pointer = (sched.rr_pointer + 1) % n
                sched.drr_visit_open = False
            return qid

        sched.rr_pointer = (sched.rr_pointer + 1) % n
        sched.drr_visit_open = False
