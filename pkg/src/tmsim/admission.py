from __future__ import annotations

import dataclasses
import logging
from enum import StrEnum
from fractions import Fraction
from typing import Mapping, NamedTuple

from tmsim.core import PacketDescriptor, QueueState, SharedBufferState

logger = logging.getLogger("TMSIM")

Rational = Fraction | int | float


class AnalyticInputError(Exception): ...


class PolicyKind(StrEnum):
    STATIC_THRESHOLD = "static_threshold"
    DYNAMIC_THRESHOLD = "dynamic_threshold"
    OCCAMY = "occamy"
    PUSHOUT = "pushout"


DEFAULT_ALPHA: dict[PolicyKind, Fraction] = {
    PolicyKind.STATIC_THRESHOLD: Fraction(1),
    PolicyKind.DYNAMIC_THRESHOLD: Fraction(1),
    PolicyKind.OCCAMY: Fraction(8),
    PolicyKind.PUSHOUT: Fraction(1),
}


class Decision(StrEnum):
    ACCEPT = "Accept"
    TAIL_DROP = "TailDrop"
    ACCEPT_AFTER_PUSHOUT = "AcceptAfterPushout"


class AdmissionVerdict(NamedTuple):
    decision: Decision
    threshold_at_decision: int
    pushout_victim: int | None = None
    # One queue id per head packet to expel, in order.
    pushout_plan: tuple[int, ...] = ()


@dataclasses.dataclass(frozen=True)
class AdmissionPolicy:
    kind: PolicyKind
    per_queue_alpha: Mapping[int, Fraction] = dataclasses.field(
        default_factory=dict
    )
    static_limit_cells: int | None = None
    default_alpha: Fraction | None = None

    def __post_init__(self) -> None:
        uses_alpha = self.kind in (
            PolicyKind.DYNAMIC_THRESHOLD,
            PolicyKind.OCCAMY,
        )
        if uses_alpha:
            for queue_id, alpha in self.per_queue_alpha.items():
                if alpha <= 0:
                    raise AnalyticInputError(
                        f"alpha of queue {queue_id!r} must be positive, "
                        f"got {alpha!r}"
                    )
            if self.default_alpha is not None and self.default_alpha <= 0:
                raise AnalyticInputError(
                    f"default alpha must be positive, got "
                    f"{self.default_alpha!r}"
                )
        if self.kind == PolicyKind.STATIC_THRESHOLD and (
            self.static_limit_cells is None or self.static_limit_cells < 0
        ):
            raise AnalyticInputError(
                "static threshold policy needs a non-negative "
                "static_limit_cells"
            )

    def alpha_for(self, queue_id: int) -> Fraction:
        alpha = self.per_queue_alpha.get(queue_id)
        if alpha is not None:
            return alpha
        if self.default_alpha is not None:
            return self.default_alpha
        return DEFAULT_ALPHA[self.kind]

    @property
    def label(self) -> str:
        if self.kind == PolicyKind.STATIC_THRESHOLD:
            return f"{self.kind}-{self.static_limit_cells}"
        if self.kind == PolicyKind.PUSHOUT:
            return str(self.kind)
        alphas = {self.alpha_for(q) for q in self.per_queue_alpha} or {
            self.alpha_for(-1)
        }
        if len(alphas) == 1:
            return f"{self.kind}-a{_fmt_alpha(alphas.pop())}"
        return f"{self.kind}-mixed"


def _fmt_alpha(alpha: Fraction) -> str:
    if alpha.denominator == 1:
        return str(alpha.numerator)
    return f"{float(alpha):g}"


def dt_threshold(buf: SharedBufferState, alpha: Rational) -> int:
    a = alpha if isinstance(alpha, Fraction) else Fraction(alpha)
    return a.numerator * buf.free_cells // a.denominator


def longest_queue(buf: SharedBufferState) -> int | None:
    best: int | None = None
    best_cells = 0
    for q in buf:
        if q.occupancy_cells > best_cells:
            best, best_cells = q.queue_id, q.occupancy_cells
    return best


def _pushout_victim(occupancy: dict[int, int], arriving: int) -> int | None:
    most = max(occupancy.values(), default=0)
    if most == 0:
        return None
    tied = [qid for qid, cells in occupancy.items() if cells == most]
    others = [qid for qid in tied if qid != arriving]
    return min(others) if others else None


def pushout_plan(
    buf: SharedBufferState, queue_id: int, cells: int
) -> list[int] | None:
    if cells > buf.capacity_cells:
        return None
    occupancy = {q.queue_id: q.occupancy_cells for q in buf}
    cursor = dict.fromkeys(occupancy, 0)
    free = buf.free_cells
    plan: list[int] = []
    while free < cells:
        victim = _pushout_victim(occupancy, queue_id)
        if victim is None:
            return None
        pd = buf[victim].fifo[cursor[victim]]
        cursor[victim] += 1
        occupancy[victim] -= pd.length_cells
        free += pd.length_cells
        plan.append(victim)
    return plan


def admit(
    policy: AdmissionPolicy,
    q: QueueState,
    pd: PacketDescriptor,
    buf: SharedBufferState,
) -> AdmissionVerdict:
    fits = buf.free_cells >= pd.length_cells

    match policy.kind:
        case PolicyKind.STATIC_THRESHOLD:
            limit = policy.static_limit_cells or 0
            if fits and q.occupancy_cells + pd.length_cells <= limit:
                return AdmissionVerdict(Decision.ACCEPT, limit)
            return AdmissionVerdict(Decision.TAIL_DROP, limit)

        case PolicyKind.DYNAMIC_THRESHOLD | PolicyKind.OCCAMY:
            threshold = dt_threshold(buf, policy.alpha_for(q.queue_id))
            if fits and q.occupancy_cells < threshold:
                return AdmissionVerdict(Decision.ACCEPT, threshold)
            return AdmissionVerdict(Decision.TAIL_DROP, threshold)

        case PolicyKind.PUSHOUT:
            if fits:
                return AdmissionVerdict(Decision.ACCEPT, buf.free_cells)
            plan = pushout_plan(buf, q.queue_id, pd.length_cells)
            if not plan:
                return AdmissionVerdict(Decision.TAIL_DROP, buf.free_cells)
            return AdmissionVerdict(
                Decision.ACCEPT_AFTER_PUSHOUT,
                buf.free_cells,
                pushout_victim=plan[0],
                pushout_plan=tuple(plan),
            )

    raise AnalyticInputError(f"unknown policy kind {policy.kind!r}")


def reserved_free_buffer(B: Rational, alpha: Rational, N: int) -> Fraction:
    if N < 1:
        raise AnalyticInputError(
            "reserved free buffer needs at least one congested queue"
        )
    return Fraction(B) / (1 + Fraction(alpha) * N)


def fairness_condition_holds(
    R: Rational, V: Rational, M: int, N: int, alpha: Rational
) -> bool:
    if M < 1 or V <= 0:
        raise AnalyticInputError(
            f"need M >= 1 and V > 0, got M={M!r} V={V!r}"
        )
    a = Fraction(alpha)
    return Fraction(R) <= Fraction(V) * (1 + (1 + a * N) / (a * M))


def max_steady_queue_share(alpha: Rational, N: int) -> Fraction:
    if N < 1:
        raise AnalyticInputError("steady share needs at least one queue")
    share = Fraction(alpha) * N
    return share / (1 + share)


def fair_share_fraction(alpha: Rational, N: int) -> Fraction:
    if N < 1:
        raise AnalyticInputError("fair share needs at least one queue")
    a = Fraction(alpha)
    return a / (1 + a * N)
