from __future__ import annotations

import hashlib
import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any

from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    ValidationError,
    model_validator,
)

from tmsim.admission import AdmissionPolicy, AnalyticInputError, PolicyKind
from tmsim.core import (
    DEFAULT_CELL_SIZE,
    DEFAULT_MTU,
    CellGeometry,
    InvalidPacketError,
    PortSpec,
    SchedulerKind,
)
from tmsim.engine import EngineConfig, EngineConfigError
from tmsim.structures import Duration, Rate, Size
from tmsim.traffic import (
    DEFAULT_RTO_NS,
    DEFAULT_WINDOW_BYTES,
    PoissonFlows,
    WorkloadSpec,
)

logger = logging.getLogger("TMSIM")

DEFAULT_BUFFER_PER_PORT_PER_GBPS = 5120


class ConfigValidationError(Exception): ...


def _to_fraction(value: object) -> object:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, float, str)) and not isinstance(value, bool):
        try:
            return Fraction(str(value))
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"cannot read alpha {value!r}")
    return value


Alpha = Annotated[
    Fraction,
    BeforeValidator(_to_fraction),
    PlainSerializer(str, return_type=str),
]


Load = Annotated[float, Field(gt=0)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)


class PortModel(_Strict):
    class Queue(_Strict):
        queue_id: int = Field(ge=0)
        alpha: Alpha | None = None
        priority: int = 0
        drr_weight: int = Field(default=1, ge=1)

    port_id: int = Field(ge=0)
    rate_bps: Rate = Field(gt=0)
    scheduler: SchedulerKind = SchedulerKind.ROUND_ROBIN
    drr_quantum_bytes: Size | None = Field(default=None, gt=0)
    queues: list[Queue] = Field(min_length=1)


class EngineModel(_Strict):
    cell_bytes: Size = Field(default=DEFAULT_CELL_SIZE, gt=0)
    mtu_bytes: Size = Field(default=DEFAULT_MTU, gt=0)
    buffer_cells: int | None = Field(default=None, gt=0)
    buffer_bytes: Size | None = Field(default=None, gt=0)
    buffer_per_port_per_gbps_bytes: Size | None = Field(default=None, gt=0)
    aggregate_rate_bps: Rate | None = Field(default=None, gt=0)
    ports: list[PortModel] = Field(min_length=1)
    duration_ns: Duration = Field(gt=0)
    rto_ns: Duration = Field(default=DEFAULT_RTO_NS, gt=0)
    window_bytes: Size = Field(default=DEFAULT_WINDOW_BYTES, gt=0)
    token_interval_ns: Duration | None = Field(default=None, gt=0)
    burst_cap_cells: int | None = Field(default=None, ge=1)
    max_head_drops_per_slot: int = Field(default=1, ge=1)
    expulsion_enabled: bool | None = None
    debug_checks: bool = False
    cdf_path: str | None = None

    @model_validator(mode="after")
    def _sizing(self) -> EngineModel:
        explicit = [
            name
            for name in ("buffer_cells", "buffer_bytes")
            if getattr(self, name) is not None
        ]
        if len(explicit) > 1:
            raise ValueError("give buffer_cells or buffer_bytes, not both")
        if explicit and self.buffer_per_port_per_gbps_bytes is not None:
            raise ValueError(
                f"contradictory buffer sizing: {explicit[0]} together with "
                "buffer_per_port_per_gbps_bytes"
            )
        queue_ids = [q.queue_id for p in self.ports for q in p.queues]
        if len(set(queue_ids)) != len(queue_ids):
            raise ValueError(f"duplicate queue ids in {queue_ids!r}")
        port_ids = [p.port_id for p in self.ports]
        if len(set(port_ids)) != len(port_ids):
            raise ValueError(f"duplicate port ids in {port_ids!r}")
        return self

    def resolved_buffer_cells(self) -> int:
        if self.buffer_cells is not None:
            return self.buffer_cells
        if self.buffer_bytes is not None:
            return self.buffer_bytes // self.cell_bytes
        per = self.buffer_per_port_per_gbps_bytes
        if per is None:
            per = DEFAULT_BUFFER_PER_PORT_PER_GBPS
        total_bps = sum(p.rate_bps for p in self.ports)
        return per * total_bps // 10**9 // self.cell_bytes


class PolicyModel(_Strict):
    kind: PolicyKind = PolicyKind.DYNAMIC_THRESHOLD
    alpha: Alpha | None = None
    queue_alpha: dict[int, Alpha] = Field(default_factory=dict)
    static_limit_cells: int | None = Field(default=None, ge=0)


class OutputsModel(_Strict):
    trace: bool = True
    flow_csv: bool = True
    summary_csv: bool = True
    queue_trace: bool = True


class ScenarioSpec(_Strict):
    name: str
    description: str = ""
    engine: EngineModel
    policy: PolicyModel = Field(default_factory=PolicyModel)
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    policies: list[str] = Field(default_factory=list)
    seeds: list[int] = Field(default_factory=lambda: [1])
    loads: list[Load] = Field(default_factory=list)
    outputs: OutputsModel = Field(default_factory=OutputsModel)

    @model_validator(mode="after")
    def _bound_queues(self) -> ScenarioSpec:
        known = {q.queue_id for p in self.engine.ports for q in p.queues}
        for index, gen in enumerate(self.workload.generators):
            targets = (
                gen.queues if isinstance(gen, PoissonFlows) else [gen.queue]
            )
            for qid in targets:
                if qid not in known:
                    raise ValueError(
                        f"workload.generators.{index} targets unknown "
                        f"queue {qid!r}"
                    )
            size = getattr(gen, "packet_bytes", None)
            if size is not None and size > self.engine.mtu_bytes:
                raise ValueError(
                    f"workload.generators.{index}.packet_bytes {size!r} "
                    f"exceeds mtu_bytes {self.engine.mtu_bytes!r}"
                )
        for token in self.policies:
            parse_policy_token(token)
        if any(seed < 0 for seed in self.seeds):
            raise ValueError("seeds must be non-negative")
        if self.loads and not swept_generators(self.workload):
            raise ValueError(
                "loads needs a poisson_flows generator that sets load"
            )
        return self


def swept_generators(workload: WorkloadSpec) -> list[PoissonFlows]:
    return [
        gen
        for gen in workload.generators
        if isinstance(gen, PoissonFlows) and gen.load is not None
    ]


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(part) for part in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def parse_scenario(text: str, source: str = "<string>") -> ScenarioSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"{source}: invalid JSON: {e}")
    try:
        return ScenarioSpec.model_validate(raw)
    except ValidationError as err:
        for e in err.errors():
            logger.debug(e)
        raise ConfigValidationError(f"{source}: {_format_errors(err)}")


def load_scenario(path: Path) -> tuple[ScenarioSpec, str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigValidationError(f"cannot read {str(path)!r}: {e}")
    return parse_scenario(text, path.name), text


def parse_policy_token(token: str) -> PolicyModel:
    name, _, arg = token.partition(":")
    aliases = {
        "dt": PolicyKind.DYNAMIC_THRESHOLD,
        "occamy": PolicyKind.OCCAMY,
        "pushout": PolicyKind.PUSHOUT,
        "static": PolicyKind.STATIC_THRESHOLD,
    }
    kind = aliases.get(name.strip().lower())
    if kind is None:
        raise ValueError(f"unknown policy {token!r}")
    if kind == PolicyKind.STATIC_THRESHOLD:
        if not arg:
            raise ValueError(f"static policy needs a cell limit: {token!r}")
        return PolicyModel(kind=kind, static_limit_cells=int(arg))
    if kind == PolicyKind.PUSHOUT:
        if arg:
            raise ValueError(f"pushout takes no argument: {token!r}")
        return PolicyModel(kind=kind)
    return PolicyModel(kind=kind, alpha=_to_fraction(arg) if arg else None)


def build_policy(spec: ScenarioSpec, policy: PolicyModel) -> AdmissionPolicy:
    per_queue: dict[int, Fraction] = {}
    for port in spec.engine.ports:
        for q in port.queues:
            alpha = policy.queue_alpha.get(q.queue_id, q.alpha)
            if alpha is not None:
                per_queue[q.queue_id] = alpha
    return AdmissionPolicy(
        kind=policy.kind,
        per_queue_alpha=per_queue,
        static_limit_cells=policy.static_limit_cells,
        default_alpha=policy.alpha,
    )


def build_engine_config(
    spec: ScenarioSpec,
    policy: PolicyModel | None = None,
    seed: int | None = None,
) -> EngineConfig:
    policy = policy or spec.policy
    eng = spec.engine
    ports = [
        PortSpec(
            port_id=p.port_id,
            line_rate_bits_per_sec=p.rate_bps,
            queue_ids=tuple(q.queue_id for q in p.queues),
            scheduler_kind=p.scheduler,
            priorities={q.queue_id: q.priority for q in p.queues},
            drr_quantum_bytes=p.drr_quantum_bytes or eng.mtu_bytes,
            drr_weights={q.queue_id: q.drr_weight for q in p.queues},
        )
        for p in eng.ports
    ]
    expulsion = eng.expulsion_enabled
    if expulsion is None:
        expulsion = policy.kind == PolicyKind.OCCAMY
    return EngineConfig(
        ports=ports,
        buffer_cells=eng.resolved_buffer_cells(),
        policy=build_policy(spec, policy),
        sim_duration=eng.duration_ns,
        geometry=CellGeometry(eng.cell_bytes),
        expulsion_enabled=expulsion,
        random_seed=spec.seeds[0] if seed is None else seed,
        aggregate_bps=eng.aggregate_rate_bps,
        token_interval=eng.token_interval_ns,
        burst_cap=eng.burst_cap_cells,
        max_head_drops_per_slot=eng.max_head_drops_per_slot,
        mtu=eng.mtu_bytes,
        rto=eng.rto_ns,
        window_bytes=eng.window_bytes,
        cdf_path=eng.cdf_path,
        debug_checks=eng.debug_checks,
    )


def checked_engine_config(
    spec: ScenarioSpec,
    policy: PolicyModel | None = None,
    seed: int | None = None,
) -> EngineConfig:
    try:
        return build_engine_config(spec, policy, seed)
    except (EngineConfigError, AnalyticInputError, InvalidPacketError) as e:
        raise ConfigValidationError(f"{spec.name}: engine: {e}")


def validate_config(path: Path) -> tuple[EngineConfig, WorkloadSpec]:
    spec, _ = load_scenario(path)
    config = checked_engine_config(spec)
    logger.debug(
        f"{spec.name!r}: B={config.buffer_cells} cells, "
        f"{len(config.ports)} ports, policy={config.policy.label!r}"
    )
    return config, spec.workload


def normalized(spec: ScenarioSpec) -> dict[str, Any]:
    return spec.model_dump(mode="json")


def effective_spec(
    spec: ScenarioSpec,
    policy: PolicyModel | None = None,
    seed: int | None = None,
    load: float | None = None,
) -> ScenarioSpec:
    """A single run of a sweep as a scenario of its own: the policy, seed
    and background load it ran with, and no sweep axes left."""
    raw = normalized(spec)
    raw["policy"] = (policy or spec.policy).model_dump(mode="json")
    raw["policies"] = []
    raw["seeds"] = [spec.seeds[0] if seed is None else seed]
    raw["loads"] = []
    if load is not None:
        for gen in raw["workload"]["generators"]:
            if gen["kind"] == "poisson_flows" and gen["load"] is not None:
                gen["load"] = load
    try:
        return ScenarioSpec.model_validate(raw)
    except ValidationError as err:
        raise ConfigValidationError(f"{spec.name}: {_format_errors(err)}")


def config_hash(spec: ScenarioSpec) -> str:
    canonical = json.dumps(normalized(spec), sort_keys=True).encode()
    return hashlib.sha256(canonical).hexdigest()
