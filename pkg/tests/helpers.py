from fractions import Fraction
from typing import Any

from tmsim.admission import AdmissionPolicy, PolicyKind
from tmsim.core import PortSpec
from tmsim.engine import Engine, EngineConfig, EventKind, EventRecord
from tmsim.traffic import WorkloadSpec

GBPS = 10**9


def policy(kind: PolicyKind, alpha: float | None = None) -> AdmissionPolicy:
    return AdmissionPolicy(
        kind=kind,
        default_alpha=None if alpha is None else Fraction(alpha),
    )


def two_port_config(
    kind: PolicyKind = PolicyKind.DYNAMIC_THRESHOLD,
    alpha: float | None = None,
    buffer_cells: int = 512,
    aggregate_bps: int | None = None,
    duration: int = 50_000,
    **kwargs: Any,
) -> EngineConfig:
    """Two 10G ports, queue i on port i."""
    ports = [
        PortSpec(port_id=i, line_rate_bits_per_sec=10 * GBPS, queue_ids=(i,))
        for i in range(2)
    ]
    kwargs.setdefault("expulsion_enabled", kind == PolicyKind.OCCAMY)
    return EngineConfig(
        ports=ports,
        buffer_cells=buffer_cells,
        policy=policy(kind, alpha),
        sim_duration=duration,
        aggregate_bps=aggregate_bps,
        **kwargs,
    )


def workload(*generators: dict[str, Any]) -> WorkloadSpec:
    return WorkloadSpec.model_validate({"generators": list(generators)})


def run_engine(
    config: EngineConfig, spec: WorkloadSpec, **kwargs: Any
) -> tuple[Engine, list[EventRecord]]:
    engine = Engine(config, spec, **kwargs)
    return engine, list(engine.run())


def of_kind(events: list[EventRecord], kind: EventKind) -> list[EventRecord]:
    return [ev for ev in events if ev.kind == kind]


def flow_ids(engine: Engine, tag: str) -> set[int]:
    return {f.flow_id for f in engine.flows if f.tag == tag}
