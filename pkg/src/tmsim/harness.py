from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import NamedTuple

from tmsim.config import (
    PolicyModel,
    ScenarioSpec,
    checked_engine_config,
    config_hash,
    effective_spec,
    normalized,
    parse_policy_token,
    swept_generators,
)
from tmsim.core import ConservationError
from tmsim.engine import Engine
from tmsim.metrics import (
    flows_frame,
    queries_frame,
    queue_length_trace,
    summarize,
    summary_frame,
)
from utils.utils import local_now

logger = logging.getLogger("TMSIM")


class ScenarioError(Exception): ...


class RunResult(NamedTuple):
    scenario: str
    policy: str
    seed: int
    run_dir: Path
    events: int
    tail_drops: int
    head_drops: int
    load: float | None = None


def resolve_policies(
    spec: ScenarioSpec, tokens: list[str] | None = None
) -> list[PolicyModel]:
    tokens = tokens if tokens else spec.policies
    if not tokens:
        return [spec.policy]
    try:
        return [parse_policy_token(token) for token in tokens]
    except ValueError as e:
        raise ScenarioError(str(e))


def run_dir_for(
    output_root: Path,
    scenario: str,
    policy_label: str,
    seed: int,
    load: float | None = None,
) -> Path:
    run_dir = output_root / scenario / policy_label
    if load is not None:
        run_dir = run_dir / f"load-{load:g}"
    return run_dir / f"seed-{seed}"


def write_manifest(
    run_dir: Path,
    run_spec: ScenarioSpec,
    source_text: str,
    policy_label: str,
    load: float | None = None,
) -> None:
    """`normalized` is the run's own scenario and reruns it on its own."""
    manifest = {
        "scenario": run_spec.name,
        "policy": policy_label,
        "seed": run_spec.seeds[0],
        "load": load,
        "config_sha256": config_hash(run_spec),
        "created": local_now().isoformat(),
        "normalized": normalized(run_spec),
        "source": source_text,
    }
    with (run_dir / "manifest.json").open("w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)


def run_one(
    spec: ScenarioSpec,
    source_text: str,
    policy: PolicyModel,
    seed: int,
    output_root: Path,
    load: float | None = None,
) -> RunResult:
    run_spec = effective_spec(spec, policy, seed, load)
    config = checked_engine_config(run_spec)
    label = config.policy.label
    run_dir = run_dir_for(output_root, spec.name, label, seed, load)
    run_dir.mkdir(parents=True, exist_ok=True)

    at_load = "" if load is None else f" load={load:g}"
    logger.info(f"Running {spec.name!r} policy={label!r} seed={seed}{at_load}")
    engine = Engine(config, run_spec.workload)
    events = list(engine.run())
    flows = engine.flows
    queries = engine.queries
    summary = summarize(events, config, flows, queries, engine.buffer)
    if not summary.counting_identity_holds():
        raise ConservationError(
            f"{spec.name!r}: packet accounting does not add up"
        )

    outputs = spec.outputs
    if outputs.trace:
        with (run_dir / "trace.tsv").open("w", encoding="utf-8") as f:
            f.writelines(f"{ev.to_line()}\n" for ev in events)
    if outputs.flow_csv:
        flows_frame(flows).to_csv(run_dir / "flows.csv", index=False)
        queries_frame(queries).to_csv(run_dir / "queries.csv", index=False)
    if outputs.summary_csv:
        summary_frame(summary).to_csv(run_dir / "summary.csv", index=False)
    if outputs.queue_trace:
        queue_length_trace(events, config).to_csv(
            run_dir / "queue_trace.csv", index=False
        )
    write_manifest(run_dir, run_spec, source_text, label, load)

    logger.info(
        f"Finished {spec.name!r} policy={label!r} seed={seed}{at_load}: "
        f"{len(events)} events, {summary.tail_drops} tail drops, "
        f"{summary.head_drops} head drops -> {str(run_dir)!r}"
    )
    return RunResult(
        spec.name,
        label,
        seed,
        run_dir,
        len(events),
        summary.tail_drops,
        summary.head_drops,
        load,
    )


def run_scenario(
    spec: ScenarioSpec,
    source_text: str,
    output_root: Path,
    policies: list[str] | None = None,
    seeds: list[int] | None = None,
    jobs: int = 1,
    loads: list[float] | None = None,
) -> list[RunResult]:
    models = resolve_policies(spec, policies)
    seeds = seeds if seeds else spec.seeds
    levels: list[float | None] = list(loads if loads else spec.loads)
    if any(level is not None and level <= 0 for level in levels):
        raise ScenarioError(f"loads must be positive, got {levels!r}")
    if levels and not swept_generators(spec.workload):
        raise ScenarioError(
            f"{spec.name!r} has no poisson_flows generator with a load"
        )
    plan = [
        (policy, seed, level)
        for policy in models
        for level in levels or [None]
        for seed in seeds
    ]
    keys = [
        (checked_engine_config(spec, policy, seed).policy.label, level, seed)
        for policy, seed, level in plan
    ]
    if len(set(keys)) != len(plan):
        raise ScenarioError(f"duplicate (policy, load, seed) runs in {keys!r}")

    logger.info(
        f"Scenario {spec.name!r}: {len(models)} policies x "
        f"{len(levels) or 1} loads x {len(seeds)} seeds"
    )
    if jobs <= 1 or len(plan) == 1:
        return [
            run_one(spec, source_text, policy, seed, output_root, level)
            for policy, seed, level in plan
        ]

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(
                run_one, spec, source_text, policy, seed, output_root, level
            )
            for policy, seed, level in plan
        ]
        return [future.result() for future in futures]
