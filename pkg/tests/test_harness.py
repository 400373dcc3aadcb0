import json

import pandas as pd
import pytest

from tmsim.config import (
    ScenarioSpec,
    config_hash,
    load_scenario,
    parse_scenario,
)
from tmsim.harness import ScenarioError, resolve_policies, run_scenario
from tmsim.main import EXIT_OK, EXIT_VALIDATION, main
from tmsim.structures import Registry

RUN_FILES = {
    "trace.tsv",
    "flows.csv",
    "queries.csv",
    "summary.csv",
    "queue_trace.csv",
    "manifest.json",
}

LOADED = {
    "name": "loaded",
    "engine": {
        "buffer_cells": 256,
        "duration_ns": "40us",
        "ports": [
            {"port_id": 0, "rate_bps": "10G", "queues": [{"queue_id": 0}]}
        ],
    },
    "workload": {
        "generators": [
            {
                "kind": "poisson_flows",
                "queues": [0],
                "load": 0.5,
                "cdf_path": "resources/cdf/background_synthetic.tsv",
            }
        ]
    },
    "loads": [0.3, 0.9],
}


@pytest.fixture
def steady():
    return load_scenario(Registry().find_scenario("steady-state"))


def test_sweep_layout(tmp_path, steady):
    spec, text = steady
    results = run_scenario(
        spec, text, tmp_path, policies=["dt:1", "dt:2"], seeds=[1, 2]
    )
    assert len(results) == 4
    for label in ("dynamic_threshold-a1", "dynamic_threshold-a2"):
        for seed in (1, 2):
            run_dir = tmp_path / "steady-state" / label / f"seed-{seed}"
            assert {p.name for p in run_dir.iterdir()} == RUN_FILES

    run_dir = results[0].run_dir
    manifest = json.loads((run_dir / "manifest.json").read_text("utf-8"))
    assert manifest["scenario"] == "steady-state"
    assert manifest["policy"] == "dynamic_threshold-a1"
    assert manifest["source"] == text
    assert len(manifest["config_sha256"]) == 64

    summary = pd.read_csv(run_dir / "summary.csv").set_index("metric")
    assert summary.loc["tail_drops", "value"] == results[0].tail_drops
    assert results[0].tail_drops > 0

    lines = (run_dir / "trace.tsv").read_text("utf-8").splitlines()
    assert len(lines) == results[0].events
    assert all(line.count("\t") == 4 for line in lines)


def test_rerun_from_manifest_is_byte_identical(tmp_path, steady):
    spec, text = steady
    results = run_scenario(
        spec, text, tmp_path / "a", policies=["dt:1", "dt:8"]
    )
    manifests = [
        json.loads((r.run_dir / "manifest.json").read_text("utf-8"))
        for r in results
    ]
    assert manifests[0]["config_sha256"] != manifests[1]["config_sha256"]

    recorded, manifest = results[1], manifests[1]
    rebuilt = ScenarioSpec.model_validate(manifest["normalized"])
    assert config_hash(rebuilt) == manifest["config_sha256"]
    (again,) = run_scenario(rebuilt, manifest["source"], tmp_path / "b")
    assert again.policy == manifest["policy"] == "dynamic_threshold-a8"
    a = (recorded.run_dir / "trace.tsv").read_bytes()
    b = (again.run_dir / "trace.tsv").read_bytes()
    assert a == b


def test_load_sweep_layout(tmp_path):
    text = json.dumps(LOADED)
    spec = parse_scenario(text, "loaded.json")
    results = run_scenario(spec, text, tmp_path, policies=["dt:1"])
    assert [r.load for r in results] == [0.3, 0.9]
    for r in results:
        assert r.run_dir == (
            tmp_path / "loaded" / "dynamic_threshold-a1" / f"load-{r.load:g}"
            / "seed-1"
        )
        manifest = json.loads((r.run_dir / "manifest.json").read_text("utf-8"))
        assert manifest["load"] == r.load
        (gen,) = manifest["normalized"]["workload"]["generators"]
        assert gen["load"] == r.load
        assert manifest["normalized"]["loads"] == []


def test_duplicate_runs_rejected(tmp_path, steady):
    spec, text = steady
    with pytest.raises(ScenarioError):
        run_scenario(spec, text, tmp_path, policies=["dt:1", "dt:1.0"])


def test_policy_resolution(steady):
    spec, _ = steady
    assert len(resolve_policies(spec)) == 4
    assert [p.kind for p in resolve_policies(spec, ["pushout"])] == [
        "pushout"
    ]
    with pytest.raises(ScenarioError):
        resolve_policies(spec, ["warp:9"])


def test_cli_validate(capsys):
    assert main(["--no-log-file", "validate", "steady-state"]) == EXIT_OK
    assert "steady-state.json: OK" in capsys.readouterr().out


def test_cli_list_scenarios(capsys):
    assert main(["--no-log-file", "list-scenarios"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "burst-agility" in out
    assert "INVALID" not in out


def test_cli_rejects_bad_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    assert main(["--no-log-file", "validate", str(bad)]) == EXIT_VALIDATION


def test_cli_missing_scenario():
    code = main(["--no-log-file", "validate", "no-such-scenario"])
    assert code == EXIT_VALIDATION


def test_cli_sweep(tmp_path, capsys):
    code = main(
        [
            "--no-log-file",
            "sweep",
            "steady-state",
            "--policies",
            "dt:8",
            "--output-root",
            str(tmp_path),
        ]
    )
    assert code == EXIT_OK
    assert "dynamic_threshold-a8" in capsys.readouterr().out
    assert (tmp_path / "steady-state" / "dynamic_threshold-a8").is_dir()


def test_cli_loads_need_a_background_generator(tmp_path):
    code = main(
        [
            "--no-log-file",
            "sweep",
            "steady-state",
            "--policies",
            "dt:1",
            "--loads",
            "0.5",
            "--output-root",
            str(tmp_path),
        ]
    )
    assert code == EXIT_VALIDATION


def test_cli_validate_rejects_oversized_packets(tmp_path):
    raw = json.loads(
        Registry().find_scenario("dt-anomaly").read_text("utf-8")
    )
    raw["workload"]["generators"][0]["packet_bytes"] = 9000
    bad = tmp_path / "jumbo.json"
    bad.write_text(json.dumps(raw), encoding="utf-8")
    assert main(["--no-log-file", "validate", str(bad)]) == EXIT_VALIDATION
