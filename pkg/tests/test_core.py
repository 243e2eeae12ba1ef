from __future__ import annotations

import json
from dataclasses import replace
from datetime import timedelta

import pytest
from hypothesis import HealthCheck, given, settings

from wattval.core import (
    ConfigError,
    EnergyTriple,
    Environment,
    ExperimentConfig,
    PowerSample,
    PowerTrace,
    ProcessorRef,
    RunLog,
    RunLogError,
    deserialize_run,
    load_config,
    load_environment,
    new_run_id,
    serialize_run,
    validate_config,
)

from conftest import EPOCH, make_record, run_records


def test_validate_accepts_known_processor(env, gpu_config):
    assert validate_config(gpu_config, env) is gpu_config


def test_validate_unknown_processor(env):
    cfg = ExperimentConfig(("x",), frozenset({"a100"}))
    with pytest.raises(ConfigError, match="unknown processor"):
        validate_config(cfg, env)


def test_validate_reports_every_problem(env):
    cfg = ExperimentConfig(("x",), frozenset({"a100"}), repetitions=0, work_unit_scale=0)
    with pytest.raises(ConfigError) as err:
        validate_config(cfg, env)
    problems = err.value.problems
    assert any("repetitions must be >= 1" in p for p in problems)
    assert any("work_unit_scale" in p for p in problems)
    assert any("unknown processor" in p for p in problems)


def test_validate_empty_active_set(env):
    with pytest.raises(ConfigError, match="nonempty"):
        validate_config(ExperimentConfig(("x",), frozenset()), env)


def test_environment_invariants():
    with pytest.raises(ConfigError, match="duplicate"):
        Environment((ProcessorRef("cpu", "a", 1.0), ProcessorRef("gpu", "a", 2.0)))
    with pytest.raises(ConfigError):
        Environment((), co2_efficiency_kg_per_kwh=-0.1)
    with pytest.raises(ConfigError):
        ProcessorRef("gpu", "x", 0.0)


def test_trace_requires_increasing_timestamps_per_source():
    PowerTrace((PowerSample(0, 1, "a"), PowerSample(0, 1, "b"), PowerSample(1, 1, "a")))
    with pytest.raises(ValueError, match="strictly increasing"):
        PowerTrace((PowerSample(1, 1, "a"), PowerSample(1, 2, "a")))


def test_trace_dump_roundtrip():
    tr = PowerTrace((PowerSample(0.0, 100.5, "cpu"), PowerSample(0.25, 3.0, "gpu0")), 0.25)
    assert PowerTrace.load(tr.dump(), 0.25) == tr


def test_energy_triple_uncertainty_pairing():
    with pytest.raises(ValueError):
        EnergyTriple(1.0, 1.0, 5.0, None)
    with pytest.raises(ValueError):
        EnergyTriple(-1.0, 1.0)


def test_record_invariants():
    ok = make_record(EnergyTriple(1, 1), duration_s=10)
    with pytest.raises(ValueError, match="inconsistent"):
        replace(ok, duration_s=12.0)
    with pytest.raises(ValueError, match="ended_at"):
        replace(ok, ended_at=ok.started_at)


def test_run_id_is_timestamp_prefixed():
    rid = new_run_id(EPOCH + timedelta(milliseconds=1234))
    assert rid.startswith("20250101T000001234Z-")
    assert new_run_id(EPOCH) != new_run_id(EPOCH)


def test_serialize_single_line_with_schema_version():
    data = serialize_run(make_record(EnergyTriple(36000.0, 30000.0, 40000.0, 72000.0)))
    assert data.endswith(b"\n") and data.count(b"\n") == 1
    assert data.startswith(b'{"schema_version": 1')


def test_roundtrip_example():
    r = make_record(EnergyTriple(36000.0, None))
    assert deserialize_run(serialize_run(r)) == r


def test_empty_stream_is_parse_error():
    with pytest.raises(RunLogError, match="empty"):
        deserialize_run(b"")


def test_parse_error_names_field():
    with pytest.raises(RunLogError, match="missing field 'config'"):
        deserialize_run(b'{"schema_version": 1, "run_id": "x"}')
    good = json.loads(serialize_run(make_record(EnergyTriple(1.0, 1.0))))
    with pytest.raises(RunLogError, match="duration_s"):
        deserialize_run(json.dumps({**good, "duration_s": -5}))
    with pytest.raises(RunLogError, match="energies"):
        deserialize_run(json.dumps({**good, "energies": {"static_ws": 1.0}}))
    with pytest.raises(RunLogError, match="line 3"):
        deserialize_run(b"{not json", lineno=3)


def test_log_reports_offending_line(tmp_path):
    path = tmp_path / "runs.jsonl"
    log = RunLog(path)
    log.append(make_record(EnergyTriple(1.0, 1.0)))
    with open(path, "ab") as fh:
        fh.write(b'{"schema_version": 1}\n')
    with pytest.raises(RunLogError, match="line 2"):
        log.records()


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(run_records())
def test_roundtrip_property(record):
    assert deserialize_run(serialize_run(record)) == record


@settings(max_examples=5, deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
@given(run_records(max_samples=0))
def test_roundtrip_ten_thousand_samples(record):
    samples = tuple(PowerSample(i * 0.1, (i * 7919) % 450 + 0.123, "src") for i in range(10_000))
    big = replace(record, traces=(PowerTrace(samples, 0.1),))
    assert deserialize_run(serialize_run(big)) == big


def test_log_append_and_read_validates(tmp_path, env, gpu_config):
    log = RunLog(tmp_path / "sub" / "runs.jsonl")
    recs = [make_record(EnergyTriple(float(i), None), config=gpu_config, environment=env, run_id=str(i))
            for i in range(3)]
    for r in recs:
        log.append(r)
    back = log.records()
    assert back == recs
    for r in back:
        validate_config(r.config, r.environment)


def test_key_value_documents(tmp_path):
    (tmp_path / "cfg.yaml").write_text(
        "name: resnet50\nworkload_command: [python, infer.py]\nactive_processors: [rtx4090]\n"
        "work_unit: inference\nwork_unit_scale: 1000\nhyperparameters: {batch_size: 32}\n"
    )
    (tmp_path / "env.yaml").write_text(
        "host_label: ws\nco2_efficiency_kg_per_kwh: 0.38\nprocessors:\n"
        "  - {kind: gpu, name: rtx4090}\n  - {kind: cpu, name: mystery, tdp_watts: 65}\n"
    )
    cfg = load_config(tmp_path / "cfg.yaml")
    env = load_environment(tmp_path / "env.yaml", {"rtx4090": 300.0})
    assert cfg.hyperparameters == {"batch_size": "32"}
    assert env.processor("rtx4090").tdp_watts == 300.0
    assert env.processor("mystery").tdp_watts == 65.0
    with pytest.raises(ConfigError, match="TDP table"):
        load_environment(tmp_path / "env.yaml", {})
