"""Shared domain types, unit helpers and the append-only run log."""

from __future__ import annotations

import json
import os
import secrets
import threading
from dataclasses import dataclass, field, fields
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import yaml

WS_PER_KWH = 3_600_000.0
SCHEMA_VERSION = 1


def kwh_to_ws(kwh: float) -> float:
    return kwh * WS_PER_KWH


def ws_to_kwh(ws: float) -> float:
    return ws / WS_PER_KWH


def utc_ms(instant: datetime) -> datetime:
    """Normalize an instant to UTC, truncated to millisecond precision."""
    if instant.tzinfo is None:
        instant = instant.replace(tzinfo=timezone.utc)
    instant = instant.astimezone(timezone.utc)
    return instant.replace(microsecond=(instant.microsecond // 1000) * 1000)


def format_instant(instant: datetime) -> str:
    return utc_ms(instant).strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"


def parse_instant(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return utc_ms(datetime.fromisoformat(text))


def epoch_to_instant(seconds: float) -> datetime:
    return utc_ms(datetime.fromtimestamp(seconds, tz=timezone.utc))


class ConfigError(ValueError):
    """Raised when a configuration violates one or more constraints.

    ``problems`` carries every violated constraint, not just the first.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class RunLogError(ValueError):
    pass


class WorkUnit(str, Enum):
    INFERENCE = "inference"
    QUERY = "query"


class ProcessorKind(str, Enum):
    CPU = "cpu"
    GPU = "gpu"
    OTHER = "other"


@dataclass(frozen=True)
class ProcessorRef:
    kind: ProcessorKind
    name: str
    tdp_watts: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ProcessorKind(self.kind))
        if not self.tdp_watts > 0:
            raise ConfigError([f"processor {self.name!r}: tdp_watts must be > 0"])


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one workload run.

    ``active_processors`` holds processor *names*; they are resolved against
    an :class:`Environment` by :func:`validate_config`.
    """

    workload_command: tuple[str, ...]
    active_processors: frozenset[str]
    domain_tag: str = ""
    work_unit: WorkUnit = WorkUnit.INFERENCE
    work_unit_scale: int = 1
    hyperparameters: Mapping[str, str] = field(default_factory=dict)
    planned_duration_s: float | None = None
    repetitions: int = 3
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "workload_command", tuple(self.workload_command))
        object.__setattr__(self, "active_processors", frozenset(self.active_processors))
        object.__setattr__(self, "work_unit", WorkUnit(self.work_unit))
        object.__setattr__(
            self, "hyperparameters",
            {str(k): str(v) for k, v in dict(self.hyperparameters).items()},
        )
        if not self.name:
            object.__setattr__(self, "name", " ".join(self.workload_command) or "workload")

    def __hash__(self):
        return hash((self.workload_command, self.active_processors, self.name))


@dataclass(frozen=True)
class Environment:
    processors: tuple[ProcessorRef, ...]
    host_label: str = ""
    co2_efficiency_kg_per_kwh: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "processors", tuple(self.processors))
        problems = []
        if not self.co2_efficiency_kg_per_kwh >= 0:
            problems.append("co2_efficiency_kg_per_kwh must be >= 0")
        names = [p.name for p in self.processors]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            problems.append(f"duplicate processor names: {', '.join(dupes)}")
        if problems:
            raise ConfigError(problems)

    def processor(self, name: str) -> ProcessorRef:
        for p in self.processors:
            if p.name == name:
                return p
        raise KeyError(name)


@dataclass(frozen=True)
class PowerSample:
    timestamp_s: float
    watts: float
    source: str

    def __post_init__(self):
        if not self.watts >= 0:
            raise ValueError(f"negative power sample: {self.watts}")
        if not self.timestamp_s >= 0:
            raise ValueError(f"negative timestamp: {self.timestamp_s}")


@dataclass(frozen=True)
class PowerTrace:
    samples: tuple[PowerSample, ...]
    nominal_interval_s: float = 1.0
    missing_reads: int = 0
    degraded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.nominal_interval_s > 0:
            raise ValueError("nominal_interval_s must be > 0")
        last: dict[str, float] = {}
        for s in self.samples:
            prev = last.get(s.source)
            if prev is not None and not s.timestamp_s > prev:
                raise ValueError(
                    f"timestamps not strictly increasing for source {s.source!r} at {s.timestamp_s}"
                )
            last[s.source] = s.timestamp_s

    @property
    def sources(self) -> list[str]:
        return list(dict.fromkeys(s.source for s in self.samples))

    def for_source(self, source: str) -> list[PowerSample]:
        return [s for s in self.samples if s.source == source]

    def dump(self) -> str:
        """Per-line ``timestamp_s source watts`` text dump."""
        return "".join(f"{s.timestamp_s!r} {s.source} {s.watts!r}\n" for s in self.samples)

    @classmethod
    def load(cls, text: str, nominal_interval_s: float = 1.0) -> PowerTrace:
        samples = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'timestamp_s source watts'")
            samples.append(PowerSample(float(parts[0]), float(parts[2]), parts[1]))
        return cls(tuple(samples), nominal_interval_s)


@dataclass(frozen=True)
class EnergyTriple:
    static_ws: float
    dynamic_ws: float | None
    ground_truth_ws: float | None = None
    truth_uncertainty_ws: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not v >= 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
        if (self.ground_truth_ws is None) != (self.truth_uncertainty_ws is None):
            raise ValueError("truth_uncertainty_ws must be present iff ground_truth_ws is")

    def scaled(self, c: float) -> EnergyTriple:
        mul = lambda v: None if v is None else v * c  # noqa: E731
        return EnergyTriple(mul(self.static_ws), mul(self.dynamic_ws),
                            mul(self.ground_truth_ws), mul(self.truth_uncertainty_ws))


@dataclass(frozen=True)
class MeterReading:
    timestamp: datetime
    cumulative_kwh: float
    confidence: float = 1.0
    provenance: str = "file"

    def __post_init__(self):
        object.__setattr__(self, "timestamp", utc_ms(self.timestamp))
        if not self.cumulative_kwh >= 0:
            raise ValueError("cumulative_kwh must be >= 0")
        if not 0 <= self.confidence <= 1:
            raise ValueError("confidence must lie in [0, 1]")
        if self.provenance not in ("ocr", "manual", "file"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class MeterTimeline:
    readings: tuple[MeterReading, ...]
    resolution_kwh: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "readings", tuple(self.readings))
        if not self.resolution_kwh > 0:
            raise ValueError("resolution_kwh must be > 0")
        for a, b in zip(self.readings, self.readings[1:]):
            if b.timestamp < a.timestamp or b.cumulative_kwh < a.cumulative_kwh:
                raise ValueError("meter timeline must be time-ordered and non-decreasing")


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    config: ExperimentConfig
    environment: Environment
    started_at: datetime
    ended_at: datetime
    duration_s: float
    work_units_completed: int
    traces: tuple[PowerTrace, ...]
    energies: EnergyTriple
    meter_timeline: MeterTimeline | None = None
    notes: str = ""
    failed: bool = False
    exit_code: int | None = None
    series_tag: str | None = None
    dynamic_coverage: float | None = None
    dynamic_degraded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "started_at", utc_ms(self.started_at))
        object.__setattr__(self, "ended_at", utc_ms(self.ended_at))
        object.__setattr__(self, "traces", tuple(self.traces))
        if not self.ended_at > self.started_at:
            raise ValueError("ended_at must be after started_at")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be > 0")
        wall = (self.ended_at - self.started_at).total_seconds()
        if abs(wall - self.duration_s) > 1.0:
            raise ValueError(f"duration_s {self.duration_s} inconsistent with timestamps ({wall} s)")
        if self.work_units_completed < 0:
            raise ValueError("work_units_completed must be >= 0")


def new_run_id(now: datetime | None = None) -> str:
    now = utc_ms(now or datetime.now(timezone.utc))
    return now.strftime("%Y%m%dT%H%M%S") + f"{now.microsecond // 1000:03d}Z-" + secrets.token_hex(4)


def validate_config(config: ExperimentConfig, env: Environment) -> ExperimentConfig:
    """Return ``config`` unchanged if it is consistent with ``env``.

    Raises :class:`ConfigError` listing every violated constraint.
    """
    problems = []
    known = {p.name for p in env.processors}
    if not config.active_processors:
        problems.append("active_processors must be nonempty")
    for name in sorted(config.active_processors - known):
        problems.append(f"unknown processor {name!r}")
    if not isinstance(config.work_unit_scale, int) or config.work_unit_scale < 1:
        problems.append("work_unit_scale must be >= 1")
    if not isinstance(config.repetitions, int) or config.repetitions < 1:
        problems.append("repetitions must be >= 1")
    if config.planned_duration_s is not None and not config.planned_duration_s > 0:
        problems.append("planned_duration_s must be > 0 when given")
    if problems:
        raise ConfigError(problems)
    return config


def active_refs(config: ExperimentConfig, env: Environment) -> list[ProcessorRef]:
    validate_config(config, env)
    return [env.processor(n) for n in sorted(config.active_processors)]


# -- serialization -----------------------------------------------------------

def _config_to_dict(c: ExperimentConfig) -> dict[str, Any]:
    return {
        "name": c.name,
        "workload_command": list(c.workload_command),
        "domain_tag": c.domain_tag,
        "work_unit": c.work_unit.value,
        "work_unit_scale": c.work_unit_scale,
        "hyperparameters": dict(c.hyperparameters),
        "active_processors": sorted(c.active_processors),
        "planned_duration_s": c.planned_duration_s,
        "repetitions": c.repetitions,
    }


def _env_to_dict(e: Environment) -> dict[str, Any]:
    return {
        "host_label": e.host_label,
        "co2_efficiency_kg_per_kwh": e.co2_efficiency_kg_per_kwh,
        "processors": [
            {"kind": p.kind.value, "name": p.name, "tdp_watts": p.tdp_watts} for p in e.processors
        ],
    }


def config_from_dict(d: Mapping[str, Any]) -> ExperimentConfig:
    cmd = d.get("workload_command", [])
    if isinstance(cmd, str):
        cmd = cmd.split()
    return ExperimentConfig(
        workload_command=tuple(str(t) for t in cmd),
        active_processors=frozenset(d["active_processors"]),
        domain_tag=d.get("domain_tag", ""),
        work_unit=d.get("work_unit", "inference"),
        work_unit_scale=d.get("work_unit_scale", 1),
        hyperparameters=d.get("hyperparameters") or {},
        planned_duration_s=d.get("planned_duration_s"),
        repetitions=d.get("repetitions", 3),
        name=d.get("name", ""),
    )


def environment_from_dict(d: Mapping[str, Any], tdp_table: Mapping[str, float] | None = None) -> Environment:
    """Build an Environment; processors without ``tdp_watts`` are looked up in ``tdp_table``."""
    procs = []
    for p in d.get("processors", []):
        tdp = p.get("tdp_watts")
        if tdp is None:
            if tdp_table is None or p["name"] not in tdp_table:
                raise ConfigError([f"processor {p['name']!r}: no tdp_watts given and not in TDP table"])
            tdp = tdp_table[p["name"]]
        procs.append(ProcessorRef(p.get("kind", "other"), p["name"], float(tdp)))
    return Environment(tuple(procs), d.get("host_label", ""), float(d.get("co2_efficiency_kg_per_kwh", 0.0)))


def _trace_to_dict(t: PowerTrace) -> dict[str, Any]:
    return {
        "nominal_interval_s": t.nominal_interval_s,
        "missing_reads": t.missing_reads,
        "degraded": t.degraded,
        "samples": [[s.timestamp_s, s.watts, s.source] for s in t.samples],
    }


def _record_to_dict(r: RunRecord) -> dict[str, Any]:
    e = r.energies
    return {
        "schema_version": SCHEMA_VERSION,
        "run_id": r.run_id,
        "series_tag": r.series_tag,
        "config": _config_to_dict(r.config),
        "environment": _env_to_dict(r.environment),
        "started_at": format_instant(r.started_at),
        "ended_at": format_instant(r.ended_at),
        "duration_s": r.duration_s,
        "work_units_completed": r.work_units_completed,
        "failed": r.failed,
        "exit_code": r.exit_code,
        "traces": [_trace_to_dict(t) for t in r.traces],
        "meter_timeline": None if r.meter_timeline is None else {
            "resolution_kwh": r.meter_timeline.resolution_kwh,
            "readings": [
                [format_instant(m.timestamp), m.cumulative_kwh, m.confidence, m.provenance]
                for m in r.meter_timeline.readings
            ],
        },
        "energies": {
            "static_ws": e.static_ws,
            "dynamic_ws": e.dynamic_ws,
            "ground_truth_ws": e.ground_truth_ws,
            "truth_uncertainty_ws": e.truth_uncertainty_ws,
        },
        "dynamic_coverage": r.dynamic_coverage,
        "dynamic_degraded": r.dynamic_degraded,
        "notes": r.notes,
    }


def serialize_run(record: RunRecord) -> bytes:
    """Encode one record as a single UTF-8 JSON line (newline-terminated)."""
    return (json.dumps(_record_to_dict(record), ensure_ascii=False, allow_nan=False) + "\n").encode("utf-8")


class _Fields:
    """Field accessor that names the offending field on failure."""

    def __init__(self, data: Mapping[str, Any], where: str):
        self.data = data
        self.where = where

    def __getitem__(self, key: str) -> Any:
        if not isinstance(self.data, Mapping) or key not in self.data:
            raise RunLogError(f"{self.where}: missing field {key!r}")
        return self.data[key]


def _record_from_dict(d: Any, where: str) -> RunRecord:
    f = _Fields(d, where)
    if f["schema_version"] != SCHEMA_VERSION:
        raise RunLogError(f"{where}: field 'schema_version': unsupported version {d['schema_version']!r}")
    current = "record"
    try:
        current = "config"
        config = config_from_dict(f["config"])
        current = "environment"
        env = environment_from_dict(f["environment"])
        current = "traces"
        traces = tuple(
            PowerTrace(
                tuple(PowerSample(float(t), float(w), str(s)) for t, w, s in tr["samples"]),
                tr["nominal_interval_s"], tr.get("missing_reads", 0), tr.get("degraded", False),
            )
            for tr in f["traces"]
        )
        current = "meter_timeline"
        mt = f["meter_timeline"]
        timeline = None if mt is None else MeterTimeline(
            tuple(MeterReading(parse_instant(ts), kwh, conf, prov) for ts, kwh, conf, prov in mt["readings"]),
            mt["resolution_kwh"],
        )
        current = "energies"
        en = f["energies"]
        energies = EnergyTriple(en["static_ws"], en["dynamic_ws"], en["ground_truth_ws"], en["truth_uncertainty_ws"])
        current = "started_at"
        started = parse_instant(f["started_at"])
        current = "ended_at"
        ended = parse_instant(f["ended_at"])
        current = "record"
        return RunRecord(
            run_id=str(f["run_id"]),
            config=config,
            environment=env,
            started_at=started,
            ended_at=ended,
            duration_s=f["duration_s"],
            work_units_completed=f["work_units_completed"],
            traces=traces,
            energies=energies,
            meter_timeline=timeline,
            notes=f["notes"],
            failed=f["failed"],
            exit_code=f["exit_code"],
            series_tag=f["series_tag"],
            dynamic_coverage=f["dynamic_coverage"],
            dynamic_degraded=f["dynamic_degraded"],
        )
    except RunLogError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise RunLogError(f"{where}: field {current!r}: {exc}") from exc


def deserialize_run(data: bytes | str, lineno: int = 1) -> RunRecord:
    """Decode a single serialized record."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RunLogError(f"line {lineno}: invalid UTF-8: {exc}") from exc
    text = data.strip()
    if not text:
        raise RunLogError(f"line {lineno}: empty input")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RunLogError(f"line {lineno}: malformed record: {exc}") from exc
    return _record_from_dict(obj, f"line {lineno}")


def read_runs(lines: Iterable[bytes | str]) -> Iterator[RunRecord]:
    for lineno, line in enumerate(lines, 1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if line.strip():
            yield deserialize_run(line, lineno)


class RunLog:
    """Append-only line-delimited run log. Single writer, many readers."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: RunRecord) -> None:
        payload = serialize_run(record)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())

    def records(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        with open(self.path, "rb") as fh:
            return list(read_runs(fh))


# -- key-value documents ------------------------------------------------------

def load_document(path: str | os.PathLike) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: expected a key-value document"])
    return data


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    return config_from_dict(load_document(path))


def load_environment(path: str | os.PathLike, tdp_table: Mapping[str, float] | None = None) -> Environment:
    return environment_from_dict(load_document(path), tdp_table)


def ms_after(instant: datetime, seconds: float) -> datetime:
    """``instant + seconds`` at millisecond precision, strictly after ``instant`` when seconds > 0."""
    out = utc_ms(instant + timedelta(seconds=seconds))
    if seconds > 0 and out <= instant:
        out = utc_ms(instant) + timedelta(milliseconds=1)
    return out

