"""Run orchestration: workload, sampling loop, meter ingestion, persistence."""

from __future__ import annotations

import logging
import re
import secrets
import subprocess
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Sequence, Union

from .core import (
    EnergyTriple,
    Environment,
    ExperimentConfig,
    PowerTrace,
    RunLog,
    RunRecord,
    ms_after,
    new_run_id,
    utc_ms,
    validate_config,
)
from .meter import (
    DisplayLayout,
    MeterFrame,
    build_timeline,
    ground_truth_energy,
    load_frames,
    read_frames,
    read_reading_file,
)
from .sampling import (
    DEFAULT_INTERVAL_S,
    HARDWARE_BACKENDS,
    InsufficientTrace,
    SamplerBackend,
    SamplerUnavailable,
    dynamic_estimate,
    sample_loop,
)
from .static import static_estimate

log = logging.getLogger(__name__)

PROGRESS_RE = re.compile(r"\bwork_units=(\d+)\b")
MIN_DURATION_S = 1e-3


# -- clocks -------------------------------------------------------------------

class RealClock:
    def monotonic(self) -> float:
        return time.monotonic()

    def wallclock(self) -> datetime:
        return datetime.now(timezone.utc)


class VirtualClock:
    """Deterministic clock that only moves when something waits on it."""

    def __init__(self, epoch: datetime = datetime(2025, 1, 1, tzinfo=timezone.utc)):
        self.epoch = utc_ms(epoch)
        self.now = 0.0
        self._lock = threading.Lock()

    def monotonic(self) -> float:
        return self.now

    __call__ = monotonic

    def advance(self, seconds: float) -> None:
        with self._lock:
            self.now += seconds

    def wallclock(self) -> datetime:
        return self.epoch + timedelta(seconds=self.now)


class VirtualStop:
    """Stop signal that fires when a :class:`VirtualClock` reaches ``at``."""

    def __init__(self, clock: VirtualClock, at: float):
        self.clock = clock
        self.at = at

    def set(self) -> None:
        self.at = min(self.at, self.clock.now)

    def is_set(self) -> bool:
        return self.clock.now >= self.at

    def wait(self, timeout: float | None = None) -> bool:
        target = self.at if timeout is None else self.clock.now + timeout
        if target >= self.at:
            self.clock.now = max(self.clock.now, self.at)
            return True
        self.clock.now = target
        return False


# -- workloads ------------------------------------------------------------------

class WorkCounter:
    """Completed work units as reported by the workload; never decreases."""

    def __init__(self):
        self._completed = 0
        self._lock = threading.Lock()

    @property
    def completed(self) -> int:
        return self._completed

    def update(self, n: int) -> None:
        with self._lock:
            self._completed = max(self._completed, int(n))

    def feed(self, line: str) -> None:
        m = PROGRESS_RE.search(line)
        if m:
            self.update(int(m.group(1)))


@dataclass
class WorkloadHandle:
    done: object
    counter: WorkCounter = field(default_factory=WorkCounter)
    returncode: int | None = None
    _finish: Callable[[], None] | None = None

    def finish(self) -> None:
        if self._finish is not None:
            self._finish()


class SubprocessWorkload:
    """Runs a command; ``work_units=<n>`` lines on its stdout update the counter."""

    def __init__(self, command: Sequence[str], cwd: str | None = None, echo: bool = False):
        self.command = list(command)
        self.cwd = cwd
        self.echo = echo

    def start(self, clock) -> WorkloadHandle:
        done = threading.Event()
        handle = WorkloadHandle(done)
        try:
            proc = subprocess.Popen(
                self.command, cwd=self.cwd, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", errors="replace",
            )
        except OSError as exc:
            log.error("could not launch %s: %s", self.command, exc)
            handle.returncode = 127
            done.set()
            return handle

        def pump():
            for line in proc.stdout:
                if self.echo:
                    print(line, end="")
                handle.counter.feed(line)
            handle.returncode = proc.wait()
            done.set()

        reader = threading.Thread(target=pump, name="workload-stdout", daemon=True)
        reader.start()
        handle._finish = reader.join
        return handle


class SimulatedWorkload:
    """Occupies ``duration_s`` of (virtual or real) time, then reports its units."""

    def __init__(self, duration_s: float, work_units: int = 0, exit_code: int = 0):
        self.duration_s = duration_s
        self.work_units = work_units
        self.exit_code = exit_code

    def start(self, clock) -> WorkloadHandle:
        if isinstance(clock, VirtualClock):
            done = VirtualStop(clock, clock.now + self.duration_s)
        else:
            done = threading.Event()
            timer = threading.Timer(self.duration_s, done.set)
            timer.daemon = True
            timer.start()
        handle = WorkloadHandle(done)

        def finish():
            handle.counter.update(self.work_units)
            handle.returncode = self.exit_code

        handle._finish = finish
        return handle


Workload = Union[SubprocessWorkload, SimulatedWorkload]


# -- plans ------------------------------------------------------------------------

@dataclass
class MeterSource:
    """Where ground-truth evidence comes from.

    ``kind`` is ``"frames"`` (directory or manifest of images), ``"file"``
    (two-column reading file) or ``"memory"`` (``readings`` / ``frames``
    already in hand, as produced by the simulator).
    """

    kind: str
    path: Path | None = None
    readings: list | None = None
    frames: list[MeterFrame] | None = None

    def load_readings(self, layout: DisplayLayout | None):
        if self.kind == "file":
            return read_reading_file(self.path)
        if self.kind == "frames":
            return read_frames(load_frames(self.path), layout or DisplayLayout())
        if self.kind == "memory":
            readings = list(self.readings or [])
            if self.frames:
                readings += read_frames(self.frames, layout or DisplayLayout())
            return readings
        raise ValueError(f"unknown meter source kind {self.kind!r}")


@dataclass
class RunPlan:
    config: ExperimentConfig
    env: Environment
    sampler_choice: str = "simulated"
    meter_source: MeterSource | None = None
    output_log: Path | None = None
    interval_s: float = DEFAULT_INTERVAL_S
    rectangle: bool = False
    allow_static_only: bool = False
    clock_offset_s: float = 0.0
    layout: DisplayLayout | None = None
    resolution_kwh: float = 0.01
    max_step_kwh: float | None = None
    sim_model: object | None = None


def resolve_backend(plan: RunPlan, clock) -> SamplerBackend | None:
    """Instantiate the plan's sampler, or None when static-only runs are allowed."""
    try:
        if plan.sampler_choice == "simulated":
            from .simulator import PowerModel, SimulatedBackend

            model = plan.sim_model if plan.sim_model is not None else PowerModel()
            backend = SimulatedBackend(model, clock.monotonic)
        elif plan.sampler_choice in HARDWARE_BACKENDS:
            backend = HARDWARE_BACKENDS[plan.sampler_choice]()
        else:
            raise SamplerUnavailable(f"unknown sampler {plan.sampler_choice!r}")
        backend.probe()
        return backend
    except SamplerUnavailable as exc:
        if plan.allow_static_only:
            log.warning("sampler unavailable (%s); continuing with static estimate only", exc)
            return None
        raise


def execute_run(
    plan: RunPlan,
    *,
    workload: Workload | None = None,
    backend: SamplerBackend | None = None,
    clock=None,
    series_tag: str | None = None,
) -> RunRecord:
    """Run the workload once with all three quantification paths and persist the record."""
    config = validate_config(plan.config, plan.env)
    clock = clock or RealClock()
    workload = workload or SubprocessWorkload(config.workload_command)
    if backend is None:
        backend = resolve_backend(plan, clock)
    notes = []

    started_at = utc_ms(clock.wallclock())
    t0 = clock.monotonic()
    handle = workload.start(clock)
    if backend is not None:
        trace = sample_loop(backend, plan.interval_s, handle.done, clock=clock.monotonic)
    else:
        trace = None
        handle.done.wait()
    handle.finish()
    duration = clock.monotonic() - t0
    if trace is not None and trace.samples:
        duration = max(duration, max(s.timestamp_s for s in trace.samples))
    duration = max(duration, MIN_DURATION_S)
    ended_at = ms_after(started_at, duration)

    static = static_estimate(config, plan.env, duration)

    dynamic_ws = coverage = None
    degraded = False
    traces: tuple[PowerTrace, ...] = ()
    if trace is not None:
        traces = (trace,)
        try:
            dyn = dynamic_estimate(traces, duration, rectangle=plan.rectangle)
            dynamic_ws, coverage, degraded = dyn.energy_ws, dyn.coverage_fraction, dyn.degraded
            if dyn.excluded_sources:
                notes.append("excluded sources: " + ", ".join(dyn.excluded_sources))
        except InsufficientTrace as exc:
            degraded = True
            notes.append(str(exc))
    else:
        notes.append("static only: no sampler")

    truth = uncertainty = None
    timeline = None
    if plan.meter_source is not None:
        try:
            readings = plan.meter_source.load_readings(plan.layout)
            timeline = build_timeline(readings, plan.resolution_kwh, max_step_kwh=plan.max_step_kwh)
            offset = timedelta(seconds=plan.clock_offset_s)
            truth, uncertainty = ground_truth_energy(timeline, started_at + offset, ended_at + offset)
        except (OSError, ValueError) as exc:
            log.warning("meter ingestion failed: %s", exc)
            notes.append(f"meter ingestion failed: {exc}")
            truth = uncertainty = None

    failed = handle.returncode != 0
    if failed:
        notes.append(f"workload exited with status {handle.returncode}")
    record = RunRecord(
        run_id=new_run_id(started_at),
        config=config,
        environment=plan.env,
        started_at=started_at,
        ended_at=ended_at,
        duration_s=duration,
        work_units_completed=handle.counter.completed,
        traces=traces,
        energies=EnergyTriple(static.energy_ws, dynamic_ws, truth, uncertainty),
        meter_timeline=timeline,
        notes="; ".join(notes),
        failed=failed,
        exit_code=handle.returncode,
        series_tag=series_tag,
        dynamic_coverage=coverage,
        dynamic_degraded=degraded,
    )
    if plan.output_log is not None:
        RunLog(plan.output_log).append(record)
    return record


def execute_series(
    plan: RunPlan,
    *,
    workload: Workload | Sequence[Workload] | None = None,
    backend: SamplerBackend | None = None,
    clock=None,
) -> list[RunRecord]:
    """``config.repetitions`` back-to-back runs sharing one series tag.

    ``workload`` may be a sequence with one workload per repetition. A failed
    run is recorded and the series moves on; only log write errors abort it.
    """
    config = validate_config(plan.config, plan.env)
    clock = clock or RealClock()
    if backend is None:
        backend = resolve_backend(plan, clock)
    if workload is None or not isinstance(workload, Sequence):
        workloads = [workload] * config.repetitions
    else:
        workloads = list(workload)
        if len(workloads) != config.repetitions:
            raise ValueError("need one workload per repetition")
    tag = "series-" + secrets.token_hex(4)
    records = []
    for i, w in enumerate(workloads):
        log.info("series %s: run %d/%d", tag, i + 1, len(workloads))
        records.append(execute_run(plan, workload=w, backend=backend, clock=clock, series_tag=tag))
    return records
