"""Power sampling loop, telemetry backends and trace integration."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, runtime_checkable

from .core import PowerSample, PowerTrace, ProcessorKind, ProcessorRef

log = logging.getLogger(__name__)

DEFAULT_INTERVAL_S = 1.0
MAX_GAP_FACTOR = 5.0


class SamplerUnavailable(RuntimeError):
    """The requested telemetry backend cannot be used on this host."""


class InsufficientTrace(ValueError):
    pass


@runtime_checkable
class SamplerBackend(Protocol):
    def probe(self) -> list[ProcessorRef]: ...

    def read_now(self, processor: str) -> float: ...


class StopSignal(Protocol):
    def is_set(self) -> bool: ...

    def wait(self, timeout: float | None = None) -> bool: ...


def counter_delta(previous: int, current: int, counter_range: int) -> int:
    """Nonnegative difference of a cumulative counter that wraps at ``counter_range``."""
    if counter_range <= 0:
        raise ValueError("counter_range must be > 0")
    return (current - previous) % counter_range


def sample_loop(
    backend: SamplerBackend,
    interval_s: float,
    stop_signal: StopSignal,
    *,
    clock: Callable[[], float] = time.monotonic,
    max_gap_factor: float = MAX_GAP_FACTOR,
) -> PowerTrace:
    """Poll every source of ``backend`` each ``interval_s`` until ``stop_signal`` is set.

    A failed read is counted as missing and the loop carries on. If no source
    could be read for longer than ``max_gap_factor * interval_s`` the trace is
    flagged degraded. One last round of reads is taken after the stop so the
    trace reaches the end of the run.
    """
    if not interval_s > 0:
        raise ValueError("interval_s must be > 0")
    sources = [p.name for p in backend.probe()]
    if not sources:
        raise SamplerUnavailable("backend exposes no processors")

    samples: list[PowerSample] = []
    last_ts: dict[str, float] = {}
    missing = 0
    degraded = False
    t0 = clock()
    last_ok = 0.0

    def read_round():
        nonlocal missing, degraded, last_ok
        any_ok = False
        for name in sources:
            ts = max(clock() - t0, 0.0)
            try:
                watts = float(backend.read_now(name))
            except Exception as exc:  # backend faults must not kill the loop
                log.debug("read of %s failed: %s", name, exc)
                missing += 1
                continue
            if watts < 0:
                missing += 1
                continue
            any_ok = True
            if name in last_ts and ts <= last_ts[name]:
                continue
            samples.append(PowerSample(ts, watts, name))
            last_ts[name] = ts
        now = max(clock() - t0, 0.0)
        if any_ok:
            last_ok = now
        elif now - last_ok > max_gap_factor * interval_s:
            degraded = True

    if stop_signal.is_set():
        read_round()
        return PowerTrace(tuple(samples), interval_s, missing, degraded)

    k = 0
    while True:
        read_round()
        k += 1
        next_t = t0 + k * interval_s
        now = clock()
        if now > next_t:
            # overran one or more slots; resynchronise instead of bursting
            k = int((now - t0) // interval_s) + 1
            next_t = t0 + k * interval_s
        if stop_signal.wait(max(next_t - clock(), 0.0)):
            break
    read_round()
    return PowerTrace(tuple(samples), interval_s, missing, degraded)


@dataclass(frozen=True)
class DynamicEstimate:
    energy_ws: float
    per_source_ws: dict[str, float]
    sample_count: int
    coverage_fraction: float
    per_source_coverage: dict[str, float] = field(default_factory=dict)
    degraded: bool = False
    excluded_sources: tuple[str, ...] = ()


def _integrate_source(
    points: list[PowerSample],
    start_s: float,
    end_s: float,
    max_gap: float,
    rectangle: bool,
) -> tuple[float, float]:
    energy = 0.0
    covered = 0.0
    first, last = points[0], points[-1]
    lead = first.timestamp_s - start_s
    if 0 < lead <= max_gap:
        energy += first.watts * lead
        covered += lead
    for a, b in zip(points, points[1:]):
        dt = b.timestamp_s - a.timestamp_s
        if dt > max_gap:
            continue
        energy += (b.watts if rectangle else 0.5 * (a.watts + b.watts)) * dt
        covered += dt
    tail = end_s - last.timestamp_s
    if 0 < tail <= max_gap:
        energy += last.watts * tail
        covered += tail
    return energy, covered


def integrate_trace(
    trace: PowerTrace,
    duration_s: float,
    *,
    start_s: float = 0.0,
    max_gap_factor: float = MAX_GAP_FACTOR,
    rectangle: bool = False,
) -> DynamicEstimate:
    """Integrate each source of ``trace`` over ``[start_s, duration_s]``.

    Trapezoidal by default; ``rectangle=True`` multiplies each sample by the
    time elapsed since the previous one instead. Gaps wider than
    ``max_gap_factor`` nominal intervals contribute nothing and lower the
    coverage fraction. The first and last values are held out to the run edges.
    """
    span = duration_s - start_s
    if not span > 0:
        raise ValueError("duration_s must exceed start_s")
    tol = 1e-9 * max(abs(duration_s), 1.0)
    max_gap = max_gap_factor * trace.nominal_interval_s

    per_source: dict[str, float] = {}
    coverage: dict[str, float] = {}
    excluded = []
    count = 0
    for source in trace.sources:
        points = trace.for_source(source)
        for p in points:
            if p.timestamp_s < start_s - tol or p.timestamp_s > duration_s + tol:
                raise ValueError(
                    f"sample at {p.timestamp_s} s lies outside [{start_s}, {duration_s}]"
                )
        if len(points) < 2:
            excluded.append(source)
            continue
        energy, covered = _integrate_source(points, start_s, duration_s, max_gap, rectangle)
        per_source[source] = energy
        coverage[source] = min(covered / span, 1.0)
        count += len(points)
    if not per_source:
        raise InsufficientTrace("insufficient trace: no source has at least 2 samples")
    return DynamicEstimate(
        energy_ws=sum(per_source.values()),
        per_source_ws=per_source,
        sample_count=count,
        coverage_fraction=min(coverage.values()),
        per_source_coverage=coverage,
        degraded=bool(excluded) or trace.degraded,
        excluded_sources=tuple(excluded),
    )


def dynamic_estimate(
    traces: Iterable[PowerTrace],
    duration_s: float,
    *,
    max_gap_factor: float = MAX_GAP_FACTOR,
    rectangle: bool = False,
) -> DynamicEstimate:
    """Sum per-source integrals over several traces.

    Succeeds as long as one source integrates; anything that could not be
    integrated is listed in ``excluded_sources`` and marks the result degraded.
    """
    per_source: dict[str, float] = {}
    coverage: dict[str, float] = {}
    excluded: list[str] = []
    count = 0
    degraded = False
    for trace in traces:
        try:
            est = integrate_trace(trace, duration_s, max_gap_factor=max_gap_factor, rectangle=rectangle)
        except InsufficientTrace:
            excluded.extend(trace.sources)
            degraded = True
            continue
        for src, ws in est.per_source_ws.items():
            per_source[src] = per_source.get(src, 0.0) + ws
            coverage[src] = min(coverage.get(src, 1.0), est.per_source_coverage[src])
        excluded.extend(est.excluded_sources)
        degraded = degraded or est.degraded
        count += est.sample_count
    if not per_source:
        raise InsufficientTrace("insufficient trace: no source could be integrated")
    return DynamicEstimate(
        energy_ws=sum(per_source.values()),
        per_source_ws=per_source,
        sample_count=count,
        coverage_fraction=min(coverage.values()),
        per_source_coverage=coverage,
        degraded=degraded,
        excluded_sources=tuple(excluded),
    )


# -- hardware backends --------------------------------------------------------

class RaplBackend:
    """CPU package power from the Linux powercap energy counters."""

    def __init__(self, root: str | os.PathLike = "/sys/class/powercap", clock: Callable[[], float] = time.monotonic):
        self.root = Path(root)
        self.clock = clock
        self._zones: dict[str, Path] = {}
        self._last: dict[str, tuple[int, float]] = {}
        self._lock = threading.Lock()

    def _read_int(self, path: Path) -> int:
        return int(path.read_text().strip())

    def probe(self) -> list[ProcessorRef]:
        if not self.root.is_dir():
            raise SamplerUnavailable(f"{self.root} not present")
        refs = []
        for zone in sorted(self.root.glob("intel-rapl:*")):
            if zone.name.count(":") != 1:
                continue  # subzones (core, dram) are nested under the package
            energy = zone / "energy_uj"
            try:
                value = self._read_int(energy)
            except (OSError, ValueError) as exc:
                raise SamplerUnavailable(f"cannot read {energy}: {exc}") from exc
            name_file = zone / "name"
            name = name_file.read_text().strip() if name_file.exists() else zone.name
            tdp = 1.0
            for limit in ("constraint_0_max_power_uw", "constraint_0_power_limit_uw"):
                try:
                    tdp = self._read_int(zone / limit) / 1e6 or tdp
                    break
                except (OSError, ValueError):
                    pass
            self._zones[name] = zone
            self._last[name] = (value, self.clock())
            refs.append(ProcessorRef(ProcessorKind.CPU, name, tdp))
        if not refs:
            raise SamplerUnavailable("no RAPL package zones found")
        return refs

    def read_now(self, processor: str) -> float:
        zone = self._zones[processor]
        with self._lock:
            value = self._read_int(zone / "energy_uj")
            now = self.clock()
            try:
                counter_range = self._read_int(zone / "max_energy_range_uj")
            except (OSError, ValueError):
                counter_range = 2**32
            prev_value, prev_t = self._last[processor]
            self._last[processor] = (value, now)
        dt = now - prev_t
        if dt <= 0:
            raise RuntimeError("no time elapsed since previous read")
        return counter_delta(prev_value, value, counter_range) / 1e6 / dt


class NvmlBackend:
    """GPU board power through NVIDIA's management library (pynvml)."""

    def __init__(self):
        try:
            import pynvml
        except ImportError as exc:
            raise SamplerUnavailable("pynvml is not installed") from exc
        self._nvml = pynvml
        try:
            pynvml.nvmlInit()
        except Exception as exc:
            raise SamplerUnavailable(f"NVML init failed: {exc}") from exc
        self._handles: dict[str, object] = {}

    def probe(self) -> list[ProcessorRef]:
        nv = self._nvml
        refs = []
        for i in range(nv.nvmlDeviceGetCount()):
            h = nv.nvmlDeviceGetHandleByIndex(i)
            name = f"gpu{i}"
            try:
                limit_w = nv.nvmlDeviceGetEnforcedPowerLimit(h) / 1000.0
            except Exception:
                limit_w = 1.0
            self._handles[name] = h
            refs.append(ProcessorRef(ProcessorKind.GPU, name, limit_w or 1.0))
        return refs

    def read_now(self, processor: str) -> float:
        return self._nvml.nvmlDeviceGetPowerUsage(self._handles[processor]) / 1000.0


class CombinedBackend:
    """Several backends exposed as one; processor names must not collide."""

    def __init__(self, backends: Iterable[SamplerBackend]):
        self.backends = list(backends)
        self._owner: dict[str, SamplerBackend] = {}

    def probe(self) -> list[ProcessorRef]:
        refs = []
        for b in self.backends:
            for ref in b.probe():
                if ref.name in self._owner:
                    raise ValueError(f"duplicate processor name {ref.name!r}")
                self._owner[ref.name] = b
                refs.append(ref)
        return refs

    def read_now(self, processor: str) -> float:
        return self._owner[processor].read_now(processor)


HARDWARE_BACKENDS: dict[str, Callable[[], SamplerBackend]] = {
    "rapl": RaplBackend,
    "nvml": NvmlBackend,
}
