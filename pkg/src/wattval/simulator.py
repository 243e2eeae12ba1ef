"""Synthetic environments with closed-form power, for oracle testing.

True system power is ``P(t) = idle_w + u(t) * (max_w - idle_w)`` plus an
optional constant ``overhead_w``. Software samplers only see
``sampled_fraction * P(t)`` (plus Gaussian jitter); the simulated meter sees
everything.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Callable, Mapping

import numpy as np

from .core import WS_PER_KWH, MeterReading, ProcessorKind, ProcessorRef, utc_ms
from .meter import DisplayLayout, MeterFrame, render_display
from .runner import SimulatedWorkload, VirtualClock

DEFAULT_EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)

PROFILE_KINDS = ("constant", "ramp", "sinusoid", "square")


@dataclass(frozen=True)
class UtilizationProfile:
    """Utilization u(t) in [0, 1].

    constant: ``level``; ramp: ``start`` to ``end`` over ``ramp_s`` seconds,
    then held; sinusoid: ``mean + amplitude * sin(2 pi t / period_s + phase)``;
    square: ``high`` for the first ``duty`` of every period, ``low`` after.
    """

    kind: str = "constant"
    params: Mapping[str, float] = field(default_factory=dict)

    DEFAULTS = {
        "constant": {"level": 1.0},
        "ramp": {"start": 0.0, "end": 1.0, "ramp_s": 100.0},
        "sinusoid": {"mean": 0.5, "amplitude": 0.4, "period_s": 20.0, "phase": 0.0},
        "square": {"low": 0.2, "high": 0.9, "period_s": 20.0, "duty": 0.5},
    }

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"unknown utilization profile {self.kind!r}")
        merged = dict(self.DEFAULTS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        object.__setattr__(self, "params", merged)
        p = merged
        if self.kind == "constant":
            bounds = [p["level"]]
        elif self.kind == "ramp":
            bounds = [p["start"], p["end"]]
            if not p["ramp_s"] > 0:
                raise ValueError("ramp_s must be > 0")
        elif self.kind == "sinusoid":
            bounds = [p["mean"] - abs(p["amplitude"]), p["mean"] + abs(p["amplitude"])]
            if not p["period_s"] > 0:
                raise ValueError("period_s must be > 0")
        else:
            bounds = [p["low"], p["high"]]
            if not p["period_s"] > 0 or not 0 <= p["duty"] <= 1:
                raise ValueError("square wave needs period_s > 0 and duty in [0, 1]")
        if min(bounds) < -1e-12 or max(bounds) > 1 + 1e-12:
            raise ValueError(f"{self.kind} profile leaves [0, 1]")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.kind == "constant":
            return np.full_like(t, p["level"])
        if self.kind == "ramp":
            frac = np.clip(t / p["ramp_s"], 0.0, 1.0)
            return p["start"] + (p["end"] - p["start"]) * frac
        if self.kind == "sinusoid":
            return p["mean"] + p["amplitude"] * np.sin(2 * np.pi * t / p["period_s"] + p["phase"])
        phase = np.mod(t, p["period_s"]) / p["period_s"]
        return np.where(phase < p["duty"], p["high"], p["low"])

    def cumulative(self, t: float) -> float:
        """Closed-form integral of u from 0 to ``t`` (t >= 0)."""
        p = self.params
        if self.kind == "constant":
            return p["level"] * t
        if self.kind == "ramp":
            r = p["ramp_s"]
            if t <= r:
                return p["start"] * t + 0.5 * (p["end"] - p["start"]) * t * t / r
            return 0.5 * (p["start"] + p["end"]) * r + p["end"] * (t - r)
        if self.kind == "sinusoid":
            w = 2 * math.pi / p["period_s"]
            return p["mean"] * t - p["amplitude"] / w * (math.cos(w * t + p["phase"]) - math.cos(p["phase"]))
        period, duty = p["period_s"], p["duty"]
        full, rest = divmod(t, period)
        per_period = period * (duty * p["high"] + (1 - duty) * p["low"])
        high_part = min(rest, duty * period)
        return full * per_period + high_part * p["high"] + (rest - high_part) * p["low"]


@dataclass(frozen=True)
class PowerModel:
    idle_w: float = 50.0
    max_w: float = 450.0
    utilization_profile: UtilizationProfile = field(default_factory=UtilizationProfile)
    sampled_fraction: float = 1.0
    jitter_std_w: float = 0.0
    seed: int = 0
    overhead_w: float = 0.0

    def __post_init__(self):
        if not self.idle_w >= 0:
            raise ValueError("idle_w must be >= 0")
        if not self.max_w > self.idle_w:
            raise ValueError("max_w must exceed idle_w")
        if not 0 < self.sampled_fraction <= 1:
            raise ValueError("sampled_fraction must lie in (0, 1]")
        if not self.jitter_std_w >= 0 or not self.overhead_w >= 0:
            raise ValueError("jitter_std_w and overhead_w must be >= 0")

    def component_power(self, t):
        """Power of the components a software sampler can attribute."""
        return self.idle_w + self.utilization_profile(t) * (self.max_w - self.idle_w)

    def true_power(self, t):
        return self.component_power(t) + self.overhead_w

    def visible_power(self, t):
        return self.sampled_fraction * self.component_power(t)

    def component_energy(self, t0: float, t1: float) -> float:
        u = self.utilization_profile
        span = self.max_w - self.idle_w
        return self.idle_w * (t1 - t0) + span * (u.cumulative(t1) - u.cumulative(t0))

    def true_energy(self, t0: float, t1: float) -> float:
        """Closed-form energy in Ws between run times ``t0`` and ``t1``."""
        return self.component_energy(t0, t1) + self.overhead_w * (t1 - t0)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PowerModel:
        kw = dict(d)
        prof = kw.pop("utilization_profile", None) or {"kind": "constant"}
        if isinstance(prof, str):
            prof = {"kind": prof}
        prof = dict(prof)
        kind = prof.pop("kind", "constant")
        params = prof.pop("params", prof)
        return cls(utilization_profile=UtilizationProfile(kind, params), **kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "idle_w": self.idle_w,
            "max_w": self.max_w,
            "utilization_profile": {"kind": self.utilization_profile.kind, **self.utilization_profile.params},
            "sampled_fraction": self.sampled_fraction,
            "jitter_std_w": self.jitter_std_w,
            "seed": self.seed,
            "overhead_w": self.overhead_w,
        }


class SimulatedBackend:
    """Sampler backend serving the model's visible power at the clock's current time."""

    def __init__(
        self,
        model: PowerModel,
        clock: Callable[[], float],
        processor: ProcessorRef | None = None,
    ):
        self.model = model
        self.clock = clock
        self.origin = clock()
        self.processor = processor or ProcessorRef(ProcessorKind.GPU, "sim-gpu", model.max_w)
        self._rng = np.random.default_rng(model.seed)
        self._lock = threading.Lock()

    def probe(self) -> list[ProcessorRef]:
        return [self.processor]

    def read_now(self, processor: str) -> float:
        if processor != self.processor.name:
            raise KeyError(processor)
        t = self.clock() - self.origin
        watts = float(self.model.visible_power(t))
        if self.model.jitter_std_w:
            with self._lock:
                watts += float(self._rng.normal(0.0, self.model.jitter_std_w))
        return max(watts, 0.0)


@dataclass(frozen=True)
class SimulatedMeter:
    resolution_kwh: float = 0.01
    frame_rate_hz: float = 1.0
    render_noise_std: float = 0.0
    initial_kwh: float = 12.34
    max_rotation_deg: float = 0.0
    lead_s: float = 2.0
    layout: DisplayLayout = field(default_factory=DisplayLayout)

    def __post_init__(self):
        if not self.resolution_kwh > 0 or not self.frame_rate_hz > 0:
            raise ValueError("resolution_kwh and frame_rate_hz must be > 0")

    def cumulative_kwh(self, model: PowerModel, t: float, duration_s: float) -> float:
        """Quantized display value at run time ``t``; the host idles outside the run."""
        idle = model.idle_w + model.overhead_w
        if t < 0:
            ws = idle * t
        elif t <= duration_s:
            ws = model.true_energy(0.0, t)
        else:
            ws = model.true_energy(0.0, duration_s) + idle * (t - duration_s)
        exact = self.initial_kwh + ws / WS_PER_KWH
        steps = math.floor(exact / self.resolution_kwh + 1e-9)
        return round(steps * self.resolution_kwh, 12)

    def sample_times(self, duration_s: float) -> np.ndarray:
        step = 1.0 / self.frame_rate_hz
        first = -math.ceil(self.lead_s / step)
        last = math.ceil((duration_s + self.lead_s) / step)
        return np.arange(first, last + 1) * step

    def readings(self, model: PowerModel, duration_s: float, start: datetime) -> list[MeterReading]:
        start = utc_ms(start)
        return [
            MeterReading(start + timedelta(seconds=float(t)),
                         self.cumulative_kwh(model, float(t), duration_s), 1.0, "file")
            for t in self.sample_times(duration_s)
        ]

    def frames(self, model: PowerModel, duration_s: float, start: datetime, seed: int = 0) -> list[MeterFrame]:
        rng = np.random.default_rng(seed)
        out = []
        for r in self.readings(model, duration_s, start):
            rot = rng.uniform(-self.max_rotation_deg, self.max_rotation_deg) if self.max_rotation_deg else 0.0
            pixels = render_display(
                self.layout.digits_of(r.cumulative_kwh), self.layout,
                noise_std=self.render_noise_std, rotation_deg=rot, rng=rng,
            )
            out.append(MeterFrame(r.timestamp, pixels))
        return out


@dataclass
class SimulatedRun:
    truth_ws: float
    backend: SimulatedBackend
    clock: VirtualClock
    workload: SimulatedWorkload
    readings: list[MeterReading] | None = None
    frames: list[MeterFrame] | None = None
    layout: DisplayLayout | None = None


def simulate_run(
    model: PowerModel,
    duration_s: float,
    *,
    meter: SimulatedMeter | None = None,
    evidence: str = "readings",
    start: datetime = DEFAULT_EPOCH,
    work_units: int = 0,
) -> SimulatedRun:
    """Analytic truth plus the three instruments for one synthetic run.

    The returned clock starts at 0 at ``start``; the backend and workload are
    bound to it, so feeding them to :func:`wattval.runner.execute_run` with
    that clock replays the run in virtual time.
    """
    if not duration_s > 0:
        raise ValueError("duration_s must be > 0")
    if evidence not in ("readings", "frames", "none"):
        raise ValueError(f"unknown evidence kind {evidence!r}")
    clock = VirtualClock(start)
    run = SimulatedRun(
        truth_ws=model.true_energy(0.0, duration_s),
        backend=SimulatedBackend(model, clock.monotonic),
        clock=clock,
        workload=SimulatedWorkload(duration_s, work_units),
    )
    if meter is not None and evidence != "none":
        run.layout = meter.layout
        if evidence == "readings":
            run.readings = meter.readings(model, duration_s, start)
        else:
            run.frames = meter.frames(model, duration_s, start, seed=model.seed)
    return run


def expected_dynamic_error(model: PowerModel, duration_s: float | None = None) -> float:
    """Relative error an ideal dynamic estimator makes under ``model``.

    Equal to ``sampled_fraction - 1`` when there is no additive overhead;
    with ``overhead_w`` the answer depends on the run length.
    """
    if model.jitter_std_w:
        raise ValueError("expected error is defined for jitter-free models only")
    if not model.overhead_w:
        return model.sampled_fraction - 1.0
    if duration_s is None:
        raise ValueError("duration_s is required when overhead_w > 0")
    seen = model.sampled_fraction * model.component_energy(0.0, duration_s)
    return seen / model.true_energy(0.0, duration_s) - 1.0
