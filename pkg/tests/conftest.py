from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import strategies as st

from wattval.core import (
    EnergyTriple,
    Environment,
    ExperimentConfig,
    MeterReading,
    MeterTimeline,
    PowerSample,
    PowerTrace,
    ProcessorRef,
    RunRecord,
)

EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)


@pytest.fixture
def env():
    return Environment(
        (ProcessorRef("gpu", "rtx4090", 300.0), ProcessorRef("cpu", "i9-13900k", 125.0)),
        "workstation",
        0.38,
    )


@pytest.fixture
def gpu_config():
    return ExperimentConfig(("python", "infer.py"), frozenset({"rtx4090"}), domain_tag="vision",
                            work_unit_scale=1000, hyperparameters={"batch_size": "32"}, name="resnet50")


def make_record(
    energies: EnergyTriple,
    *,
    duration_s: float = 120.0,
    work_units: int = 1000,
    config: ExperimentConfig | None = None,
    environment: Environment | None = None,
    series_tag: str | None = None,
    run_id: str = "r",
) -> RunRecord:
    environment = environment or Environment((ProcessorRef("gpu", "g", 300.0), ProcessorRef("cpu", "c", 125.0)), "h", 0.38)
    config = config or ExperimentConfig(("w",), frozenset({"g"}), name="m", work_unit_scale=1000)
    return RunRecord(
        run_id=run_id,
        config=config,
        environment=environment,
        started_at=EPOCH,
        ended_at=EPOCH + timedelta(seconds=duration_s),
        duration_s=duration_s,
        work_units_completed=work_units,
        traces=(),
        energies=energies,
        series_tag=series_tag,
    )


finite = dict(allow_nan=False, allow_infinity=False)
names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FFF), min_size=1, max_size=12)
words = st.text(max_size=20)
time_s = st.floats(0, 1e6, **finite)
power_w = st.floats(0, 5000, **finite)


@st.composite
def run_records(draw, max_samples: int = 50) -> RunRecord:
    procs = draw(st.lists(
        st.builds(ProcessorRef, st.sampled_from(["cpu", "gpu", "other"]), names,
                  st.floats(0.1, 2000, **finite)),
        min_size=1, max_size=3, unique_by=lambda p: p.name,
    ))
    env = Environment(tuple(procs), draw(words), draw(st.floats(0, 2, **finite)))
    active = draw(st.sets(st.sampled_from([p.name for p in procs]), min_size=1))
    config = ExperimentConfig(
        workload_command=tuple(draw(st.lists(words, max_size=4))),
        active_processors=frozenset(active),
        domain_tag=draw(words),
        work_unit=draw(st.sampled_from(["inference", "query"])),
        work_unit_scale=draw(st.integers(1, 10_000)),
        hyperparameters=draw(st.dictionaries(names, words, max_size=3)),
        planned_duration_s=draw(st.none() | st.floats(0.001, 1e5, **finite)),
        repetitions=draw(st.integers(1, 10)),
        name=draw(names),
    )
    start = EPOCH + timedelta(milliseconds=draw(st.integers(0, 10**10)))
    duration_ms = draw(st.integers(1, 10**7))
    duration = duration_ms / 1000 + draw(st.floats(-0.4, 0.4, **finite))
    duration = max(duration, 0.001)
    sources = [p.name for p in procs]
    n = draw(st.integers(0, max_samples))
    ts = sorted(set(draw(st.lists(time_s, min_size=n, max_size=n))))
    watts = draw(st.lists(power_w, min_size=len(ts) * len(sources), max_size=len(ts) * len(sources)))
    present = draw(st.lists(st.booleans(), min_size=len(watts), max_size=len(watts)))
    samples = []
    for i, t in enumerate(ts):
        row = range(i * len(sources), (i + 1) * len(sources))
        # every timestamp carries at least its first source
        samples += [PowerSample(t, watts[k], sources[j]) for j, k in enumerate(row) if j == 0 or present[k]]
    traces = (PowerTrace(tuple(samples), draw(st.floats(0.01, 10, **finite))),) if samples else ()
    has_truth = draw(st.booleans())
    energies = EnergyTriple(
        draw(st.floats(0, 1e12, **finite)),
        draw(st.none() | st.floats(0, 1e12, **finite)),
        draw(st.floats(0, 1e12, **finite)) if has_truth else None,
        draw(st.floats(0, 1e9, **finite)) if has_truth else None,
    )
    timeline = None
    if draw(st.booleans()):
        k = draw(st.integers(1, 5))
        vals = sorted(draw(st.lists(st.floats(0, 1e5, **finite), min_size=k, max_size=k)))
        timeline = MeterTimeline(
            tuple(MeterReading(start + timedelta(seconds=i), v, draw(st.floats(0, 1, **finite)),
                               draw(st.sampled_from(["ocr", "manual", "file"])))
                  for i, v in enumerate(vals)),
            draw(st.floats(1e-6, 1, **finite)),
        )
    return RunRecord(
        run_id=draw(names),
        config=config,
        environment=env,
        started_at=start,
        ended_at=start + timedelta(milliseconds=duration_ms),
        duration_s=duration,
        work_units_completed=draw(st.integers(0, 10**9)),
        traces=traces,
        energies=energies,
        meter_timeline=timeline,
        notes=draw(words),
        failed=draw(st.booleans()),
        exit_code=draw(st.none() | st.integers(-255, 255)),
        series_tag=draw(st.none() | names),
        dynamic_coverage=draw(st.none() | st.floats(0, 1, **finite)),
        dynamic_degraded=draw(st.booleans()),
    )
