"""Cumulative meter timelines and ground-truth energy differencing."""

from __future__ import annotations

import bisect
import logging
import os
import statistics
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..core import WS_PER_KWH, MeterReading, MeterTimeline, epoch_to_instant, utc_ms
from .ocr import DisplayLayout, MeterFrame, read_frame

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION_KWH = 0.01


class TimelineError(ValueError):
    pass


class CoverageError(ValueError):
    pass


def _t(r: MeterReading) -> float:
    return r.timestamp.timestamp()


def _extrapolate(edge: MeterReading, near: MeterReading, far: MeterReading) -> float:
    span = _t(far) - _t(near)
    slope = (far.cumulative_kwh - near.cumulative_kwh) / span if span else 0.0
    return near.cumulative_kwh + slope * (_t(edge) - _t(near))


def _longest_nondecreasing(readings: Sequence[MeterReading]) -> list[MeterReading]:
    """Largest subset of time-ordered readings whose values never decrease."""
    tails: list[float] = []
    tail_idx: list[int] = []
    parent = [-1] * len(readings)
    for i, r in enumerate(readings):
        k = bisect.bisect_right(tails, r.cumulative_kwh)
        if k == len(tails):
            tails.append(r.cumulative_kwh)
            tail_idx.append(i)
        else:
            tails[k] = r.cumulative_kwh
            tail_idx[k] = i
        parent[i] = tail_idx[k - 1] if k else -1
    out = []
    i = tail_idx[-1] if tail_idx else -1
    while i >= 0:
        out.append(readings[i])
        i = parent[i]
    return out[::-1]


def build_timeline(
    readings: Iterable[MeterReading],
    resolution_kwh: float = DEFAULT_RESOLUTION_KWH,
    *,
    max_step_kwh: float | None = None,
) -> MeterTimeline:
    """Clean raw readings into a non-decreasing timeline.

    Voting over 3-frame windows: an interior reading survives only if it is
    within one display step of the median of itself and its two neighbours.
    The first and last readings have one neighbour, so they are voted on
    afterwards against the two nearest surviving interior readings, with a
    linear extrapolation from those standing in for the missing neighbour and
    two display steps of slack. Of the survivors, the longest non-decreasing
    subsequence is kept, minus any reading that jumps more than
    ``max_step_kwh`` past the previous kept one.
    """
    ordered = sorted(readings, key=lambda r: r.timestamp)
    n = len(ordered)
    tol = resolution_kwh * (1 + 1e-9)

    def outvoted(r: MeterReading, window: tuple[float, float], slack: float) -> bool:
        med = statistics.median((r.cumulative_kwh, *window))
        if abs(r.cumulative_kwh - med) > slack:
            log.debug("reading %s at %s outvoted (median %s)", r.cumulative_kwh, r.timestamp, med)
            return True
        return False

    interior = [
        r for i, r in enumerate(ordered[1:-1], start=1)
        if not outvoted(r, (ordered[i - 1].cumulative_kwh, ordered[i + 1].cumulative_kwh), tol)
    ]
    voted = list(interior)
    if n >= 2:
        for edge, near, far, place in (
            (ordered[0], 0, 1, 0),
            (ordered[-1], -1, -2, len(voted) + 1),
        ):
            if len(interior) >= 2:
                a, b = interior[near], interior[far]
                if outvoted(edge, (a.cumulative_kwh, _extrapolate(edge, a, b)), 2 * tol):
                    continue
            voted.insert(min(place, len(voted)), edge)
    else:
        voted = ordered

    kept: list[MeterReading] = []
    for r in _longest_nondecreasing(voted):
        if kept and max_step_kwh is not None and r.cumulative_kwh - kept[-1].cumulative_kwh > max_step_kwh:
            continue
        kept.append(r)
    if not kept:
        raise TimelineError("empty timeline: no reading survived")
    return MeterTimeline(tuple(kept), resolution_kwh)


def ground_truth_energy(timeline: MeterTimeline, start: datetime, end: datetime) -> tuple[float, float]:
    """Energy between ``start`` and ``end`` in Ws, with its +/- uncertainty.

    Uses the last reading at or before ``start`` and the first at or after
    ``end``; each endpoint contributes one display step of uncertainty.
    """
    start, end = utc_ms(start), utc_ms(end)
    if not end > start:
        raise ValueError("end must be after start")
    before = [r for r in timeline.readings if r.timestamp <= start]
    after = [r for r in timeline.readings if r.timestamp >= end]
    if not before or not after:
        raise CoverageError(
            f"meter timeline {timeline.readings[0].timestamp} .. {timeline.readings[-1].timestamp} "
            f"does not cover {start} .. {end}"
        )
    delta_kwh = after[0].cumulative_kwh - before[-1].cumulative_kwh
    return delta_kwh * WS_PER_KWH, 2 * timeline.resolution_kwh * WS_PER_KWH


# -- file formats -----------------------------------------------------------------

def read_reading_file(path: str | os.PathLike) -> list[MeterReading]:
    """Two-column text file: epoch seconds, cumulative kWh."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<epoch seconds> <kWh>'")
            out.append(MeterReading(epoch_to_instant(float(parts[0])), float(parts[1]), 1.0, "file"))
    return out


def write_reading_file(path: str | os.PathLike, readings: Sequence[MeterReading]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# epoch_seconds kwh\n")
        for r in readings:
            fh.write(f"{r.timestamp.timestamp():.3f} {r.cumulative_kwh!r}\n")


def write_frames(directory: str | os.PathLike, frames: Sequence[MeterFrame], ext: str = "png") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for f in frames:
        millis = int(round(f.timestamp.timestamp() * 1000))
        Image.fromarray(np.asarray(f.pixels, dtype=np.uint8), mode="L").save(d / f"{millis}.{ext}")


def _load_pixels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def load_frames(source: str | os.PathLike) -> list[MeterFrame]:
    """Frames from a directory of ``<epoch_millis>.<ext>`` images or a manifest file.

    A manifest has one ``<filename>,<epoch_millis>`` pair per line, relative
    to the manifest's directory.
    """
    src = Path(source)
    entries: list[tuple[Path, int]] = []
    if src.is_dir():
        for p in sorted(src.iterdir()):
            if p.is_file() and p.stem.isdigit():
                entries.append((p, int(p.stem)))
    else:
        with open(src, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = [t.strip() for t in line.split(",")]
                if len(parts) != 2:
                    raise ValueError(f"{src}:{lineno}: expected '<filename>,<epoch_millis>'")
                entries.append((src.parent / parts[0], int(parts[1])))
    return [MeterFrame(epoch_to_instant(ms / 1000.0), _load_pixels(p)) for p, ms in entries]


def read_frames(frames: Iterable[MeterFrame], layout: DisplayLayout, decoder=None) -> list[MeterReading]:
    readings = []
    for frame in frames:
        r = read_frame(frame, layout, decoder)
        if r is not None:
            readings.append(r)
    return readings
