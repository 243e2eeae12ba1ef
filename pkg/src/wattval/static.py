"""Constant-power energy estimation and CO2 conversion."""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources

from .core import WS_PER_KWH, Environment, ExperimentConfig, active_refs


@dataclass(frozen=True)
class StaticEstimate:
    energy_ws: float
    assumed_power_w: float
    duration_s: float


@dataclass(frozen=True)
class CarbonFigure:
    kg_co2_equiv: float
    efficiency_kg_per_kwh: float
    energy_kwh: float

    def display(self) -> str:
        return f"{self.kg_co2_equiv:.2f}"


def static_estimate(config: ExperimentConfig, env: Environment, duration_s: float) -> StaticEstimate:
    """Energy = (sum of active processors' TDP) x duration."""
    if not duration_s > 0:
        raise ValueError(f"duration_s must be > 0, got {duration_s}")
    power = sum(p.tdp_watts for p in active_refs(config, env))
    return StaticEstimate(power * duration_s, power, duration_s)


def co2_equivalents(energy_ws: float, efficiency_kg_per_kwh: float) -> CarbonFigure:
    if energy_ws < 0 or efficiency_kg_per_kwh < 0:
        raise ValueError("energy and CO2 efficiency must be >= 0")
    kwh = energy_ws / WS_PER_KWH
    return CarbonFigure(kwh * efficiency_kg_per_kwh, efficiency_kg_per_kwh, kwh)


def parse_tdp_table(text: str) -> dict[str, float]:
    table = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"TDP table line {lineno}: expected '<name> <watts>'")
        watts = float(parts[1])
        if not watts > 0:
            raise ValueError(f"TDP table line {lineno}: watts must be > 0")
        table[parts[0]] = watts
    return table


def load_tdp_table(path: str | os.PathLike | None = None) -> dict[str, float]:
    """Load a TDP table; with no path, the bundled one."""
    if path is None:
        text = resources.files("wattval").joinpath("data/tdp_table.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_tdp_table(text)
