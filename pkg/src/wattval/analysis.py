"""Estimation errors, normalized costs, aggregates and report tables."""

from __future__ import annotations

import csv
import math
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .core import RunRecord
from .static import co2_equivalents

APPROACHES = ("static", "dynamic", "ground_truth")


class NoGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class ErrorFigure:
    approach: str
    absolute_ws: float
    relative: float

    @property
    def magnitude_ws(self) -> float:
        return abs(self.absolute_ws)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    sample_std: float
    n: int


def _energy(record: RunRecord, approach: str) -> float | None:
    return getattr(record.energies, f"{approach}_ws")


def _error(approach: str, estimate: float, truth: float) -> ErrorFigure:
    diff = estimate - truth
    return ErrorFigure(approach, diff, diff / truth)


def estimation_errors(triple) -> tuple[ErrorFigure, ErrorFigure | None]:
    """Signed errors of the static and dynamic estimates against ground truth.

    Positive means overestimate. The dynamic figure is None when the run has
    no dynamic estimate.
    """
    truth = triple.ground_truth_ws
    if truth is None or truth <= 0:
        raise NoGroundTruth("no ground truth")
    static = _error("static", triple.static_ws, truth)
    dynamic = None if triple.dynamic_ws is None else _error("dynamic", triple.dynamic_ws, truth)
    return static, dynamic


def per_unit_energy(record: RunRecord, basis: int | None = None) -> dict[str, float | None]:
    """Ws per ``basis`` work units (default: the config's scale) for each approach."""
    basis = record.config.work_unit_scale if basis is None else basis
    if basis < 1:
        raise ValueError("basis must be a positive integer")
    if record.work_units_completed <= 0:
        raise ValueError(f"run {record.run_id} completed no work units")
    out = {}
    for a in APPROACHES:
        e = _energy(record, a)
        out[a] = None if e is None else e * basis / record.work_units_completed
    return out


def average_power(record: RunRecord) -> dict[str, float | None]:
    out = {}
    for a in APPROACHES:
        e = _energy(record, a)
        out[a] = None if e is None else e / record.duration_s
    return out


def aggregate(values: Iterable[float]) -> Aggregate:
    """Mean and sample standard deviation (n - 1); std is 0 for one value."""
    vals = list(values)
    if not vals:
        raise ValueError("cannot aggregate an empty set")
    mean = math.fsum(vals) / len(vals)
    std = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return Aggregate(mean, std, len(vals))


def _errors_or_none(r: RunRecord):
    try:
        return estimation_errors(r.energies)
    except NoGroundTruth:
        return None, None


def _err_attr(index: int, attr: str) -> Callable[[RunRecord], float | None]:
    def get(r):
        fig = _errors_or_none(r)[index]
        return None if fig is None else getattr(fig, attr)
    return get


def _per_unit(approach: str) -> Callable[[RunRecord], float | None]:
    def get(r):
        if r.work_units_completed <= 0:
            return None
        return per_unit_energy(r)[approach]
    return get


METRICS: dict[str, Callable[[RunRecord], float | None]] = {
    "static_ws": lambda r: r.energies.static_ws,
    "dynamic_ws": lambda r: r.energies.dynamic_ws,
    "ground_truth_ws": lambda r: r.energies.ground_truth_ws,
    "duration_s": lambda r: r.duration_s,
    "static_error_ws": _err_attr(0, "absolute_ws"),
    "static_error_rel": _err_attr(0, "relative"),
    "static_error_abs_ws": _err_attr(0, "magnitude_ws"),
    "dynamic_error_ws": _err_attr(1, "absolute_ws"),
    "dynamic_error_rel": _err_attr(1, "relative"),
    "dynamic_error_abs_ws": _err_attr(1, "magnitude_ws"),
    **{f"{a}_per_unit_ws": _per_unit(a) for a in APPROACHES},
    **{f"{a}_avg_w": (lambda a: lambda r: average_power(r)[a])(a) for a in APPROACHES},
}


def _selector(metric: str | Callable[[RunRecord], float | None]) -> Callable[[RunRecord], float | None]:
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}") from None


def aggregate_series(records: Sequence[RunRecord], metric: str | Callable = "ground_truth_ws") -> Aggregate:
    """Aggregate one metric over repeated runs of the same configuration.

    Runs where the metric is undefined (e.g. no ground truth) are skipped.
    """
    if not records:
        raise ValueError("empty record list")
    first = records[0].config
    if any(r.config != first for r in records[1:]):
        raise ValueError("records come from different configurations")
    get = _selector(metric)
    vals = [v for v in (get(r) for r in records) if v is not None]
    if not vals:
        raise ValueError("metric undefined for every record")
    return aggregate(vals)


# -- grouping -----------------------------------------------------------------------

def group_key(record: RunRecord, dimension: str) -> str | None:
    """Value of ``dimension`` for a run, or None when the run lacks it.

    ``processor`` groups by the kinds of the active processors (``cpu``,
    ``gpu``, ``cpu+gpu``); ``model`` and ``domain`` use the config name and
    domain tag; anything else (optionally prefixed ``hp:``) names a
    hyperparameter.
    """
    cfg = record.config
    if dimension in ("processor", "processor_kind"):
        kinds = set()
        for name in cfg.active_processors:
            try:
                kinds.add(record.environment.processor(name).kind.value)
            except KeyError:
                return None
        return "+".join(sorted(kinds)) or None
    if dimension == "model":
        return cfg.name
    if dimension == "domain":
        return cfg.domain_tag or None
    key = dimension[3:] if dimension.startswith("hp:") else dimension
    return cfg.hyperparameters.get(key)


GROUP_METRICS = (
    "ground_truth_ws",
    "dynamic_ws",
    "static_ws",
    "ground_truth_per_unit_ws",
    "static_error_abs_ws",
    "dynamic_error_abs_ws",
    "static_error_rel",
    "dynamic_error_rel",
)


@dataclass
class GroupedComparison:
    dimension: str
    groups: dict[str, dict[str, Aggregate]]
    values: dict[str, dict[str, list[float]]]
    ratios: dict[tuple[str, str], dict[str, float]]
    excluded: list[str] = field(default_factory=list)

    def ratio(self, a: str, b: str, metric: str) -> float:
        return self.ratios[(a, b)][metric]


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else math.copysign(math.inf, a)
    return a / b


def grouped_comparison(
    records: Sequence[RunRecord],
    dimension: str,
    metrics: Sequence[str] = GROUP_METRICS,
) -> GroupedComparison:
    """Partition runs along ``dimension`` and compare per-group aggregates.

    Runs lacking the dimension are left out and listed in ``excluded``.
    Ratios are mean(group a) / mean(group b) for every ordered pair.
    """
    buckets: dict[str, list[RunRecord]] = {}
    excluded = []
    for r in records:
        key = group_key(r, dimension)
        if key is None:
            excluded.append(r.run_id)
        else:
            buckets.setdefault(key, []).append(r)
    groups: dict[str, dict[str, Aggregate]] = {}
    values: dict[str, dict[str, list[float]]] = {}
    for key, recs in buckets.items():
        groups[key], values[key] = {}, {}
        for m in metrics:
            get = _selector(m)
            vals = [v for v in (get(r) for r in recs) if v is not None]
            values[key][m] = vals
            if vals:
                groups[key][m] = aggregate(vals)
    ratios = {}
    for a in groups:
        for b in groups:
            if a == b:
                continue
            shared = set(groups[a]) & set(groups[b])
            ratios[(a, b)] = {m: _ratio(groups[a][m].mean, groups[b][m].mean) for m in shared}
    return GroupedComparison(dimension, groups, values, ratios, excluded)


def nearest_rank_quantile(values: Sequence[float], q: float) -> float:
    """Smallest value with at least a fraction ``q`` of the data at or below it."""
    if not values:
        raise ValueError("no values")
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def boxplot_stats(values: Sequence[float]) -> dict[str, float]:
    return {
        name: nearest_rank_quantile(values, q)
        for name, q in (("min", 0.0), ("q1", 0.25), ("median", 0.5), ("q3", 0.75), ("max", 1.0))
    }


# -- report -------------------------------------------------------------------------

RUN_COLUMNS = (
    "row_type", "run_id", "series_tag", "model", "domain_tag", "work_unit", "work_unit_scale",
    "hyperparameters", "processors", "duration_s", "work_units", "failed",
    "static_ws", "dynamic_ws", "ground_truth_ws", "truth_uncertainty_ws",
    "static_error_ws", "static_error_rel", "dynamic_error_ws", "dynamic_error_rel",
    "static_per_unit_ws", "dynamic_per_unit_ws", "ground_truth_per_unit_ws",
    "static_avg_w", "dynamic_avg_w", "ground_truth_avg_w",
    "dynamic_coverage", "co2_kg", "co2_basis",
)

NUMERIC_COLUMNS = RUN_COLUMNS[RUN_COLUMNS.index("duration_s"):RUN_COLUMNS.index("co2_kg") + 1]
SUMMARY_METRICS = (
    "static_ws", "dynamic_ws", "ground_truth_ws", "static_error_rel", "dynamic_error_rel",
    "ground_truth_per_unit_ws", "ground_truth_avg_w",
)


def _carbon(record: RunRecord) -> tuple[float | None, str]:
    eff = record.environment.co2_efficiency_kg_per_kwh
    e = record.energies
    if e.ground_truth_ws is not None:
        return co2_equivalents(e.ground_truth_ws, eff).kg_co2_equiv, "measured"
    if e.dynamic_ws is not None:
        return co2_equivalents(e.dynamic_ws, eff).kg_co2_equiv, "estimated"
    return None, ""


def run_row(record: RunRecord) -> dict[str, object]:
    cfg = record.config
    row: dict[str, object] = {
        "row_type": "run",
        "run_id": record.run_id,
        "series_tag": record.series_tag or "",
        "model": cfg.name,
        "domain_tag": cfg.domain_tag,
        "work_unit": cfg.work_unit.value,
        "work_unit_scale": cfg.work_unit_scale,
        "hyperparameters": ";".join(f"{k}={v}" for k, v in sorted(cfg.hyperparameters.items())),
        "processors": "+".join(sorted(cfg.active_processors)),
        "duration_s": record.duration_s,
        "work_units": record.work_units_completed,
        "failed": int(record.failed),
        "truth_uncertainty_ws": record.energies.truth_uncertainty_ws,
        "dynamic_coverage": record.dynamic_coverage,
    }
    for m in ("static_ws", "dynamic_ws", "ground_truth_ws", "static_error_ws", "static_error_rel",
              "dynamic_error_ws", "dynamic_error_rel",
              "static_per_unit_ws", "dynamic_per_unit_ws", "ground_truth_per_unit_ws",
              "static_avg_w", "dynamic_avg_w", "ground_truth_avg_w"):
        row[m] = METRICS[m](record)
    row["co2_kg"], row["co2_basis"] = _carbon(record)
    return row


def _series_row(tag: str, rows: list[dict[str, object]]) -> dict[str, object]:
    first = rows[0]
    out: dict[str, object] = {c: "" for c in RUN_COLUMNS}
    out.update(row_type="series_mean", series_tag=tag)
    for c in ("model", "domain_tag", "work_unit", "work_unit_scale", "hyperparameters", "processors"):
        out[c] = first[c]
    for c in NUMERIC_COLUMNS:
        vals = [r[c] for r in rows if r[c] not in (None, "")]
        out[c] = math.fsum(vals) / len(vals) if vals else None
    basis = {r["co2_basis"] for r in rows if r["co2_basis"]}
    out["co2_basis"] = basis.pop() if len(basis) == 1 else ("mixed" if basis else "")
    return out


def _fmt(v: object) -> object:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[dict | Sequence], comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            vals = [row.get(c) for c in header] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in vals])


def _by_model(records: Sequence[RunRecord]) -> dict[str, list[RunRecord]]:
    out: dict[str, list[RunRecord]] = {}
    for r in records:
        out.setdefault(r.config.name, []).append(r)
    return out


def _agg_cells(records: Sequence[RunRecord], metric: str) -> list[object]:
    vals = [v for v in (METRICS[metric](r) for r in records) if v is not None]
    if not vals:
        return [None, None, 0]
    a = aggregate(vals)
    return [a.mean, a.sample_std, a.n]


def emit_report(
    records: Sequence[RunRecord],
    out_dir: str | os.PathLike,
    *,
    group: str | None = None,
) -> dict[str, Path]:
    """Write the per-run table and per-figure plot-data files into ``out_dir``.

    Files: ``runs.csv`` (one row per run plus a ``series_mean`` row per
    series), ``series_summary.csv`` (mean and n-1 standard deviation),
    ``power_by_model.csv``, ``energy_by_model.csv``, ``error_by_model.csv``,
    and with ``group`` also ``grouped_boxplot.csv`` and ``grouped_ratios.csv``.
    Missing quantities are written as empty cells, never as zero.
    """
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    rows = [run_row(r) for r in records]
    table: list[dict[str, object]] = []
    series: dict[str, list[dict[str, object]]] = {}
    for row in rows:
        if row["series_tag"]:
            series.setdefault(row["series_tag"], []).append(row)
    emitted = set()
    for row in rows:
        table.append(row)
        tag = row["series_tag"]
        if tag and tag not in emitted and row is series[tag][-1]:
            table.append(_series_row(tag, series[tag]))
            emitted.add(tag)
    paths["runs"] = out / "runs.csv"
    _write_csv(paths["runs"], RUN_COLUMNS, table)

    by_series: dict[str, list[RunRecord]] = {}
    for r in records:
        if r.series_tag:
            by_series.setdefault(r.series_tag, []).append(r)
    header = ["series_tag", "model", "n"] + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "sample_std")]
    summary = []
    for tag, recs in by_series.items():
        line: list[object] = [tag, recs[0].config.name, len(recs)]
        for m in SUMMARY_METRICS:
            mean, std, _ = _agg_cells(recs, m)
            line += [mean, std]
        summary.append(line)
    paths["series_summary"] = out / "series_summary.csv"
    _write_csv(paths["series_summary"], header, summary,
               comment="dispersion is the sample standard deviation (n-1 denominator)")

    models = _by_model(records)
    power, energy, error = [], [], []
    for model, recs in models.items():
        for a in APPROACHES:
            power.append([model, a, *_agg_cells(recs, f"{a}_avg_w")])
            energy.append([model, a, recs[0].config.work_unit_scale, recs[0].config.work_unit.value,
                           *_agg_cells(recs, f"{a}_per_unit_ws")])
        for a in ("static", "dynamic"):
            error.append([model, a, *_agg_cells(recs, f"{a}_error_ws"), *_agg_cells(recs, f"{a}_error_rel")[:2]])
    paths["power_by_model"] = out / "power_by_model.csv"
    _write_csv(paths["power_by_model"], ["model", "approach", "mean_w", "sample_std_w", "n"], power)
    paths["energy_by_model"] = out / "energy_by_model.csv"
    _write_csv(paths["energy_by_model"],
               ["model", "approach", "basis", "work_unit", "mean_ws_per_basis", "sample_std_ws", "n"], energy)
    paths["error_by_model"] = out / "error_by_model.csv"
    _write_csv(paths["error_by_model"],
               ["model", "approach", "mean_error_ws", "sample_std_ws", "n", "mean_error_rel", "sample_std_rel"],
               error)

    if group:
        cmp = grouped_comparison(records, group)
        box = []
        for key, per_metric in cmp.values.items():
            for m, vals in per_metric.items():
                if vals:
                    s = boxplot_stats(vals)
                    box.append([key, m, s["min"], s["q1"], s["median"], s["q3"], s["max"], len(vals)])
        paths["grouped_boxplot"] = out / "grouped_boxplot.csv"
        _write_csv(paths["grouped_boxplot"], ["group", "metric", "min", "q1", "median", "q3", "max", "n"], box,
                   comment=f"grouped by {group}; nearest-rank quantiles")
        ratios = [[a, b, m, v] for (a, b), ms in cmp.ratios.items() for m, v in sorted(ms.items())]
        paths["grouped_ratios"] = out / "grouped_ratios.csv"
        _write_csv(paths["grouped_ratios"], ["group_a", "group_b", "metric", "ratio_of_means"], ratios)
        if cmp.excluded:
            paths["grouped_excluded"] = out / "grouped_excluded.csv"
            _write_csv(paths["grouped_excluded"], ["run_id"], [[rid] for rid in cmp.excluded])
    return paths
