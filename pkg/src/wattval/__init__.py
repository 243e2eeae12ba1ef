"""Static, dynamic and metered energy quantification for compute workloads."""

from .analysis import (
    Aggregate,
    ErrorFigure,
    GroupedComparison,
    NoGroundTruth,
    aggregate,
    aggregate_series,
    average_power,
    boxplot_stats,
    emit_report,
    estimation_errors,
    grouped_comparison,
    nearest_rank_quantile,
    per_unit_energy,
)
from .core import (
    ConfigError,
    EnergyTriple,
    Environment,
    ExperimentConfig,
    MeterReading,
    MeterTimeline,
    PowerSample,
    PowerTrace,
    ProcessorKind,
    ProcessorRef,
    RunLog,
    RunLogError,
    RunRecord,
    WorkUnit,
    deserialize_run,
    serialize_run,
    validate_config,
)
from .runner import MeterSource, RunPlan, execute_run, execute_series
from .sampling import (
    DynamicEstimate,
    InsufficientTrace,
    SamplerBackend,
    SamplerUnavailable,
    dynamic_estimate,
    integrate_trace,
    sample_loop,
)
from .static import CarbonFigure, StaticEstimate, co2_equivalents, load_tdp_table, static_estimate

__version__ = "0.1.0"
