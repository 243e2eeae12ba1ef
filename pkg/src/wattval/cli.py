"""Command line: ``run``, ``analyze`` and ``simulate`` subcommands."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .analysis import emit_report
from .core import ConfigError, RunLog, kwh_to_ws, load_config, load_document, load_environment, ws_to_kwh
from .meter import DisplayLayout, write_frames, write_reading_file
from .runner import MeterSource, RunPlan, execute_series
from .sampling import DEFAULT_INTERVAL_S, SamplerUnavailable
from .static import load_tdp_table

log = logging.getLogger("wattval")


def _layout(path: str | None) -> DisplayLayout | None:
    return DisplayLayout.from_dict(load_document(path)) if path else None


def cmd_run(args: argparse.Namespace) -> int:
    from .simulator import PowerModel

    config = load_config(args.config)
    if args.repetitions is not None:
        config = replace(config, repetitions=args.repetitions)
    env = load_environment(args.env, load_tdp_table(args.tdp_table))
    meter = None
    if args.meter_frames:
        meter = MeterSource("frames", Path(args.meter_frames))
    elif args.meter_file:
        meter = MeterSource("file", Path(args.meter_file))
    plan = RunPlan(
        config=config,
        env=env,
        sampler_choice=args.sampler,
        meter_source=meter,
        output_log=Path(args.log),
        interval_s=args.interval,
        rectangle=args.rectangle,
        allow_static_only=args.allow_static_only,
        clock_offset_s=args.clock_offset,
        layout=_layout(args.layout),
        resolution_kwh=args.resolution,
        sim_model=PowerModel.from_dict(load_document(args.sim_model)) if args.sim_model else None,
    )
    try:
        records = execute_series(plan)
    except SamplerUnavailable as exc:
        log.error("%s (use --allow-static-only to run without dynamic estimation)", exc)
        return 2
    for r in records:
        e = r.energies
        print(f"{r.run_id} duration={r.duration_s:.3f}s units={r.work_units_completed} "
              f"static={e.static_ws:.1f}Ws dynamic={e.dynamic_ws if e.dynamic_ws is None else round(e.dynamic_ws, 1)} "
              f"truth={e.ground_truth_ws if e.ground_truth_ws is None else round(e.ground_truth_ws, 1)}"
              f"{' FAILED' if r.failed else ''}")
    return 0 if all(not r.failed for r in records) else 1


def cmd_analyze(args: argparse.Namespace) -> int:
    records = RunLog(args.log).records()
    if not records:
        log.error("no records in %s", args.log)
        return 1
    paths = emit_report(records, args.out, group=args.group)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    from .simulator import SimulatedMeter, PowerModel, expected_dynamic_error, simulate_run
    from .core import epoch_to_instant

    model = PowerModel.from_dict(load_document(args.model))
    layout = _layout(args.layout) or DisplayLayout()
    meter = SimulatedMeter(
        resolution_kwh=args.resolution,
        frame_rate_hz=args.frame_rate,
        render_noise_std=args.noise,
        max_rotation_deg=args.rotation,
        layout=layout,
    )
    start = epoch_to_instant(args.start_epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate_run(model, args.duration, meter=meter, evidence="readings", start=start)
    write_reading_file(out / "readings.txt", sim.readings)
    if args.frames:
        write_frames(out / "frames", meter.frames(model, args.duration, start, seed=model.seed))
    manifest = {
        "model": model.to_dict(),
        "duration_s": args.duration,
        "start_epoch_s": args.start_epoch,
        "truth_ws": sim.truth_ws,
        "truth_kwh": ws_to_kwh(sim.truth_ws),
        "mean_true_power_w": sim.truth_ws / args.duration,
        "visible_energy_ws": model.sampled_fraction * model.component_energy(0.0, args.duration),
        "meter_resolution_kwh": args.resolution,
        "meter_quantization_bound_ws": kwh_to_ws(2 * args.resolution),
    }
    if not model.jitter_std_w:
        manifest["expected_dynamic_error"] = expected_dynamic_error(model, args.duration)
    with open(out / "manifest.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    print(f"truth: {sim.truth_ws:.3f} Ws ({ws_to_kwh(sim.truth_ws):.6f} kWh) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wattval", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a workload and record all three energy figures")
    run.add_argument("--config", required=True)
    run.add_argument("--env", required=True)
    run.add_argument("--sampler", default="simulated", help="simulated, rapl or nvml")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--meter-frames", help="directory of <epoch_millis>.<ext> frames, or a manifest file")
    src.add_argument("--meter-file", help="reading file: epoch seconds and kWh per line")
    run.add_argument("--repetitions", type=int)
    run.add_argument("--log", required=True)
    run.add_argument("--interval", type=float, default=DEFAULT_INTERVAL_S, help="sampling interval in seconds")
    run.add_argument("--rectangle", action="store_true", help="rectangle rule instead of trapezoidal")
    run.add_argument("--allow-static-only", action="store_true")
    run.add_argument("--clock-offset", type=float, default=0.0, help="meter clock minus host clock, seconds")
    run.add_argument("--layout", help="display layout file for frame OCR")
    run.add_argument("--resolution", type=float, default=0.01, help="meter resolution in kWh")
    run.add_argument("--tdp-table", help="TDP table overriding the bundled one")
    run.add_argument("--sim-model", help="power model file for the simulated sampler")
    run.set_defaults(func=cmd_run)

    an = sub.add_parser("analyze", help="turn a run log into report tables and plot data")
    an.add_argument("--log", required=True)
    an.add_argument("--group", help="processor, model, domain or a hyperparameter name")
    an.add_argument("--out", required=True)
    an.set_defaults(func=cmd_analyze)

    sim = sub.add_parser("simulate", help="write synthetic meter evidence and analytic values")
    sim.add_argument("--model", required=True)
    sim.add_argument("--duration", type=float, required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--frames", action="store_true", help="also render seven-segment frames")
    sim.add_argument("--resolution", type=float, default=0.01)
    sim.add_argument("--frame-rate", type=float, default=1.0)
    sim.add_argument("--noise", type=float, default=0.0)
    sim.add_argument("--rotation", type=float, default=0.0, help="max frame rotation in degrees")
    sim.add_argument("--layout")
    sim.add_argument("--start-epoch", type=float, default=1735689600.0)
    sim.set_defaults(func=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
