"""CLI entry point for fedprune."""

import json
import logging
import os
from pathlib import Path
from typing import Any, Mapping

import click
import numpy as np
from pydantic import BaseModel, ValidationError

from fedprune.allocator import AllocationError, AllocationInstance, solve_bandwidth
from fedprune.analysis import (
    AnalysisError,
    BoundParams,
    bound_a1,
    bound_a2,
    bound_rhs_from_sum,
    read_metrics,
    summarize,
    write_tables,
)
from fedprune.data import DataError, export_csv, synth_blobs, write_idx
from fedprune.fedsim import (
    ExperimentConfig,
    ExperimentError,
    Mode,
    SimulationError,
    build_federation,
    run_rounds,
    sweep_thresholds,
    write_rounds_csv,
)
from fedprune.fileio import LineStreamWriter, atomic_write_csv
from fedprune.model import ModelError, PartitionedModel, save_checkpoint
from fedprune.presets import PresetNotFoundError, list_presets
from fedprune.wireless import WirelessError

SEED_ENV = "FEDPRUNE_SEED"

_EXPECTED_ERRORS = (
    AllocationError,
    AnalysisError,
    DataError,
    ModelError,
    PresetNotFoundError,
    SimulationError,
    WirelessError,
    OSError,
)


class ConfigError(ValueError):
    """Raised when a config file is unreadable or fails validation."""
    pass


def _format_validation(source: str, error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{source}: {key}: {item['msg']}")
    return "\n".join(lines)


def _load_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e


def load_model(model: type[BaseModel], path: Path) -> BaseModel:
    """Parse a JSON file into ``model`` with ``<path>: <key>: <message>`` diagnostics."""
    data = _load_json(path)
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation(str(path), e)) from e


def parse_config(
    path: Path | None,
    overrides: Mapping[str, Any] | None = None,
    fallbacks: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Build the experiment config.

    Precedence: ``overrides`` (command-line flags) beat the file, which beats
    ``fallbacks`` (environment). ``None`` overrides are ignored.
    """
    data: dict = {}
    if path is not None:
        data = _load_json(path)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    for key, value in (fallbacks or {}).items():
        data.setdefault(key, value)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation(str(path) if path else "<defaults>", e)) from e


def env_fallbacks() -> dict[str, Any]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return {}
    try:
        return {"seed": int(raw)}
    except ValueError:
        raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}")


def _fail(e: Exception) -> None:
    click.echo(f"Error: {e}")
    raise SystemExit(1)


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for solver details.")
def main(verbose):
    """Federated learning with partial pruning over a wireless uplink."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), help="JSON experiment config.")
@click.option("--seed", type=int, help="Experiment seed (falls back to $FEDPRUNE_SEED).")
@click.option("--rounds", type=int, help="Number of global rounds.")
@click.option("--mode", type=click.Choice([m.value for m in Mode]), help="Allocation mode.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("results"), show_default=True)
@click.option("--save-models", is_flag=True, help="Write server and per-device checkpoints after the last round.")
def run(config_path, seed, rounds, mode, out_dir, save_models):
    """Run a federated training experiment."""
    try:
        cfg = parse_config(config_path, {"seed": seed, "rounds": rounds, "mode": mode}, env_fallbacks())
    except ConfigError as e:
        _fail(e)

    metrics_path = out_dir / "metrics.jsonl"
    try:
        state = build_federation(cfg)
        with LineStreamWriter(metrics_path) as writer:
            state, metrics = run_rounds(cfg, state, lambda m: writer.write_line(m.model_dump_json()))
        write_rounds_csv(out_dir / "rounds.csv", metrics)
        if save_models:
            models_dir = out_dir / "models"
            n_v = state.architecture.n_personalized
            save_checkpoint(PartitionedModel(state.architecture, np.zeros(n_v), state.global_params), models_dir / "server.ckpt")
            for k in range(len(state.devices)):
                save_checkpoint(state.device_model(k), models_dir / f"device_{k}.ckpt")
    except ExperimentError as e:
        click.echo(f"Error: {e}")
        click.echo(f"{len(e.metrics)} round(s) completed; partial stream left at {metrics_path}.part")
        raise SystemExit(1)
    except _EXPECTED_ERRORS as e:
        _fail(e)

    click.echo(f"Wrote {len(metrics)} round(s) to {metrics_path}")
    if metrics:
        last = metrics[-1]
        click.echo(f"Final round: loss={last.global_loss:.4f} accuracy={last.test_accuracy:.3f} latency={last.round_latency_s * 1e3:.2f} ms")


@main.command()
@click.argument("instance_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def allocate(instance_path):
    """Solve one bandwidth/pruning allocation from a JSON instance."""
    try:
        data = _load_json(instance_path)
        if not isinstance(data, dict):
            raise ConfigError(f"{instance_path}: top level must be a JSON object")
        inst = AllocationInstance.from_json_dict(data)
        allocation = solve_bandwidth(inst)
    except (ConfigError, ValueError, TypeError) as e:
        _fail(e)
    click.echo(json.dumps(allocation.to_json_dict(), indent=2))


@main.command()
@click.argument("params_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--f-gap", type=float, help="Initial optimality gap; with --rho-sum, also prints the full bound.")
@click.option("--rho-sum", type=float, help="Sum of pruning ratios over all rounds and devices.")
def bound(params_path, f_gap, rho_sum):
    """Evaluate the convergence-bound terms for a JSON parameter file."""
    try:
        params = load_model(BoundParams, params_path)
    except ConfigError as e:
        _fail(e)
    a1, a2 = bound_a1(params), bound_a2(params)
    click.echo(f"A1={a1:.12g}")
    click.echo(f"A2={a2:.12g}")
    if f_gap is not None and rho_sum is not None:
        try:
            rhs = bound_rhs_from_sum(params, f_gap, rho_sum)
        except AnalysisError as e:
            _fail(e)
        click.echo(f"RHS={rhs:.12g}")


@main.command("summarize")
@click.argument("metrics_paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("tables"), show_default=True)
def summarize_cmd(metrics_paths, out_dir):
    """Turn one or more metrics streams into CSV tables."""
    try:
        records = [r for path in metrics_paths for r in read_metrics(path)]
        summary = summarize(records)
        written = write_tables(summary, out_dir)
    except AnalysisError as e:
        _fail(e)
    click.echo(f"  {'Mode':<24} {'Rounds':>6} {'Latency (ms)':>20} {'Weights sent':>14}")
    click.echo(f"  {'─' * 24} {'─' * 6} {'─' * 20} {'─' * 14}")
    for lat, comm in zip(summary.latency.rows, summary.communication.rows):
        mode, n, mean, std = lat
        click.echo(f"  {mode:<24} {n:>6} {f'{mean * 1e3:.2f} ± {std * 1e3:.2f}':>20} {comm[2]:>14}")
    click.echo(f"\nWrote {len(written)} tables to {out_dir}")


@main.command("synth-data")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--per-class", type=int, default=200, show_default=True)
@click.option("--dims", type=int, default=784, show_default=True)
@click.option("--std", type=float, default=0.3, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "idx"]), default="csv", show_default=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True, help="CSV file, or directory for IDX.")
def synth_data(seed, classes, per_class, dims, std, fmt, out_path):
    """Generate a synthetic Gaussian-blob dataset."""
    try:
        ds = synth_blobs(seed, classes, per_class, dims, std)
        if fmt == "csv":
            export_csv(ds, out_path)
            click.echo(f"Wrote {len(ds)} samples to {out_path}")
            return
        side = int(round(dims ** 0.5))
        if side * side != dims:
            raise DataError(f"IDX output needs a square feature count, got {dims}")
        images, labels = out_path / "images-idx3-ubyte", out_path / "labels-idx1-ubyte"
        write_idx(ds, images, labels, (side, side))
    except DataError as e:
        _fail(e)
    click.echo(f"Wrote {len(ds)} samples to {images} and {labels}")


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), help="JSON experiment config.")
@click.option("--thresholds", required=True, help="Comma-separated latency thresholds in seconds.")
@click.option("--rounds", type=int, help="Channel draws per threshold.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), help="Optional CSV output.")
def sweep(config_path, thresholds, rounds, out_path):
    """Allocation-only sweep of the latency threshold."""
    try:
        values = [float(t) for t in thresholds.split(",") if t.strip()]
    except ValueError:
        _fail(ConfigError(f"--thresholds: not a list of numbers: {thresholds!r}"))
    if not values or any(t <= 0 for t in values):
        _fail(ConfigError("--thresholds: need at least one positive value"))
    try:
        cfg = parse_config(config_path, {"rounds": rounds}, env_fallbacks())
        points = sweep_thresholds(cfg, values)
    except (ConfigError, *_EXPECTED_ERRORS) as e:
        _fail(e)

    header = ["threshold_s", "mean_pruning_ratio", "mean_round_latency_s", "mean_communicated_weights", "infeasible_rounds"]
    rows = [[repr(p.threshold_s), repr(p.mean_pruning_ratio), repr(p.mean_round_latency_s),
             repr(p.mean_communicated_weights), p.infeasible_rounds] for p in points]
    if out_path is not None:
        atomic_write_csv(out_path, header, rows)
    click.echo(f"  {'T_th (ms)':>10} {'mean rho':>9} {'latency (ms)':>13} {'weights sent':>14}")
    click.echo(f"  {'─' * 10} {'─' * 9} {'─' * 13} {'─' * 14}")
    for p in points:
        click.echo(f"  {p.threshold_s * 1e3:>10.2f} {p.mean_pruning_ratio:>9.4f} {p.mean_round_latency_s * 1e3:>13.2f} {p.mean_communicated_weights:>14.0f}")


@main.command()
def presets():
    """List available network architectures."""
    preset_list = list_presets()
    click.echo(f"Available architectures ({len(preset_list)}):\n")
    click.echo(f"  {'Slug':<12} {'Name':<36} {'Description'}")
    click.echo(f"  {'─' * 12} {'─' * 36} {'─' * 40}")
    for p in preset_list:
        click.echo(f"  {p.slug:<12} {p.name:<36} {p.description}")
        for note in p.notes:
            click.echo(f"  {'':<12} {'':<36} {note}")
