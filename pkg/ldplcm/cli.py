"""Command-line interface for ldplcm.

This module provides the ``ldplcm`` entry point: dataset generation, single
protocol runs, estimation from persisted artifacts, the LDPLCM vs Apple-CMS
bench, and parameter sweeps. Every command echoes the resolved config and
all randomness flows from ``--seed``.

Exit codes: 0 success, 2 config or usage error, 3 I/O or artifact error,
4 contract error, 130 interrupted.
"""

import json
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import click
import numpy as np
from loguru import logger

from ldplcm.config import ExperimentConfig
from ldplcm.datasets import Dataset, gen_zipf, ingest_csv, read_ground_truth, write_dataset
from ldplcm.errors import (
    EXIT_CONFIG,
    EXIT_CONTRACT,
    EXIT_INTERRUPTED,
    EXIT_IO,
    ArtifactError,
    ConfigError,
    ContractError,
)
from ldplcm.experiments import AXES, bench as run_bench, parse_values, sweep as run_sweep
from ldplcm.experiments import write_run, write_sweep, write_trials
from ldplcm.frequency_model import deserialize
from ldplcm.hashing import derive_seed
from ldplcm.protocol import STREAM_DATASET, run_apple_cms, run_protocol
from ldplcm.server import LdpServer
from ldplcm.sketch import AggregateSketch
from ldplcm.utils import setup_logging, write_csv

DEFAULT_OUT_DIR = "ldplcm-out"

out_option = click.option(
    "--out", "out_dir", envvar="LDPLCM_OUT_DIR", default=DEFAULT_OUT_DIR, show_default=True, help="Output directory"
)
jobs_option = click.option(
    "--jobs", envvar="LDPLCM_JOBS", type=click.IntRange(min=1), default=1, show_default=True, help="Worker threads"
)
config_option = click.option("--config", "config_path", type=click.Path(), help="YAML or JSON experiment config")


def parameter_overrides(func):
    """Flags that override experiment config values."""
    options = [
        click.option("--epsilon", type=float, help="Privacy budget"),
        click.option("--m", type=int, help="Sketch width"),
        click.option("--k", type=int, help="Sketch depth"),
        click.option("--r", type=float, help="Phase-1 sampling rate"),
        click.option("--theta", type=float, help="Ratio of mass attributed to high-frequent items"),
        click.option("--t", type=int, help="Training items for the frequency model"),
        click.option("--model", type=click.Choice(["gbdt", "oracle"]), help="Frequency model"),
        click.option("--seed", type=click.IntRange(min=0), help="Master seed"),
        click.option("--n", type=int, help="Zipf dataset size"),
        click.option("--s", type=float, help="Zipf skewness"),
        click.option("--csv", "csv_path", type=click.Path(), help="Use a CSV dataset instead of Zipf"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@contextmanager
def handle_errors(action: str):
    """Map library errors onto exit codes the way every command reports them."""
    try:
        yield
    except KeyboardInterrupt:
        logger.info(f"{action} interrupted by user")
        click.echo(f"\n{action} interrupted by user.", err=True)
        sys.exit(EXIT_INTERRUPTED)
    except ConfigError as e:
        logger.error(f"Error: {e}")
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except (ArtifactError, OSError) as e:
        logger.error(f"Error: {e}")
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_IO)
    except ContractError as e:
        logger.error(f"Error: {e}")
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_CONTRACT)


def load_config(config_path: Optional[str], **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(config_path) if config_path else ExperimentConfig()
    overrides["csv"] = overrides.pop("csv_path", None)
    return cfg.with_overrides(**overrides)


def echo_config(cfg: ExperimentConfig):
    click.echo(f"Resolved config: {json.dumps(cfg.resolved(), sort_keys=True)}")


@click.group()
@click.option("--log-level", default="INFO", show_default=True, help="Minimum level for stderr logging")
@click.option("--log-file", type=click.Path(), help="Also log to this file (rotated at 10 MB)")
@click.option("--quiet", is_flag=True, help="Only log warnings and hide progress bars")
@click.pass_context
def main(ctx, log_level, log_file, quiet):
    """LDPLCM: two-phase locally private frequency estimation with a learned frequency model."""
    setup_logging("WARNING" if quiet else log_level, log_file)
    ctx.ensure_object(dict)
    ctx.obj["progress"] = not quiet


@main.command("gen-data")
@click.option("--zipf", "zipf_n", type=click.IntRange(min=1), help="Generate this many Zipf records")
@click.option("--s", type=click.FloatRange(min=0), default=1.1, show_default=True, help="Zipf skewness")
@click.option("--max-rank", type=click.IntRange(min=1), default=None, help="Largest Zipf rank")
@click.option("--csv", "csv_path", type=click.Path(), help="Ingest a token or token,count CSV file")
@click.option("--seed", type=click.IntRange(min=0), default=1, show_default=True, help="Master seed")
@out_option
def gen_data(zipf_n, s, max_rank, csv_path, seed, out_dir):
    """Write a dataset (items.csv) and its ground-truth sidecar."""
    if (zipf_n is None) == (csv_path is None):
        raise click.UsageError("give exactly one of --zipf N or --csv PATH")
    with handle_errors("Dataset generation"):
        if zipf_n is not None:
            cfg = ExperimentConfig.from_dict({"seed": seed}).with_overrides(n=zipf_n, s=s, max_rank=max_rank)
            zipf = cfg.dataset.zipf
            dataset: Dataset = gen_zipf(zipf.n, zipf.s, zipf.max_rank, derive_seed(seed, STREAM_DATASET))
        else:
            cfg = ExperimentConfig.from_dict({"seed": seed}).with_overrides(csv=csv_path)
            dataset = ingest_csv(csv_path)
        echo_config(cfg)
        written = write_dataset(out_dir, dataset, {**cfg.resolved(), "domain_size": dataset.domain_size})
        click.echo(f"Realized domain size: {dataset.domain_size}")
        for name, path in written.items():
            click.echo(f"Wrote {name}: {path}")


@main.command()
@config_option
@parameter_overrides
@click.option("--baseline/--no-baseline", default=None, help="Also run Apple-CMS on the same data and seed")
@click.option("--clamp-nonnegative", is_flag=True, help="Clamp estimates at 0 in the per-item CSV")
@out_option
@jobs_option
@click.pass_context
def run(ctx, config_path, baseline, clamp_nonnegative, out_dir, jobs, **overrides):
    """Run both protocol phases and write model, sketch, estimates and summary."""
    with handle_errors("Run"):
        cfg = load_config(config_path, baseline=baseline, **overrides)
        echo_config(cfg)
        results = [run_protocol(cfg, jobs, progress=ctx.obj["progress"])]
        if cfg.baseline:
            results.append(run_apple_cms(cfg, jobs, progress=ctx.obj["progress"]))
        written = write_run(out_dir, results, clamp_nonnegative)
        for result in results:
            click.echo(
                f"{result.method}: SSE total {result.sse_total:.6g}, low {result.sse_low:.6g}, "
                f"high {result.sse_high:.6g}, MSE {result.mse:.6g}"
            )
        click.echo(f"Wrote {len(written)} files to {out_dir}")


@main.command()
@click.option("--sketch", "sketch_path", required=True, type=click.Path(), help="Phase-2 sketch file")
@click.option("--model", "model_path", required=True, type=click.Path(), help="Published model file")
@click.option("--item", "items", multiple=True, type=click.IntRange(min=0), help="Item key to estimate")
@click.option("--all", "all_items", is_flag=True, help="Estimate every key of the domain")
@click.option("--domain-size", type=click.IntRange(min=1), help="Domain size for --all (default: from the sketch)")
@click.option("--truth", "truth_path", type=click.Path(), help="ground_truth.csv adding a true_count column")
@click.option("--k", type=int, help="Refuse unless the sketch has this depth")
@click.option("--m", type=int, help="Refuse unless the sketch has this width")
@click.option("--epsilon", type=float, help="Refuse unless the sketch used this budget")
@click.option("--clamp-nonnegative", is_flag=True, help="Clamp estimates at 0")
@click.option("--output", type=click.Path(), help="CSV file to write instead of stdout")
def estimate(
    sketch_path, model_path, items, all_items, domain_size, truth_path, k, m, epsilon, clamp_nonnegative, output
):
    """Estimate item frequencies from a persisted sketch and model."""
    if bool(items) == all_items:
        raise click.UsageError("give --item (repeatable) or --all")
    with handle_errors("Estimation"):
        sketch, header = AggregateSketch.load(sketch_path)
        model, document = deserialize(Path(model_path).read_bytes())
        requested = {"k": k, "m": m, "epsilon": epsilon}
        for name, value in requested.items():
            if value is not None and getattr(header, name) != value:
                raise ArtifactError(f"sketch has {name}={getattr(header, name)}, but {name}={value} was requested")
        if document.sketch is not None:
            binding = document.sketch.model_dump()
            actual = {"k": header.k, "m": header.m, "epsilon": header.epsilon, "master_seed": header.master_seed}
            if binding != actual:
                raise ArtifactError(f"model was published for sketch {binding}, but the sketch file has {actual}")

        if all_items:
            domain_size = domain_size or (header.config or {}).get("domain_size")
            if domain_size is None:
                raise ConfigError("--all needs --domain-size when the sketch does not record one")
            keys = np.arange(domain_size, dtype=np.uint64)
        else:
            keys = np.array(items, dtype=np.uint64)

        estimates, high = LdpServer.restore(sketch, model).estimate_many(keys)
        if clamp_nonnegative:
            estimates = np.maximum(estimates, 0.0)
        header_row = ["item", "estimate", "branch"]
        truth = None
        if truth_path:
            truth = read_ground_truth(truth_path)
            header_row = ["item", "true_count", "estimate", "branch"]

        def rows():
            for key, value, is_high in zip(keys, estimates, high):
                branch = "model" if is_high else "sketch"
                if truth is None:
                    yield int(key), repr(float(value)), branch
                else:
                    count = int(truth[int(key)]) if int(key) < truth.shape[0] else 0
                    yield int(key), count, repr(float(value)), branch

        config = header.config or {}
        if output:
            write_csv(output, header_row, rows(), config)
            click.echo(f"Wrote {len(keys)} estimates to {output}")
        else:
            click.echo(f"# ldplcm {json.dumps(config, sort_keys=True)}")
            click.echo(",".join(header_row))
            for row in rows():
                click.echo(",".join(str(v) for v in row))


@main.command("bench")
@config_option
@parameter_overrides
@click.option("--trials", type=click.IntRange(min=1), help="Seeds to average over (default: config trials)")
@out_option
@jobs_option
@click.pass_context
def bench_command(ctx, config_path, trials, out_dir, jobs, **overrides):
    """Compare LDPLCM with Apple-CMS over several seeds: accuracy, space and query time."""
    with handle_errors("Bench"):
        cfg = load_config(config_path, **overrides)
        echo_config(cfg)
        trial_set = run_bench(cfg, trials, jobs, ctx.obj["progress"])
        written = write_trials(out_dir, trial_set)
        summary = trial_set.summary()
        timing = trial_set.timing()
        for method in ("ldplcm", "apple_cms"):
            stats = summary[method]
            click.echo(
                f"{method}: SSE total {stats['sse_total']['mean']:.6g} ± {stats['sse_total']['std']:.3g}, "
                f"low {stats['sse_low']['mean']:.6g}, space {stats['space_bytes']['mean']:.0f} B, "
                f"query {timing[method]['query_seconds'] * 1e6:.3f} µs"
            )
        click.echo(f"LDPLCM lower low-frequent SSE in {summary['ldplcm_low_sse_wins']}/{summary['trials']} trials")
        click.echo(f"Wrote {written['summary']}")


@main.command("sweep")
@config_option
@parameter_overrides
@click.option("--axis", required=True, type=click.Choice(AXES), help="Parameter to vary")
@click.option("--values", "values_text", required=True, help="Comma-separated values or an integer range like 1..7")
@click.option("--trials", type=click.IntRange(min=1), help="Seeds per value (default: config trials)")
@out_option
@jobs_option
@click.pass_context
def sweep_command(ctx, config_path, axis, values_text, trials, out_dir, jobs, **overrides):
    """Run trial-averaged experiments over one parameter axis."""
    with handle_errors("Sweep"):
        values = parse_values(values_text)
        cfg = load_config(config_path, **overrides)
        echo_config(cfg)
        points = run_sweep(cfg, axis, values, trials, jobs, ctx.obj["progress"])
        index = write_sweep(out_dir, points)
        for point in points:
            stats = point.trials.summary()["ldplcm"]
            click.echo(f"{point.label}: SSE total {stats['sse_total']['mean']:.6g}")
        click.echo(f"Wrote {index}")


if __name__ == "__main__":
    main()  # pylint: disable=no-value-for-parameter
