"""Streaming test-time active learning at desk scale."""

import sys
from typing import Any, Callable, Dict, List, Optional

import click
from pydantic import ValidationError

from .config import (
    InputError,
    PolicyConfig,
    RunConfig,
    SweepAxis,
    config_keys,
    dump_flat,
    load_config,
)
from .logger import LOGGER, set_verbose
from .main import (  # noqa: F401
    buffer_balance_experiment,
    dump_stream,
    failure_rate_experiment,
    new_episode,
    query_ratio_experiment,
    run_episode,
    run_sweep,
    write_episode,
)
from .models.report import SweepRow
from .util import parse_list, write_models

version = "0.1.0"


def config_options(func: Callable) -> Callable:
    """Adds ``--config`` and one dotted flag per configuration key, e.g. ``--policy.hard-cap``."""
    for key in reversed(config_keys()):
        click.option(
            f"--{key.replace('_', '-')}",
            key.replace(".", "__"),
            default=None,
            help=f"Overrides '{key}'.",
        )(func)
    return click.option(
        "--config",
        "-C",
        type=click.Path(exists=True, dir_okay=False),
        help="Flat key=value configuration filepath.",
    )(func)


def resolve_config(config: Optional[str], flags: Dict[str, Any]) -> RunConfig:
    """Loads the configuration, exiting with code 2 when it is invalid."""
    overrides = {
        name.replace("__", "."): value
        for name, value in flags.items()
        if value is not None
    }
    try:
        return load_config(config, overrides)
    except ValueError as error:
        click.secho(f"Invalid configuration: {error}", fg="red", err=True)
        sys.exit(2)


def execute(func: Callable, *args, **kwargs) -> Any:
    """Runs a command body; bad input exits with 2, any other failure with 1."""
    try:
        return func(*args, **kwargs)
    except (InputError, ValidationError) as error:
        click.secho(f"Invalid input: {error}", fg="red", err=True)
        sys.exit(2)
    except Exception as error:
        LOGGER.error("%s: %s", type(error).__name__, error)
        sys.exit(1)


def seed_range(seed: int, count: int) -> List[int]:
    """Consecutive seeds starting at ``seed``."""
    if count < 1:
        raise InputError("at least one seed is required")
    return list(range(seed, seed + count))


@click.group(invoke_without_command=True)
@click.option("--version", "-V", "show_version", is_flag=True, help="Prints the version.")
@click.option("--verbose", "-v", is_flag=True, help="Logs every query decision.")
@click.pass_context
def commandline(ctx: click.Context, show_version: bool, verbose: bool) -> None:
    """Starter function to invoke PyTaps via CLI commands.

    **Flags**
        - ``--version | -V``: Prints the version.
        - ``--verbose | -v``: Switches logging to debug level.

    **Commands**
        - ``run``: Runs a single episode.
        - ``sweep``: Runs an ablation sweep.
        - ``theory``: Empirical checks of the query-ratio and buffer-balance claims.
        - ``dump-config``: Prints the resolved configuration.
        - ``dump-stream``: Writes the test stream as CSV.
    """
    if show_version:
        click.echo(f"PyTaps {version}")
        sys.exit(0)
    set_verbose(verbose)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())
        sys.exit(1)


@commandline.command()
@config_options
@click.option(
    "--out", "-O", default="pytaps_run", show_default=True, help="Output directory."
)
def run(config: Optional[str], out: str, **flags) -> None:
    """Runs one episode and writes steps.csv, summary.txt, buffer.csv and model.txt."""
    cfg = resolve_config(config, flags)

    def body() -> None:
        episode = new_episode(cfg)
        reports, summary = run_episode(cfg, episode)
        for filepath in write_episode(episode, reports, summary, out):
            LOGGER.info("Stored %s", filepath)
        for key, value in summary.model_dump().items():
            click.echo(f"{key}={value}")

    execute(body)


@commandline.command()
@config_options
@click.option(
    "--axis",
    "-A",
    required=True,
    type=click.Choice([axis.value for axis in SweepAxis]),
    help="Ablation axis.",
)
@click.option("--values", required=True, help="Comma separated axis values.")
@click.option(
    "--seeds", default="0", show_default=True, help="Comma separated seeds."
)
@click.option(
    "--out", "-O", default="sweep.csv", show_default=True, help="Output CSV filepath."
)
def sweep(
    config: Optional[str], axis: str, values: str, seeds: str, out: str, **flags
) -> None:
    """Runs every (value, seed) combination of an ablation axis."""
    cfg = resolve_config(config, flags)

    def body() -> None:
        rows = run_sweep(cfg, SweepAxis(axis), parse_list(values), parse_list(seeds, int))
        LOGGER.info("Stored %s", write_models(out, SweepRow, rows))

    execute(body)


@commandline.group()
def theory() -> None:
    """Empirical checks, decoupled from the learner."""


@theory.command("query-ratio")
@click.option("--mu", default=0.0, show_default=True, help="Mean of the surrogate signal.")
@click.option("--sigma", default=1.0, show_default=True, help="Spread of the surrogate signal.")
@click.option("--alpha", default=0.05, show_default=True, help="Target query ratio.")
@click.option(
    "--switch-ratio", default=0.075, show_default=True, help="Ratio that engages z_high."
)
@click.option("--tau0", default=1.0, show_default=True, help="Warm-up threshold.")
@click.option("--t-min", default=30, show_default=True, help="Warm-up length.")
@click.option("--n-steps", default=20_000, show_default=True, help="Signals per run.")
@click.option("--seeds", default=50, show_default=True, help="Number of seeds.")
@click.option("--seed", default=0, show_default=True, help="First seed.")
@click.option(
    "--tolerance", default=0.01, show_default=True, help="Allowed |ratio - alpha|."
)
@click.option("--out", "-O", default="theory", show_default=True, help="Output directory.")
def query_ratio(
    mu: float,
    sigma: float,
    alpha: float,
    switch_ratio: float,
    tau0: float,
    t_min: int,
    n_steps: int,
    seeds: int,
    seed: int,
    tolerance: float,
    out: str,
) -> None:
    """Runs the threshold policy on Gaussian surrogate signals."""

    def body() -> None:
        policy_cfg = PolicyConfig(
            alpha=alpha, switch_ratio=switch_ratio, tau0=tau0, t_min=t_min
        )
        summary = query_ratio_experiment(
            mu, sigma, policy_cfg, n_steps, seed_range(seed, seeds), tolerance, out
        )
        for key, value in summary.items():
            click.echo(f"{key}={value}")

    execute(body)


@theory.command("buffer-balance")
@click.option("--k-classes", default=3, show_default=True, help="Number of classes.")
@click.option("--capacity", default=6, show_default=True, help="Buffer capacity.")
@click.option("--budget", type=int, help="Insertions per run, 100 x capacity by default.")
@click.option("--class-dist", help="Comma separated class frequencies, uniform by default.")
@click.option("--seeds", default=100, show_default=True, help="Number of seeds.")
@click.option("--seed", default=0, show_default=True, help="First seed.")
@click.option("--out", "-O", default="theory", show_default=True, help="Output directory.")
def buffer_balance(
    k_classes: int,
    capacity: int,
    budget: Optional[int],
    class_dist: Optional[str],
    seeds: int,
    seed: int,
    out: str,
) -> None:
    """Pushes random labeled insertions through the class-balanced buffer."""

    def body() -> None:
        summary = buffer_balance_experiment(
            k_classes,
            capacity,
            budget or 100 * capacity,
            parse_list(class_dist, float) if class_dist else None,
            seed_range(seed, seeds),
            out,
        )
        for key, value in summary.items():
            click.echo(f"{key}={value}")

    execute(body)


@theory.command("failure-rate")
@click.option("--k-classes", default=3, show_default=True, help="Number of classes.")
@click.option("--capacity", default=9, show_default=True, help="Buffer capacity.")
@click.option(
    "--budgets", help="Comma separated budgets, capacity x {1, 5, 20, 50} by default."
)
@click.option("--trials", default=200, show_default=True, help="Trials per budget.")
@click.option("--seed", default=0, show_default=True, help="First seed.")
@click.option("--out", "-O", default="theory", show_default=True, help="Output directory.")
def failure_rate(
    k_classes: int,
    capacity: int,
    budgets: Optional[str],
    trials: int,
    seed: int,
    out: str,
) -> None:
    """Tabulates how often the final buffer is off balance by more than 2."""

    def body() -> None:
        budget_list = (
            parse_list(budgets, int)
            if budgets
            else [capacity * factor for factor in (1, 5, 20, 50)]
        )
        for row in failure_rate_experiment(
            k_classes, capacity, budget_list, trials, seed, out
        ):
            click.echo(f"{row.budget}={row.failure_rate}")

    execute(body)


@commandline.command("dump-config")
@config_options
def dump_config(config: Optional[str], **flags) -> None:
    """Prints the resolved configuration as key=value lines."""
    cfg = resolve_config(config, flags)
    for line in dump_flat(cfg):
        click.echo(line)


@commandline.command("dump-stream")
@config_options
@click.option(
    "--out", "-O", default="stream.csv", show_default=True, help="Output CSV filepath."
)
def dump_stream_command(config: Optional[str], out: str, **flags) -> None:
    """Writes the test stream as sample_id, label and input coordinates."""
    cfg = resolve_config(config, flags)
    LOGGER.info("Stored %s", execute(dump_stream, cfg, out))
