import os
import sys
import logging
from dataclasses import fields

import click
import pandas as pd

from core.world_sim import generate_world, save_world
from core.surrogate_model import load_checkpoint
from core.eval_metrics import build_evaluation_set, evaluate
from core.mission_runner import run_campaign, run_experiment_grid, build_world, build_camera
from utils.config import MissionConfig
from utils.constants import RUN_ROOT
from utils.errors import ConfigError, DomainError, TrainingError, CampaignError
from utils.export_plots import export_plots
from utils.logger_setup import setup_logging, setup_error_logger
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2


def config_options(func):
    """Add one ``--<field>`` option per MissionConfig field, plus ``--config`` for a JSON file."""
    for f in reversed(fields(MissionConfig)):
        flag = '--' + f.name.replace('_', '-')
        if isinstance(f.default, bool):
            func = click.option(f"{flag}/--no-{flag[2:]}", f.name, default=None, help=f"(default {f.default})")(func)
        else:
            func = click.option(flag, f.name, type=type(f.default), default=None, help=f"(default {f.default!r})")(func)
    return click.option('--config', 'config_path', type=click.Path(exists=True), help='JSON config file')(func)


def build_config(config_path, overrides):
    base = MissionConfig.load_json(config_path) if config_path else MissionConfig()
    return base.with_overrides(**overrides).validate()


def guarded(action):
    """Run a command body and map errors to exit codes: 1 for configuration errors, 2 for runtime errors."""
    error_logger = setup_error_logger('main_process')
    try:
        return action()
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        error_logger.error(f"Configuration error: {e}")
        sys.exit(EXIT_CONFIG_ERROR)
    except (DomainError, TrainingError, CampaignError) as e:
        logger.error(f"Run failed: {e}")
        error_logger.error(f"Run failed: {e}")
        sys.exit(EXIT_RUNTIME_ERROR)
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        error_logger.error(f"Unexpected error: {e}")
        sys.exit(EXIT_RUNTIME_ERROR)


def parse_axis(option):
    """``name=v1,v2,...`` into (name, typed values) using the MissionConfig field types."""
    if '=' not in option:
        raise ConfigError(f"grid axis must look like name=v1,v2 (got {option!r})")
    name, raw = option.split('=', 1)
    name = name.strip().replace('-', '_')
    values = [MissionConfig.from_dict({name: v.strip()}).to_dict()[name] for v in raw.split(',') if v.strip()]
    if not values:
        raise ConfigError(f"grid axis {name} has no values")
    return name, values


@click.group()
@click.option('--verbose', is_flag=True, help='Log at DEBUG level')
def cli(verbose):
    """Active-learning informative path planning campaigns on simulated worlds."""
    setup_logging('ipp', level=logging.DEBUG if verbose else logging.INFO)


@cli.command()
@click.option('--seeds', type=int, multiple=True, help='Run once per seed (repeatable); summary over seeds')
@config_options
def run(seeds, config_path, **overrides):
    """Run one campaign of consecutive missions."""
    def _run():
        config = build_config(config_path, overrides)
        results = run_campaign(config, seeds=seeds)
        for seed, records in results.items():
            final = records[-1]
            click.echo(f"seed {seed}: mission {final['mission']} mIoU {final['miou']:.4f} "
                       f"accuracy {final['accuracy']:.4f} human pixels {final['human_pixels']}")
    guarded(_run)


@cli.command()
@click.option('--axis', 'axes', multiple=True, required=True, help='Grid axis as name=v1,v2 (repeatable)')
@click.option('--seeds', type=int, multiple=True, help='Seeds per grid point (default: the config seed)')
@config_options
def grid(axes, seeds, config_path, **overrides):
    """Run the cartesian product of config axes, in parallel over --workers threads."""
    def _grid():
        config = build_config(config_path, overrides)
        axis_values = dict(parse_axis(option) for option in axes)
        summary = run_experiment_grid(config, axis_values, list(seeds) or [config.seed], workers=config.workers)
        click.echo(summary.to_string(index=False))
    guarded(_grid)


@cli.command('gen-world')
@click.argument('output_dir', type=click.Path())
@click.option('--size', type=int, default=128, help='Cells per side')
@click.option('--classes', 'num_classes', type=int, default=5, help='Number of classes')
@click.option('--cell-size', type=float, default=1.0, help='Cell side in meters')
@click.option('--seed', type=int, default=0, help='Generator seed')
@click.option('--flat', is_flag=True, help='All terrain at height zero')
def gen_world(output_dir, size, num_classes, cell_size, seed, flat):
    """Generate a procedural world and save it as PNG rasters plus a manifest."""
    def _gen():
        world = generate_world(size, num_classes, cell_size, seed=seed, flat=flat)
        click.echo(save_world(world, output_dir))
    guarded(_gen)


@cli.command('eval')
@click.argument('checkpoint', type=click.Path(exists=True))
@click.option('--output', type=click.Path(), help='Optional CSV file for the metrics row')
@config_options
def eval_checkpoint(checkpoint, output, config_path, **overrides):
    """Re-evaluate a checkpoint on the evaluation frames of the configured world."""
    def _eval():
        config = build_config(config_path, overrides)
        world = build_world(config)
        frames = build_evaluation_set(world, build_camera(config), config.altitude, config.eval_grid,
                                      derive_seed(config.seed, 'eval'))
        result = evaluate(load_checkpoint(checkpoint), frames, config.num_classes, config.workers)
        row = {'checkpoint': checkpoint, **result.as_row()}
        if output:
            pd.DataFrame([row]).to_csv(output, index=False)
        click.echo(f"mIoU {result.miou:.4f} accuracy {result.accuracy:.4f}")
    guarded(_eval)


@cli.command('export-plots')
@click.option('--run-root', type=click.Path(), default=RUN_ROOT, help='Directory holding run directories')
@click.option('--output-dir', type=click.Path(), default=None, help='Destination (default: <run-root>/plots)')
def export_plots_command(run_root, output_dir):
    """Aggregate run directories into per-plot CSV tables (mIoU vs. human-labelled pixels)."""
    def _export():
        if not os.path.isdir(run_root):
            raise ConfigError(f"run root not found: {run_root}")
        for path in export_plots(run_root, output_dir):
            click.echo(path)
    guarded(_export)


if __name__ == '__main__':
    cli()
