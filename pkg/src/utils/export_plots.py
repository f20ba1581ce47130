import os
import json
import logging
import argparse

import pandas as pd

from utils.constants import RUN_ROOT

logger = logging.getLogger(__name__)

GROUP_KEYS = ('human_selection', 'alpha', 'pseudo_selection', 'planner')
CONFIG_COLUMNS = GROUP_KEYS + ('beta', 'c_u', 'budget', 'seed')


def collect_runs(run_root):
    """Stack every run's metrics.csv with the config columns that distinguish runs."""
    frames = []
    for name in sorted(os.listdir(run_root)):
        run_dir = os.path.join(run_root, name)
        config_path = os.path.join(run_dir, 'config.json')
        metrics_path = os.path.join(run_dir, 'metrics.csv')
        if not (os.path.isfile(config_path) and os.path.isfile(metrics_path)):
            continue
        try:
            with open(config_path, 'r') as f:
                config = json.load(f)
            metrics = pd.read_csv(metrics_path)
        except (OSError, json.JSONDecodeError, pd.errors.ParserError) as e:
            logger.warning(f"Skipping unreadable run {run_dir}: {e}")
            continue
        if metrics.empty:
            continue
        for column in CONFIG_COLUMNS:
            metrics[column] = config.get(column)
        metrics['run'] = name
        frames.append(metrics)
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, ignore_index=True)


def miou_vs_human_pixels(runs, key):
    """Seed-averaged mIoU against cumulative human-labelled pixels, one curve per value of ``key``."""
    grouped = runs.groupby([key, 'mission']).agg(
        human_pixels=('human_pixels', 'mean'),
        miou_mean=('miou', 'mean'),
        miou_std=('miou', 'std'),
        accuracy_mean=('accuracy', 'mean'),
        runs=('run', 'nunique'),
    )
    return grouped.reset_index()


def export_plots(run_root=RUN_ROOT, output_dir=None):
    """
    Write per-plot CSVs for all runs under a run root.

    Args:
        run_root (str): Directory holding run directories
        output_dir (str, optional): Destination, defaults to ``<run_root>/plots``

    Returns:
        list: Paths of the written CSV files
    """
    output_dir = output_dir or os.path.join(run_root, 'plots')
    runs = collect_runs(run_root)
    if runs.empty:
        logger.warning(f"No completed runs found under {run_root}")
        return []

    os.makedirs(output_dir, exist_ok=True)
    written = []
    all_path = os.path.join(output_dir, 'all_runs.csv')
    runs.to_csv(all_path, index=False)
    written.append(all_path)

    for key in GROUP_KEYS:
        path = os.path.join(output_dir, f'miou_vs_human_pixels_by_{key}.csv')
        miou_vs_human_pixels(runs, key).to_csv(path, index=False)
        written.append(path)
    logger.info(f"Exported {len(written)} plot tables from {runs['run'].nunique()} runs to {output_dir}")
    return written


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Export per-plot CSV tables from campaign run directories')
    parser.add_argument('--run-root', default=RUN_ROOT, help='Directory holding run directories')
    parser.add_argument('--output-dir', default=None, help='Destination directory (default: <run-root>/plots)')
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    for path in export_plots(args.run_root, args.output_dir):
        print(path)
