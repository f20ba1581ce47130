import os

from click.testing import CliRunner

from main_process import cli
from core.mission_runner import run_single_campaign
from utils.export_plots import export_plots


def test_run_rejects_bad_alpha(tmp_path):
    result = CliRunner().invoke(cli, ['run', '--alpha', '0', '--run-root', str(tmp_path)])
    assert result.exit_code == 1


def test_run_rejects_unknown_selection(tmp_path):
    result = CliRunner().invoke(cli, ['run', '--human-selection', 'best', '--run-root', str(tmp_path)])
    assert result.exit_code == 1


def test_gen_world_writes_manifest(tmp_path):
    out = tmp_path / 'world'
    result = CliRunner().invoke(cli, ['gen-world', str(out), '--size', '16', '--classes', '3', '--seed', '4'])
    assert result.exit_code == 0, result.output
    assert os.path.isfile(out / 'world.txt')


def test_export_plots_missing_root(tmp_path):
    result = CliRunner().invoke(cli, ['export-plots', '--run-root', str(tmp_path / 'nowhere')])
    assert result.exit_code == 1


def test_grid_rejects_malformed_axis(tmp_path):
    result = CliRunner().invoke(cli, ['grid', '--axis', 'alpha', '--run-root', str(tmp_path)])
    assert result.exit_code == 1


def test_export_plots_tables(small_config):
    config = small_config.with_overrides(missions=1)
    run_single_campaign(config, progress=False)
    run_single_campaign(config.with_overrides(seed=1), progress=False)
    written = export_plots(config.run_root)
    names = {os.path.basename(path) for path in written}
    assert 'all_runs.csv' in names
    assert 'miou_vs_human_pixels_by_human_selection.csv' in names
    assert all(os.path.isfile(path) for path in written)


def test_export_plots_empty_root(tmp_path):
    assert export_plots(str(tmp_path)) == []


def test_unwritable_run_root_is_a_runtime_error(tmp_path):
    blocker = tmp_path / 'blocker'
    blocker.write_text('not a directory')
    result = CliRunner().invoke(cli, ['run', '--run-root', str(blocker)])
    assert result.exit_code == 2
