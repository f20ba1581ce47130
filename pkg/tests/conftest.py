import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from utils.config import MissionConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow trend campaigns')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_config(tmp_path):
    return MissionConfig(
        world_size=32, num_classes=3, image_size=16, footprint=8.0, altitude=10.0, speed=1.0,
        budget=30.0, missions=2, alpha=3, beta=10.0, mc_samples=3, lowres=6, hidden=8,
        max_epochs=5, patience=3, eval_grid=2, run_root=str(tmp_path / 'runs'),
    )
