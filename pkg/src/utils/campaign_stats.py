import os
import json
import time
import logging
from datetime import datetime

import humanize

from utils.logger_setup import setup_error_logger

logger = logging.getLogger(__name__)


class CampaignStats:
    """Track wall-clock time, oracle queries and failures of one campaign."""

    def __init__(self, run_name):
        """Initialize campaign statistics tracker.

        Args:
            run_name (str): Run directory name (config hash and seed)
        """
        self.run_name = run_name
        self.start_time = None
        self.end_time = None
        self.missions_completed = 0
        self.planned_frames = 0
        self.pseudo_frames = 0
        self.oracle_queries = 0
        self.budget_spent = 0.0
        self.mission_times = []
        self.failures = []
        self.error_logger = setup_error_logger('campaign')

    def start(self):
        self.start_time = time.time()
        logger.info(f"Starting campaign {self.run_name}")

    def finish(self):
        self.end_time = time.time()
        logger.info(f"Finished campaign {self.run_name}")

    @property
    def processing_time(self):
        if self.start_time is None:
            return 0.0
        return (self.end_time or time.time()) - self.start_time

    def add_mission(self, planned, pseudo, queries, spent, seconds):
        self.missions_completed += 1
        self.planned_frames += planned
        self.pseudo_frames += pseudo
        self.oracle_queries += queries
        self.budget_spent += spent
        self.mission_times.append(seconds)

    def mark_failure(self, mission, error):
        error_msg = f"Campaign {self.run_name} failed in mission {mission}: {error}"
        self.failures.append({'mission': mission, 'error': str(error)})
        logger.error(error_msg)
        self.error_logger.error(error_msg)

    def to_dict(self):
        return {
            'run_name': self.run_name,
            'timestamp': datetime.now().isoformat(),
            'status': 'failed' if self.failures else 'completed',
            'missions_completed': self.missions_completed,
            'planned_frames': self.planned_frames,
            'pseudo_frames': self.pseudo_frames,
            'oracle_queries': self.oracle_queries,
            'budget_spent_seconds': self.budget_spent,
            'processing_time_seconds': self.processing_time,
            'mission_times_seconds': self.mission_times,
            'failures': self.failures,
        }

    def save_stats(self, output_dir):
        """Save statistics to ``campaign_stats.json`` in the run directory.

        Args:
            output_dir (str): Run directory
        """
        os.makedirs(output_dir, exist_ok=True)
        stats_file = os.path.join(output_dir, 'campaign_stats.json')
        with open(stats_file, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.info(f"Campaign statistics saved to {stats_file}")

    def print_summary(self):
        average = sum(self.mission_times) / len(self.mission_times) if self.mission_times else 0.0
        summary = [
            f"\n=== Campaign Summary: {self.run_name} ===",
            f"Missions completed: {self.missions_completed}",
            f"Frames captured: {self.planned_frames} planned, {self.pseudo_frames} intermediate",
            f"Oracle queries: {humanize.intcomma(self.oracle_queries)} pixels",
            f"Simulated flight time: {humanize.precisedelta(self.budget_spent)}",
            f"Wall-clock time: {humanize.precisedelta(self.processing_time)} "
            f"(average {humanize.naturaldelta(average)} per mission)",
        ]
        logger.info("\n".join(summary))

        if self.failures:
            failures = ["\nFailures:"] + [f"- mission {f['mission']}: {f['error']}" for f in self.failures]
            failures_text = "\n".join(failures)
            logger.error(failures_text)
            self.error_logger.error(failures_text)
