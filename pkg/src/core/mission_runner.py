"""
Multi-mission campaigns: fly, sense, map, plan, label, retrain, rebuild, re-render, evaluate.

A campaign is sequential. Independent campaigns of an experiment grid run in parallel threads,
each with its own state and seeds.
"""

import os
import time
import math
import itertools
import logging
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor, as_completed

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.world_sim import CameraModel, Pose, Annotator, generate_world, load_world, sense, travel_cost
from core.surrogate_model import SurrogateModel, predict, mc_predict, mc_seed, save_checkpoint
from core.semantic_map import (
    MultiLayerMap, integrate_frame, increment_counts, rebuild, save_map, export_layer_slices,
)
from core.planner import PlanState, PlannerConfig, plan_next_pose, coverage_path, trace_row
from core.label_engine import (
    FileAnnotator, SelectionConfig, select_human_pixels, rerender_all_pseudo, class_histogram,
    save_label_set,
)
from core.trainer import TrainingSet, TrainConfig, train
from core.eval_metrics import build_evaluation_set, evaluate
from utils.campaign_stats import CampaignStats
from utils.config import MissionConfig
from utils.constants import RUN_ROOT
from utils.errors import CampaignError, ConfigError
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class CampaignState:
    config: MissionConfig
    world: object
    camera: CameraModel
    initial_model: SurrogateModel
    model: SurrogateModel
    semantic_map: MultiLayerMap
    eval_frames: list
    pose: Pose
    annotator: Annotator = field(default_factory=Annotator)
    mission: int = 0
    next_frame_id: int = 0
    coverage_index: int = 0
    frames: list = field(default_factory=list)           # every captured frame, capture order
    planned_frames: list = field(default_factory=list)   # human pool
    pseudo_frames: list = field(default_factory=list)    # intermediate frames
    human_labels: list = field(default_factory=list)     # aligned with planned_frames
    pseudo_labels: list = field(default_factory=list)    # aligned with pseudo_frames
    records: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    @property
    def human_pixels(self):
        return sum(labels.num_labels for labels in self.human_labels)


def build_camera(config):
    return CameraModel(config.image_size, config.image_size, config.footprint)


def build_world(config):
    if config.world_path:
        return load_world(config.world_path, seed=derive_seed(config.seed, 'world'))
    return generate_world(config.world_size, config.num_classes, config.cell_size,
                          seed=derive_seed(config.seed, 'world'), flat=config.flat_world)


def start_pose(config, world):
    width_m, length_m = world.extent
    x = config.start_x if config.start_x >= 0 else width_m / 2.0
    y = config.start_y if config.start_y >= 0 else length_m / 2.0
    return Pose(x, y, config.altitude)


def new_campaign(config, world=None):
    """Fresh campaign state: world, camera, fixed initial model, empty map, evaluation frames and annotator.

    Human labels come from the simulated oracle, or from label files in ``annotator_dir`` when it is set.
    """
    config.validate()
    world = world if world is not None else build_world(config)
    if world.num_classes != config.num_classes:
        raise ConfigError(f"world has {world.num_classes} classes but the config asks for {config.num_classes}")
    camera = build_camera(config)
    initial_model = SurrogateModel(config.num_classes, patch_radius=config.patch_radius, hidden=config.hidden,
                                   dropout=config.dropout, seed=derive_seed(config.seed, 'model'))
    semantic_map = MultiLayerMap.for_world(world, config.num_classes, config.effective_voxel_size)
    eval_frames = build_evaluation_set(world, camera, config.altitude, config.eval_grid, derive_seed(config.seed, 'eval'))
    annotator = FileAnnotator(config.annotator_dir) if config.annotator_dir else Annotator()
    return CampaignState(config, world, camera, initial_model, initial_model, semantic_map, eval_frames,
                         start_pose(config, world), annotator)


def intermediate_poses(a, b, spacing):
    """Poses strictly between ``a`` and ``b`` every ``spacing`` meters along the straight flight line."""
    distance = a.distance_to(b)
    if spacing <= 0 or distance <= spacing:
        return []
    count = math.ceil(distance / spacing - 1e-9) - 1
    poses = []
    for i in range(1, count + 1):
        t = i * spacing / distance
        poses.append(Pose(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.z + t * (b.z - a.z)))
    return poses


def _capture(state, pose, kind):
    config = state.config
    frame_id = state.next_frame_id
    state.next_frame_id += 1
    frame = sense(state.world, pose, state.camera, noise_seed=derive_seed(config.seed, 'noise', frame_id),
                  noise_amplitude=config.sensor_noise, frame_id=frame_id, kind=kind)
    probs, unc = mc_predict(state.model, frame, config.mc_samples, mc_seed(config.seed, frame_id))
    integrate_frame(state.semantic_map, frame, probs, unc, state.camera)
    state.frames.append(frame)
    return frame


def _fly(state, plan_state, target, cost, new_planned, new_pseudo):
    config = state.config
    for pose in intermediate_poses(plan_state.pose, target, config.effective_pseudo_spacing):
        new_pseudo.append(_capture(state, pose, 'intermediate'))
    plan_state.move_to(target, cost)
    new_planned.append(_capture(state, target, 'planned'))


def _selection_config(config):
    return SelectionConfig(config.alpha, config.beta, config.radius, derive_seed(config.seed, 'selection'))


def _label_new_frames(state, new_planned):
    """Select and annotate human pixels on the mission's planned frames with the current model."""
    config = state.config
    selection = _selection_config(config)
    queries_before = state.annotator.queries
    expected = 0
    dense = config.human_selection == 'dense'
    for frame in new_planned:
        prediction = predict(state.model, frame)
        _, uncertainty = mc_predict(state.model, frame, config.mc_samples, mc_seed(config.seed, frame.frame_id))
        pixels = select_human_pixels(config.human_selection, prediction, uncertainty,
                                     selection.reseeded('human', frame.frame_id))
        labels = state.annotator.annotate(frame, pixels)
        expected += frame.shape[0] * frame.shape[1] if dense else config.alpha
        state.planned_frames.append(frame)
        state.human_labels.append(labels)
        increment_counts(state.semantic_map, frame, state.camera)

    queries = state.annotator.queries - queries_before
    if queries != expected:
        raise CampaignError(
            f"oracle audit failed: {queries} queries for {len(new_planned)} planned frames, expected {expected}"
        )
    return queries


def _select_new_pseudo(state, new_pseudo):
    """Pseudo labels for this mission's intermediate frames, rendered from the online map."""
    config = state.config
    histogram = class_histogram(state.human_labels, config.num_classes)
    selection = _selection_config(config)
    selected = rerender_all_pseudo(new_pseudo, state.semantic_map, state.camera, selection,
                                   config.pseudo_selection, histogram, config.workers)
    state.pseudo_frames.extend(new_pseudo)
    state.pseudo_labels.extend(selected)


def _training_set(state):
    pseudo = [(frame, labels) for frame, labels in zip(state.pseudo_frames, state.pseudo_labels) if labels.num_labels]
    return TrainingSet(list(zip(state.planned_frames, state.human_labels)), pseudo)


def _train_config(config, mission):
    pixels = config.image_size * config.image_size
    return TrainConfig(
        alpha=pixels if config.human_selection == 'dense' else config.alpha,
        pseudo_alpha=pixels if config.pseudo_selection == 'dense' else config.alpha,
        dropout=config.dropout,
        peak_lr=config.peak_lr,
        batch_size=config.batch_size,
        max_epochs=config.max_epochs,
        patience=config.patience,
        val_fraction=config.val_fraction,
        seed=derive_seed(config.seed, 'train', mission),
    )


def run_mission(state, progress=False):
    """
    One mission: fly until the budget runs out or no candidate remains, then label, retrain,
    rebuild the map, re-render all pseudo labels and evaluate.

    Returns:
        tuple: (state updated in place, planned frames, intermediate frames, oracle queries, seconds flown)
    """
    config = state.config
    mission = state.mission + 1
    started = time.time()
    plan_state = PlanState(state.pose, config.budget)
    new_planned, new_pseudo = [], []

    if not np.any(state.semantic_map.geo_updates):
        new_planned.append(_capture(state, state.pose, 'planned'))

    planner_cfg = PlannerConfig(config.altitude, config.speed, config.effective_candidate_spacing,
                                config.c_u, config.lowres, config.workers)
    step = 0
    if config.planner == 'coverage':
        path = coverage_path(state.world.extent, state.camera, plan_state.budget_remaining, config.altitude,
                             config.speed, start=plan_state.pose, start_index=state.coverage_index)
        for target in path:
            step += 1
            _fly(state, plan_state, target, travel_cost(plan_state.pose, target, config.speed), new_planned, new_pseudo)
            state.trace.append({**trace_row(mission, step, 1, None, plan_state),
                                'x': target.x, 'y': target.y, 'z': target.z})
        state.coverage_index += len(path)
    else:
        while True:
            step += 1
            candidate, count = plan_next_pose(state.semantic_map, plan_state, planner_cfg, state.camera,
                                              state.world.extent)
            state.trace.append(trace_row(mission, step, count, candidate, plan_state))
            if candidate is None:
                break
            _fly(state, plan_state, candidate.pose, candidate.cost_to_reach, new_planned, new_pseudo)

    if plan_state.spent > config.budget + 1e-6:
        raise CampaignError(f"mission {mission} spent {plan_state.spent:.3f} s of a {config.budget} s budget")

    queries = _label_new_frames(state, new_planned)
    _select_new_pseudo(state, new_pseudo)

    model, report = train(state.initial_model, _training_set(state), _train_config(config, mission), progress)
    state.model = model
    state.reports.append(report)

    state.semantic_map = rebuild(state.semantic_map, state.frames, model, state.camera, config.mc_samples,
                                 config.seed, progress)
    state.pseudo_labels = rerender_all_pseudo(
        state.pseudo_frames, state.semantic_map, state.camera, _selection_config(config),
        config.pseudo_selection, class_histogram(state.human_labels, config.num_classes), config.workers,
    )

    result = evaluate(model, state.eval_frames, config.num_classes, config.workers)
    state.records.append({
        'mission': mission,
        'planned_frames': len(state.planned_frames),
        'pseudo_frames': len(state.pseudo_frames),
        'human_pixels': state.human_pixels,
        'pseudo_pixels': sum(labels.num_labels for labels in state.pseudo_labels),
        'oracle_queries': queries,
        'budget_spent': plan_state.spent,
        'train_epochs': report.stopped_epoch,
        **result.as_row(),
    })
    state.pose = plan_state.pose
    state.mission = mission
    logger.info(
        f"Mission {mission}: {len(new_planned)} planned / {len(new_pseudo)} intermediate frames, "
        f"{plan_state.spent:.1f} s flown, mIoU {result.miou:.4f}, accuracy {result.accuracy:.4f} "
        f"({time.time() - started:.1f} s)"
    )
    return state, len(new_planned), len(new_pseudo), queries, plan_state.spent


def run_directory(config):
    return os.path.join(config.run_root or RUN_ROOT, config.run_name())


def _persist_mission(state, run_dir):
    mission = state.mission
    pd.DataFrame(state.records).to_csv(os.path.join(run_dir, 'metrics.csv'), index=False)
    pd.DataFrame(state.trace).to_csv(os.path.join(run_dir, 'planner_trace.csv'), index=False)
    labels_dir = os.path.join(run_dir, 'labels', f'mission_{mission:02d}')
    save_label_set(state.human_labels, labels_dir)
    save_label_set(state.pseudo_labels, labels_dir)
    save_checkpoint(state.model, os.path.join(run_dir, 'checkpoints', f'mission_{mission:02d}.pt'),
                    extra={'mission': mission})
    state.reports[-1].save_csv(os.path.join(run_dir, 'training', f'mission_{mission:02d}.csv'))


def run_single_campaign(config, world=None, progress=True):
    """
    Run every mission of one seed and persist the run directory.

    Returns:
        CampaignState: Final state; ``records`` holds one metrics row per mission
    """
    config.validate()
    run_dir = run_directory(config)
    os.makedirs(run_dir, exist_ok=True)
    config.save_json(os.path.join(run_dir, 'config.json'))

    stats = CampaignStats(config.run_name())
    stats.start()
    state = new_campaign(config, world)
    save_checkpoint(state.initial_model, os.path.join(run_dir, 'checkpoints', 'initial.pt'))

    for _ in tqdm(range(config.missions), desc=f"Missions {config.run_name()}", disable=not progress):
        mission_started = time.time()
        try:
            _, planned, pseudo, queries, spent = run_mission(state)
            _persist_mission(state, run_dir)
        except Exception as e:
            stats.mark_failure(state.mission + 1, e)
            if state.records:
                pd.DataFrame(state.records).to_csv(os.path.join(run_dir, 'metrics.csv'), index=False)
            stats.finish()
            stats.save_stats(run_dir)
            raise CampaignError(f"campaign {config.run_name()} aborted in mission {state.mission + 1}: {e}",
                                run_dir=run_dir) from e
        stats.add_mission(planned, pseudo, queries, spent, time.time() - mission_started)

    map_dir = os.path.join(run_dir, 'maps')
    save_map(state.semantic_map, map_dir)
    export_layer_slices(state.semantic_map, os.path.join(map_dir, 'slices'))
    stats.finish()
    stats.save_stats(run_dir)
    stats.print_summary()
    return state


def summarize_seeds(records_by_seed):
    """Mean and standard deviation per mission over seeds."""
    frames = [pd.DataFrame(records).assign(seed=seed) for seed, records in records_by_seed.items()]
    merged = pd.concat(frames, ignore_index=True)
    metrics = [c for c in merged.columns if c not in ('mission', 'seed')]
    summary = merged.groupby('mission')[metrics].agg(['mean', 'std'])
    summary.columns = [f'{name}_{stat}' for name, stat in summary.columns]
    return summary.reset_index()


def run_campaign(config, seeds=None, progress=True):
    """
    Run one configuration over one or more seeds.

    With several seeds, ``<run_root>/<config_hash>_summary.csv`` holds the per-mission mean and std.

    Returns:
        dict: seed -> list of metrics rows
    """
    seeds = list(seeds) if seeds else [config.seed]
    results = {}
    for seed in seeds:
        state = run_single_campaign(config.with_overrides(seed=seed), progress=progress)
        results[seed] = state.records
    if len(seeds) > 1:
        root = config.run_root or RUN_ROOT
        summary_path = os.path.join(root, f'{config.config_hash()}_summary.csv')
        summarize_seeds(results).to_csv(summary_path, index=False)
        logger.info(f"Seed summary saved to {summary_path}")
    return results


def expand_grid(base_config, axes):
    """
    Cartesian product of axis values applied to ``base_config``.

    Configurations for which α is irrelevant (dense labels) collapse along the α axis.

    Returns:
        list: (axis values dict, MissionConfig) pairs, unique by config hash
    """
    names = sorted(axes)
    combos = []
    seen = set()
    for values in itertools.product(*(axes[name] for name in names)):
        overrides = dict(zip(names, values))
        config = base_config.with_overrides(**overrides)
        if 'alpha' in overrides and not config.uses_alpha:
            config = config.with_overrides(alpha=base_config.alpha)
            overrides = {**overrides, 'alpha': None}
        config.validate()
        key = config.config_hash()
        if key in seen:
            logger.info(f"Skipping duplicate grid point {overrides} (alpha has no effect with dense labels)")
            continue
        seen.add(key)
        combos.append((overrides, config))
    return combos


def run_experiment_grid(base_config, axes, seeds, workers=1, progress=True):
    """
    Run every grid point for every seed and write ``grid_summary.csv`` plus one ``summary_by_<axis>.csv``
    per axis into the run root.

    Returns:
        pd.DataFrame: One row per grid point with final-mission mean/std over seeds
    """
    combos = expand_grid(base_config, axes)
    jobs = [(overrides, config.with_overrides(seed=seed)) for overrides, config in combos for seed in seeds]
    root = base_config.run_root or RUN_ROOT
    os.makedirs(root, exist_ok=True)

    def _run(job):
        overrides, config = job
        state = run_single_campaign(config, progress=False)
        return {**{k: v for k, v in overrides.items() if v is not None}, 'config_hash': config.config_hash(),
                'seed': config.seed, 'status': 'completed', **state.records[-1]}

    rows = []
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(_run, job): job for job in jobs}
        for future in tqdm(as_completed(futures), total=len(futures), desc="Grid runs", disable=not progress):
            overrides, config = futures[future]
            try:
                rows.append(future.result())
            except CampaignError as e:
                logger.error(f"Grid run {config.run_name()} failed: {e}")
                rows.append({**{k: v for k, v in overrides.items() if v is not None},
                             'config_hash': config.config_hash(), 'seed': config.seed, 'status': 'failed'})

    runs = pd.DataFrame(rows).sort_values(['config_hash', 'seed']).reset_index(drop=True)
    runs.to_csv(os.path.join(root, 'grid_runs.csv'), index=False)
    completed = runs[runs['status'] == 'completed']
    if completed.empty:
        raise CampaignError("every grid run failed")

    summary = completed.groupby('config_hash').agg(
        miou_mean=('miou', 'mean'), miou_std=('miou', 'std'),
        accuracy_mean=('accuracy', 'mean'), accuracy_std=('accuracy', 'std'),
        human_pixels=('human_pixels', 'mean'), seeds=('seed', 'count'),
    ).reset_index()
    axis_values = completed.drop_duplicates('config_hash').set_index('config_hash')
    for name in sorted(axes):
        if name in axis_values.columns:
            summary[name] = summary['config_hash'].map(axis_values[name])
    summary.to_csv(os.path.join(root, 'grid_summary.csv'), index=False)

    for name in sorted(axes):
        if name not in completed.columns:
            continue
        by_axis = completed.dropna(subset=[name]).groupby(name).agg(
            miou_mean=('miou', 'mean'), miou_std=('miou', 'std'), runs=('seed', 'count'))
        by_axis.reset_index().to_csv(os.path.join(root, f'summary_by_{name}.csv'), index=False)
    logger.info(f"Grid of {len(combos)} configurations x {len(seeds)} seeds written to {root}")
    return summary
