"""
Next-best-view planning over the multi-layer map, plus the non-adaptive coverage sweep.
"""

import math
import logging
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import ndimage

from core.semantic_map import voxel_states, cast_view, FREE, UNKNOWN, OCCUPIED
from core.world_sim import Pose, travel_cost
from utils.errors import ConfigError, DomainError

logger = logging.getLogger(__name__)


@dataclass
class CandidatePose:
    pose: Pose
    info_value: float = 0.0
    cost_to_reach: float = 0.0


@dataclass
class PlanState:
    pose: Pose
    budget_remaining: float
    path: list = field(default_factory=list)
    spent: float = 0.0

    def __post_init__(self):
        if self.budget_remaining < 0:
            raise DomainError(f"remaining budget must be >= 0, got {self.budget_remaining}")
        if not self.path:
            self.path = [self.pose]

    def move_to(self, pose, cost):
        if cost > self.budget_remaining + 1e-9:
            raise DomainError(f"move costs {cost:.3f} s but only {self.budget_remaining:.3f} s remain")
        self.budget_remaining = max(0.0, self.budget_remaining - cost)
        self.spent += cost
        self.pose = pose
        self.path.append(pose)


@dataclass(frozen=True)
class PlannerConfig:
    altitude: float
    speed: float
    spacing: float
    c_u: float = 0.5
    lowres: int = 32
    workers: int = 1


def extract_frontiers(semantic_map, states=None):
    """
    Frontier components: 26-connected groups of free voxels with at least one unknown 6-neighbour.

    Returns:
        list: One (n, 3) int array of voxel indices per component, ordered by component label
    """
    if states is None:
        states = voxel_states(semantic_map)
    free = states == FREE
    unknown = states == UNKNOWN
    if not free.any() or not unknown.any():
        return []

    six = ndimage.generate_binary_structure(3, 1)
    near_unknown = ndimage.binary_dilation(unknown, structure=six)
    frontier = free & near_unknown
    labels, count = ndimage.label(frontier, structure=ndimage.generate_binary_structure(3, 3))
    return [np.argwhere(labels == component) for component in range(1, count + 1)]


def _arc_order(points):
    """Greedy nearest-neighbour ordering of 2-D points starting from the lowest (x, y)."""
    n = len(points)
    visited = np.zeros(n, dtype=bool)
    order = [int(np.lexsort((points[:, 1], points[:, 0]))[0])]
    visited[order[0]] = True
    for _ in range(n - 1):
        dist = np.hypot(*(points - points[order[-1]]).T)
        dist[visited] = np.inf
        nearest = int(np.argmin(dist))
        order.append(nearest)
        visited[nearest] = True
    return points[order]


def _clamp_to_extent(x, y, extent, footprint):
    """Keep the camera footprint inside the world where the world is wide enough."""
    width_m, length_m = extent
    half = footprint / 2.0
    x = min(max(x, half), width_m - half) if width_m > footprint else width_m / 2.0
    y = min(max(y, half), length_m - half) if length_m > footprint else length_m / 2.0
    return x, y


def sample_candidates(frontiers, plan_state, cfg, voxel_size, extent, footprint, origin=(0.0, 0.0)):
    """
    Equidistant candidate poses along each frontier's ground projection, lifted to flight altitude.

    Candidates are at least ``cfg.spacing`` apart, reachable within the remaining budget, and
    not on top of the current pose. Order: component, then position along the component.
    """
    if cfg.spacing <= 0:
        raise ConfigError(f"candidate spacing must be > 0, got {cfg.spacing}")
    candidates = []
    if plan_state.budget_remaining <= 0:
        return candidates

    current = plan_state.pose
    for component in frontiers:
        cells = np.unique(component[:, :2], axis=0)
        ground = (cells + 0.5) * voxel_size + np.asarray(origin[:2])
        kept = []
        for gx, gy in _arc_order(ground):
            x, y = _clamp_to_extent(gx, gy, extent, footprint)
            if any(math.hypot(x - kx, y - ky) < cfg.spacing for kx, ky in kept):
                continue
            if any(math.hypot(x - c.pose.x, y - c.pose.y) < cfg.spacing for c in candidates):
                continue
            pose = Pose(x, y, cfg.altitude)
            if pose.distance_to(current) < voxel_size / 2.0:
                continue
            kept.append((x, y))
            cost = travel_cost(current, pose, cfg.speed)
            if cost <= plan_state.budget_remaining:
                candidates.append(CandidatePose(pose, 0.0, cost))
    return candidates


def view_information(reflect_voxel, reflect_state, semantic_map, c_u):
    """
    Per-pixel information of a cast view: 0 for rays leaving through free space, ``c_u`` for
    rays stopped by unknown space, M_U / max(1, M_T) for rays reflected by a surface voxel.
    """
    info = np.zeros(reflect_voxel.shape, dtype=np.float64)
    info[reflect_state == UNKNOWN] = c_u
    surface = reflect_state == OCCUPIED
    voxels = reflect_voxel[surface]
    counts = semantic_map.unc_count.ravel()[voxels]
    mean_unc = np.where(counts > 0, semantic_map.unc_sum.ravel()[voxels] / np.maximum(counts, 1), 1.0)
    info[surface] = mean_unc / np.maximum(1, semantic_map.train_count.ravel()[voxels])
    return info


def score_candidate(semantic_map, candidate, camera_lowres, c_u, states=None):
    """Information value of the low-resolution view from a candidate pose."""
    if camera_lowres.width < 1 or camera_lowres.height < 1:
        raise ConfigError("scoring camera needs at least one pixel per side")
    reflect_voxel, reflect_state = cast_view(semantic_map, candidate.pose, camera_lowres, states)
    return float(view_information(reflect_voxel, reflect_state, semantic_map, c_u).sum())


def lowres_camera(camera, lowres):
    return camera.with_resolution(lowres, lowres)


def plan_next_pose(semantic_map, plan_state, cfg, camera, extent):
    """
    Pick the candidate with the largest information value.

    Ties go to the cheaper candidate, then to the earlier one. Returns None at mission end.

    Returns:
        tuple: (CandidatePose or None, candidate count)
    """
    states = voxel_states(semantic_map)
    frontiers = extract_frontiers(semantic_map, states)
    candidates = sample_candidates(frontiers, plan_state, cfg, semantic_map.voxel_size, extent, camera.footprint,
                                   semantic_map.origin)
    if not candidates:
        return None, 0

    scoring_camera = lowres_camera(camera, cfg.lowres)

    def _score(candidate):
        return score_candidate(semantic_map, candidate, scoring_camera, cfg.c_u, states)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            scores = list(executor.map(_score, candidates))
    else:
        scores = [_score(candidate) for candidate in candidates]

    for candidate, score in zip(candidates, scores):
        candidate.info_value = score
    best = min(range(len(candidates)), key=lambda i: (-candidates[i].info_value, candidates[i].cost_to_reach, i))
    logger.debug(f"Scored {len(candidates)} candidates, best info {candidates[best].info_value:.3f}")
    return candidates[best], len(candidates)


def coverage_waypoints(extent, footprint, altitude):
    """Serpentine sweep over the extent with one footprint between rows and between stops."""
    width_m, length_m = extent

    def _centres(length):
        if length <= footprint:
            return [length / 2.0]
        count = math.ceil(length / footprint - 1e-9)
        stride = (length - footprint) / (count - 1) if count > 1 else 0.0
        return [footprint / 2.0 + i * stride for i in range(count)]

    xs, ys = _centres(width_m), _centres(length_m)
    waypoints = []
    for row, y in enumerate(ys):
        for x in (xs if row % 2 == 0 else reversed(xs)):
            waypoints.append(Pose(x, y, altitude))
    return waypoints


def coverage_path(extent, camera, budget, altitude, speed, start=None, start_index=0):
    """
    Boustrophedon sweep truncated to the flight budget.

    Args:
        extent (tuple): World width and length in meters
        camera (CameraModel): Camera whose footprint sets the row spacing
        budget (float): Flight budget in seconds
        altitude (float): Flight altitude
        speed (float): Flight speed
        start (Pose, optional): Where the robot is; the first leg is charged from here
        start_index (int): Waypoint to resume from, for sweeps continued over several missions

    Returns:
        list: Poses to visit, total travel cost within ``budget``
    """
    waypoints = coverage_waypoints(extent, camera.footprint, altitude)[start_index:]
    path = []
    spent = 0.0
    previous = start
    for pose in waypoints:
        cost = travel_cost(previous, pose, speed) if previous is not None else 0.0
        if spent + cost > budget:
            break
        spent += cost
        path.append(pose)
        previous = pose
    return path


def trace_row(mission, step, candidate_count, candidate, plan_state):
    """One planner decision as a flat dict (for planner_trace.csv)."""
    return {
        'mission': mission,
        'step': step,
        'candidates': candidate_count,
        'x': candidate.pose.x if candidate else None,
        'y': candidate.pose.y if candidate else None,
        'z': candidate.pose.z if candidate else None,
        'info_value': candidate.info_value if candidate else 0.0,
        'cost': candidate.cost_to_reach if candidate else 0.0,
        'budget_remaining': plan_state.budget_remaining,
    }
