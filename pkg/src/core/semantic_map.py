"""
Multi-layer voxel map: occupancy (M_G), per-class semantics (M_S), model uncertainty (M_U) and
training occurrence counts (M_T), updated by vectorised DDA ray casting.

Voxel (i, j, k) spans [i*v, (i+1)*v) x [j*v, (j+1)*v) x [k*v, (k+1)*v) relative to the origin. Grids built
for a world sit one voxel below the ground, so a surface at height h is the top face of layer ceil(h/v).
Space above the grid is unmapped and treated as traversable.
"""

import os
import json
import math
import logging
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image
from scipy.special import expit, logit
from tqdm import tqdm

from utils.constants import (
    P_HIT, P_MISS, LOG_ODDS_MIN, LOG_ODDS_MAX, TAU_OCC, TAU_FREE, SEMANTIC_P_FLOOR, MAP_FORMAT_VERSION,
)
from utils.errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

FREE = 0
UNKNOWN = 1
OCCUPIED = 2

# Relative overshoot past a ray endpoint so the endpoint voxel is entered even on a voxel face
ENDPOINT_OVERSHOOT = 1e-6


@dataclass(frozen=True)
class OccupancyParams:
    p_hit: float = P_HIT
    p_miss: float = P_MISS
    l_min: float = LOG_ODDS_MIN
    l_max: float = LOG_ODDS_MAX
    tau_occ: float = TAU_OCC
    tau_free: float = TAU_FREE
    p_floor: float = SEMANTIC_P_FLOOR

    @property
    def l_hit(self):
        return float(logit(self.p_hit))

    @property
    def l_miss(self):
        return float(logit(self.p_miss))


class MultiLayerMap:
    def __init__(self, dims, voxel_size, num_classes, origin=(0.0, 0.0, 0.0), params=None):
        if voxel_size <= 0:
            raise ConfigError(f"voxel size must be > 0, got {voxel_size}")
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigError(f"map dims must be three positive integers, got {dims}")
        self.dims = tuple(int(d) for d in dims)
        self.voxel_size = float(voxel_size)
        self.num_classes = int(num_classes)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.params = params or OccupancyParams()

        self.geo = np.zeros(self.dims, dtype=np.float64)
        self.geo_updates = np.zeros(self.dims, dtype=np.int64)
        self.sem = np.zeros((self.num_classes,) + self.dims, dtype=np.float64)
        self.unc_sum = np.zeros(self.dims, dtype=np.float64)
        self.unc_count = np.zeros(self.dims, dtype=np.int64)
        self.train_count = np.zeros(self.dims, dtype=np.int64)

    @classmethod
    def for_world(cls, world, num_classes=None, voxel_size=None, params=None):
        """Grid covering the world extent from one voxel below the ground to one voxel above the highest terrain."""
        v = voxel_size or world.cell_size
        width_m, length_m = world.extent
        nx = max(1, math.ceil(width_m / v - 1e-9))
        ny = max(1, math.ceil(length_m / v - 1e-9))
        nz = math.ceil(world.max_height / v - 1e-9) + 2
        return cls((nx, ny, nz), v, num_classes or world.num_classes, origin=(0.0, 0.0, -v), params=params)

    @property
    def size(self):
        return int(np.prod(self.dims))

    def copy(self):
        other = MultiLayerMap(self.dims, self.voxel_size, self.num_classes, self.origin, self.params)
        for name in ('geo', 'geo_updates', 'sem', 'unc_sum', 'unc_count', 'train_count'):
            setattr(other, name, getattr(self, name).copy())
        return other

    def flat_index(self, i, j, k):
        return np.ravel_multi_index((i, j, k), self.dims)

    def voxel_index(self, flat):
        return np.unravel_index(flat, self.dims)

    def occupancy_prob(self):
        return expit(self.geo)

    def mean_uncertainty(self):
        """M_U per voxel; NaN where no uncertainty was ever integrated."""
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(self.unc_count > 0, self.unc_sum / np.maximum(self.unc_count, 1), np.nan)

    def semantic_probs(self, flat):
        """Normalized per-class probabilities (n, K) of flat voxel indices."""
        layers = expit(self.sem.reshape(self.num_classes, -1)[:, flat]).T
        return layers / layers.sum(axis=1, keepdims=True)

    # Low-level layer updates. integrate_frame is built from these.

    def apply_occupancy(self, hit_counts, miss_counts):
        """Add hits * l_hit + misses * l_miss per voxel, then clamp once."""
        hit_counts = np.asarray(hit_counts).reshape(self.dims)
        miss_counts = np.asarray(miss_counts).reshape(self.dims)
        self.geo += hit_counts * self.params.l_hit + miss_counts * self.params.l_miss
        np.clip(self.geo, self.params.l_min, self.params.l_max, out=self.geo)
        self.geo_updates += ((hit_counts + miss_counts) > 0)

    def apply_semantics(self, flat, probs):
        flat = np.asarray(flat, dtype=np.int64)
        if len(flat) == 0:
            return
        p = np.clip(np.asarray(probs, dtype=np.float64), self.params.p_floor, 1.0 - self.params.p_floor)
        evidence = logit(p)
        sem_flat = self.sem.reshape(self.num_classes, -1)
        for k in range(self.num_classes):
            sem_flat[k] += np.bincount(flat, weights=evidence[:, k], minlength=self.size)

    def apply_uncertainty(self, flat, u):
        flat = np.asarray(flat, dtype=np.int64)
        if len(flat) == 0:
            return
        self.unc_sum += np.bincount(flat, weights=np.asarray(u, dtype=np.float64), minlength=self.size).reshape(self.dims)
        self.unc_count += np.bincount(flat, minlength=self.size).reshape(self.dims)


@dataclass
class Traversal:
    """Voxels visited by a batch of rays, in visiting order per ray."""
    ray: np.ndarray      # (R,) ray index of each record
    voxel: np.ndarray    # (R,) flat voxel index
    step: np.ndarray     # (R,) visiting order within the ray
    last: np.ndarray     # (N,) last visited voxel per ray, -1 if the ray missed the grid


def traverse(starts, ends, dims, voxel_size, origin=(0.0, 0.0, 0.0)):
    """
    Amanatides-Woo voxel traversal of line segments, vectorised over rays.

    Visits every voxel a segment passes through with positive length, clipped to the grid.

    Args:
        starts (np.ndarray): (N, 3) segment starts in world coordinates
        ends (np.ndarray): (N, 3) segment ends
        dims (tuple): Grid dims (nx, ny, nz)
        voxel_size (float): Voxel side
        origin (array-like): World position of the grid corner

    Returns:
        Traversal: Visited voxels
    """
    dims_arr = np.asarray(dims, dtype=np.int64)
    s = (np.asarray(starts, dtype=np.float64) - origin) / voxel_size
    e = (np.asarray(ends, dtype=np.float64) - origin) / voxel_size
    n = len(s)
    d = e - s

    with np.errstate(divide='ignore', invalid='ignore'):
        t_a = (0.0 - s) / d
        t_b = (dims_arr - s) / d
    parallel = d == 0
    inside_slab = (s >= 0) & (s <= dims_arr)
    t_lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t_a, t_b))
    t_hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t_a, t_b))
    t0 = np.maximum(0.0, t_lo.max(axis=1))
    t1 = np.minimum(1.0, t_hi.min(axis=1))
    active = t0 < t1

    p0 = s + t0[:, None] * d
    cur = np.floor(p0)
    cur -= (p0 == cur) & (d < 0)
    cur = np.clip(cur, 0, dims_arr - 1).astype(np.int64)
    step = np.sign(d).astype(np.int64)

    with np.errstate(divide='ignore', invalid='ignore'):
        boundary = np.where(d > 0, cur + 1, cur).astype(np.float64)
        t_max = np.where(parallel, np.inf, (boundary - s) / d)
        t_delta = np.where(parallel, np.inf, 1.0 / np.abs(d))

    last = np.full(n, -1, dtype=np.int64)
    rays, voxels, steps = [], [], []
    rows = np.arange(n)
    max_steps = int(dims_arr.sum()) + 3
    for count in range(max_steps):
        idx = rows[active]
        if len(idx) == 0:
            break
        flat = (cur[idx, 0] * dims_arr[1] + cur[idx, 1]) * dims_arr[2] + cur[idx, 2]
        rays.append(idx)
        voxels.append(flat)
        steps.append(np.full(len(idx), count, dtype=np.int64))
        last[idx] = flat

        axis = np.argmin(t_max[idx], axis=1)
        t_next = t_max[idx, axis]
        moving = t_next < t1[idx]
        mover = idx[moving]
        mover_axis = axis[moving]
        cur[mover, mover_axis] += step[mover, mover_axis]
        t_max[mover, mover_axis] += t_delta[mover, mover_axis]
        in_grid = np.all((cur[mover] >= 0) & (cur[mover] < dims_arr), axis=1)
        active[idx[~moving]] = False
        active[mover[~in_grid]] = False

    if rays:
        return Traversal(np.concatenate(rays), np.concatenate(voxels), np.concatenate(steps), last)
    empty = np.zeros(0, dtype=np.int64)
    return Traversal(empty, empty, empty, last)


def _box_contains(points, semantic_map, tol=1e-9):
    upper = semantic_map.origin + np.asarray(semantic_map.dims) * semantic_map.voxel_size
    return np.all((points >= semantic_map.origin - tol) & (points <= upper + tol), axis=1)


def _frame_rays(semantic_map, frame, camera):
    """
    Cast every valid pixel of a frame from the camera to its depth endpoint.

    Returns:
        tuple: (pixel flat indices, Traversal over those pixels, endpoint voxel per pixel or -1)
    """
    pose = frame.pose
    gx, gy = camera.ground_points(pose)
    depth = frame.depth
    valid = np.isfinite(depth).ravel()
    pixels = np.flatnonzero(valid)

    ends = np.stack([gx.ravel()[pixels], gy.ravel()[pixels], pose.z - depth.ravel()[pixels]], axis=1)
    cam = np.broadcast_to(pose.as_array(), ends.shape)
    overshoot = cam + (ends - cam) * (1.0 + ENDPOINT_OVERSHOOT)
    trav = traverse(cam, overshoot, semantic_map.dims, semantic_map.voxel_size, semantic_map.origin)
    endpoint = np.where(_box_contains(ends, semantic_map), trav.last, -1)
    return pixels, trav, endpoint


def integrate_frame(semantic_map, frame, probs, unc, camera, update_geometry=True):
    """
    Fuse one frame into the map.

    Traversed voxels take a miss on M_G, endpoint voxels a hit (a voxel hit in this frame takes no misses).
    Endpoint voxels also fuse the pixel's class probabilities into M_S and its uncertainty into M_U.
    Rays whose endpoint leaves the grid are truncated at the boundary without an endpoint update.

    Args:
        semantic_map (MultiLayerMap): Map to update in place
        frame (Frame): Observation
        probs (PredictionTensor): Model prediction for the frame
        unc (UncertaintyImage): Model uncertainty for the frame
        camera (CameraModel): Camera the frame was captured with
        update_geometry (bool): Also update M_G; rebuilds only refresh M_S and M_U
    """
    h, w = frame.shape
    if probs.probs.shape[1:] != (h, w) or unc.u.shape != (h, w):
        raise DomainError(f"frame {frame.frame_id}: prediction shape does not match {h}x{w} image")
    pixels, trav, endpoint = _frame_rays(semantic_map, frame, camera)

    if update_geometry:
        hit_voxels = endpoint[endpoint >= 0]
        hits = np.bincount(hit_voxels, minlength=semantic_map.size)
        is_endpoint = trav.voxel == endpoint[trav.ray]
        misses = np.bincount(trav.voxel[~is_endpoint], minlength=semantic_map.size)
        misses[hits > 0] = 0
        semantic_map.apply_occupancy(hits, misses)

    hit = endpoint >= 0
    hit_pixels = pixels[hit]
    voxels = endpoint[hit]
    semantic_map.apply_semantics(voxels, probs.probs.reshape(semantic_map.num_classes, -1)[:, hit_pixels].T)
    semantic_map.apply_uncertainty(voxels, unc.u.ravel()[hit_pixels])


def voxel_states(semantic_map, tau_occ=None, tau_free=None):
    """FREE / UNKNOWN / OCCUPIED code per voxel."""
    tau_occ = semantic_map.params.tau_occ if tau_occ is None else tau_occ
    tau_free = semantic_map.params.tau_free if tau_free is None else tau_free
    if tau_free >= tau_occ:
        raise ConfigError(f"tau_free ({tau_free}) must be below tau_occ ({tau_occ})")
    prob = semantic_map.occupancy_prob()
    states = np.full(semantic_map.dims, UNKNOWN, dtype=np.int8)
    observed = semantic_map.geo_updates > 0
    states[observed & (prob >= tau_occ)] = OCCUPIED
    states[observed & (prob <= tau_free)] = FREE
    return states


def classify_voxels(semantic_map, tau_occ=None, tau_free=None):
    """Disjoint boolean masks (free, unknown, occupied) covering every voxel."""
    states = voxel_states(semantic_map, tau_occ, tau_free)
    return states == FREE, states == UNKNOWN, states == OCCUPIED


def cast_view(semantic_map, pose, camera, states=None):
    """
    Cast one ray per pixel from ``pose`` down through the ground plane, traversing free voxels only.

    Returns:
        tuple: (reflecting flat voxel or -1, state of that voxel or -1 for rays leaving through free space),
        both (h, w)
    """
    if states is None:
        states = voxel_states(semantic_map)
    gx, gy = camera.ground_points(pose)
    h, w = gx.shape
    ends = np.stack([gx.ravel(), gy.ravel(), np.zeros(h * w)], axis=1)
    cam = np.broadcast_to(pose.as_array(), ends.shape)
    trav = traverse(cam, cam + (ends - cam) * (1.0 + ENDPOINT_OVERSHOOT),
                    semantic_map.dims, semantic_map.voxel_size, semantic_map.origin)

    reflect_voxel = np.full(h * w, -1, dtype=np.int64)
    reflect_state = np.full(h * w, -1, dtype=np.int8)
    blocking = states.ravel()[trav.voxel] != FREE
    if np.any(blocking):
        ray, voxel, step = trav.ray[blocking], trav.voxel[blocking], trav.step[blocking]
        order = np.lexsort((step, ray))
        ray, voxel = ray[order], voxel[order]
        first_rays, first = np.unique(ray, return_index=True)
        reflect_voxel[first_rays] = voxel[first]
        reflect_state[first_rays] = states.ravel()[voxel[first]]
    return reflect_voxel.reshape(h, w), reflect_state.reshape(h, w)


def render_semantics(semantic_map, pose, camera, states=None):
    """
    Render pseudo-label probabilities from a pose.

    Returns:
        tuple: (pseudo_probs (K, h, w), hit_mask (h, w)); non-hit pixels carry zero probabilities
    """
    reflect_voxel, reflect_state = cast_view(semantic_map, pose, camera, states)
    hit_mask = reflect_state == OCCUPIED
    h, w = hit_mask.shape
    probs = np.zeros((semantic_map.num_classes, h * w), dtype=np.float64)
    hit_flat = np.flatnonzero(hit_mask.ravel())
    if len(hit_flat):
        probs[:, hit_flat] = semantic_map.semantic_probs(reflect_voxel.ravel()[hit_flat]).T
    return probs.reshape(semantic_map.num_classes, h, w), hit_mask


def render_uncertainty(semantic_map, pose, camera, states=None):
    """Render M_U from a pose; pixels without an observed surface render as 1.0."""
    from core.surrogate_model import UncertaintyImage

    reflect_voxel, reflect_state = cast_view(semantic_map, pose, camera, states)
    u = np.ones(reflect_voxel.shape, dtype=np.float64)
    hit = reflect_state == OCCUPIED
    voxels = reflect_voxel[hit]
    counts = semantic_map.unc_count.ravel()[voxels]
    observed = counts > 0
    values = np.ones(len(voxels))
    values[observed] = semantic_map.unc_sum.ravel()[voxels[observed]] / counts[observed]
    u[hit] = values
    return UncertaintyImage(u)


def increment_counts(semantic_map, frame, camera):
    """M_T += 1 at every distinct endpoint voxel of a human-labelled frame."""
    _, _, endpoint = _frame_rays(semantic_map, frame, camera)
    voxels = np.unique(endpoint[endpoint >= 0])
    semantic_map.train_count.ravel()[voxels] += 1


def rebuild(semantic_map, frames, model, camera, mc_samples, seed, progress=False):
    """
    Recompute M_S and M_U by re-integrating every stored frame with fresh model predictions.

    Frames are replayed in order with the same per-frame MC seeds as during the mission, so an unchanged
    model reproduces the incremental map bit for bit. M_G and M_T are carried over untouched.
    """
    from core.surrogate_model import mc_predict, mc_seed

    rebuilt = semantic_map.copy()
    rebuilt.sem[...] = 0.0
    rebuilt.unc_sum[...] = 0.0
    rebuilt.unc_count[...] = 0
    for frame in tqdm(frames, desc="Rebuilding map", disable=not progress):
        probs, unc = mc_predict(model, frame, mc_samples, mc_seed(seed, frame.frame_id))
        integrate_frame(rebuilt, frame, probs, unc, camera, update_geometry=False)
    logger.info(f"Rebuilt semantic and uncertainty layers from {len(frames)} frames")
    return rebuilt


def save_map(semantic_map, directory):
    """Write ``map.json`` (format version, dims, voxel size, parameters) and ``layers.npz``."""
    os.makedirs(directory, exist_ok=True)
    header = {
        'version': MAP_FORMAT_VERSION,
        'dims': list(semantic_map.dims),
        'voxel_size': semantic_map.voxel_size,
        'num_classes': semantic_map.num_classes,
        'origin': semantic_map.origin.tolist(),
        'params': asdict(semantic_map.params),
    }
    with open(os.path.join(directory, 'map.json'), 'w') as f:
        json.dump(header, f, indent=2)
    np.savez_compressed(
        os.path.join(directory, 'layers.npz'),
        geo=semantic_map.geo, geo_updates=semantic_map.geo_updates, sem=semantic_map.sem,
        unc_sum=semantic_map.unc_sum, unc_count=semantic_map.unc_count, train_count=semantic_map.train_count,
    )


def load_map(directory):
    header_path = os.path.join(directory, 'map.json')
    try:
        with open(header_path, 'r') as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DomainError(f"could not read map header {header_path}: {e}")
    if header.get('version') != MAP_FORMAT_VERSION:
        raise DomainError(f"unsupported map format version {header.get('version')}")

    semantic_map = MultiLayerMap(header['dims'], header['voxel_size'], header['num_classes'],
                                 header['origin'], OccupancyParams(**header['params']))
    with np.load(os.path.join(directory, 'layers.npz')) as layers:
        for name in ('geo', 'geo_updates', 'sem', 'unc_sum', 'unc_count', 'train_count'):
            setattr(semantic_map, name, layers[name].copy())
    return semantic_map


def _to_png(array, path):
    Image.fromarray(np.ascontiguousarray(np.clip(np.round(array * 255), 0, 255).astype(np.uint8).T)).save(path)


def export_layer_slices(semantic_map, directory):
    """One PNG per z-layer for occupancy, M_U, M_T and the ML class (images are y rows by x columns)."""
    os.makedirs(directory, exist_ok=True)
    occupancy = semantic_map.occupancy_prob()
    mean_unc = np.nan_to_num(semantic_map.mean_uncertainty(), nan=1.0)
    max_count = max(1, int(semantic_map.train_count.max()))
    ml_class = np.argmax(semantic_map.sem, axis=0) + 1
    observed = semantic_map.unc_count > 0

    for k in range(semantic_map.dims[2]):
        _to_png(occupancy[:, :, k], os.path.join(directory, f'occupancy_z{k:02d}.png'))
        _to_png(mean_unc[:, :, k], os.path.join(directory, f'uncertainty_z{k:02d}.png'))
        _to_png(semantic_map.train_count[:, :, k] / max_count, os.path.join(directory, f'train_count_z{k:02d}.png'))
        classes = np.where(observed[:, :, k], ml_class[:, :, k], 0).astype(np.uint8)
        Image.fromarray(np.ascontiguousarray(classes.T)).save(os.path.join(directory, f'classes_z{k:02d}.png'))
    logger.info(f"Exported {semantic_map.dims[2]} layer slices to {directory}")
