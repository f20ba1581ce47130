import numpy as np

from core.world_sim import CameraModel, Pose, WorldModel, ground_truth, sense
from core.surrogate_model import PredictionTensor, UncertaintyImage
from core.semantic_map import MultiLayerMap, integrate_frame


def flat_world(size=16, num_classes=2, seed=0):
    """Flat world of random 2x2-cell class blocks with class-coloured features."""
    rng = np.random.default_rng(seed)
    blocks = rng.integers(1, num_classes + 1, size=(size // 2, size // 2))
    classes = np.kron(blocks, np.ones((2, 2), dtype=np.int64))
    features = np.repeat((classes / (num_classes + 1))[:, :, None], 3, axis=2)
    return WorldModel(classes, np.zeros(classes.shape), features, num_classes, 1.0)


def oracle_prediction(frame, num_classes, confidence=0.9, u=0.1):
    """Probabilities peaked on the hidden labels, for mapping tests that need a perfect model."""
    gt = ground_truth(frame)
    h, w = gt.shape
    rest = (1.0 - confidence) / max(1, num_classes - 1)
    probs = np.full((num_classes, h, w), rest)
    for k in range(num_classes):
        probs[k][gt == k + 1] = confidence
    return PredictionTensor(probs, gt.copy()), UncertaintyImage(np.full((h, w), u))


def uniform_prediction(shape, num_classes):
    h, w = shape
    probs = np.full((num_classes, h, w), 1.0 / num_classes)
    return PredictionTensor(probs, np.ones((h, w), dtype=np.int64)), UncertaintyImage(np.ones((h, w)))


def mapped_world(world, camera, altitude, poses):
    """Map built by integrating noise-free oracle frames at the given (x, y) positions."""
    semantic_map = MultiLayerMap.for_world(world)
    frames = []
    for i, (x, y) in enumerate(poses):
        frame = sense(world, Pose(x, y, altitude), camera, noise_seed=0, noise_amplitude=0.0, frame_id=i)
        probs, unc = oracle_prediction(frame, world.num_classes)
        integrate_frame(semantic_map, frame, probs, unc, camera)
        frames.append(frame)
    return semantic_map, frames


def default_camera(size=8, footprint=4.0):
    return CameraModel(size, size, footprint)


def brute_force_supercover(start, end, dims):
    """Unit voxels (grid origin at 0) a segment crosses with positive length, ordered by entry parameter."""
    ii, jj, kk = np.meshgrid(*(np.arange(n) for n in dims), indexing='ij')
    corners = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1).astype(np.float64)
    d = np.asarray(end, dtype=np.float64) - start
    with np.errstate(divide='ignore', invalid='ignore'):
        t_a = (corners - start) / d
        t_b = (corners + 1.0 - start) / d
    t_lo = np.where(d == 0, np.where((start >= corners) & (start <= corners + 1), -np.inf, np.inf), np.minimum(t_a, t_b))
    t_hi = np.where(d == 0, np.where((start >= corners) & (start <= corners + 1), np.inf, -np.inf), np.maximum(t_a, t_b))
    t_in = np.maximum(t_lo.max(axis=1), 0.0)
    t_out = np.minimum(t_hi.min(axis=1), 1.0)
    crossed = t_out - t_in > 1e-9
    flat = np.flatnonzero(crossed)
    return flat[np.argsort(t_in[crossed], kind='stable')]
