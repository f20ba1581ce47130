import logging
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from utils.constants import VOID_CLASS
from utils.errors import DomainError
from utils.seeding import numpy_rng

logger = logging.getLogger(__name__)


class ConfusionMatrix:
    """K x K pixel counts, rows ground truth, columns prediction. Void ground truth is never counted."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)

    @property
    def total(self):
        return int(self.counts.sum())

    def accumulate(self, gt, pred, ignore=None):
        """
        Add one label image pair.

        Args:
            gt (np.ndarray): Ground-truth class ids 1..K (0 = void, skipped)
            pred (np.ndarray): Predicted class ids 1..K, same shape
            ignore (np.ndarray, optional): Extra boolean mask of pixels to skip
        """
        gt = np.asarray(gt).ravel()
        pred = np.asarray(pred).ravel()
        if gt.shape != pred.shape:
            raise DomainError(f"label images differ in size: {gt.shape} vs {pred.shape}")
        keep = gt != VOID_CLASS
        if ignore is not None:
            keep &= ~np.asarray(ignore, dtype=bool).ravel()
        g = gt[keep] - 1
        p = pred[keep] - 1
        k = self.num_classes
        if len(g) and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
            raise DomainError(f"class ids outside 1..{k}")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def per_class_iou(cm):
    """IoU per class; NaN for classes absent from both ground truth and prediction."""
    if cm.total == 0:
        raise DomainError("confusion matrix is empty")
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm):
    return float(np.nanmean(per_class_iou(cm)))


def accuracy(cm):
    if cm.total == 0:
        raise DomainError("confusion matrix is empty")
    return float(np.trace(cm.counts) / cm.total)


@dataclass
class EvaluationResult:
    miou: float
    accuracy: float
    per_class_iou: np.ndarray
    confusion: ConfusionMatrix

    def as_row(self):
        row = {'miou': self.miou, 'accuracy': self.accuracy}
        for k, value in enumerate(self.per_class_iou, start=1):
            row[f'iou_class_{k}'] = value
        return row


def evaluation_poses(world, camera, altitude, grid, seed):
    """Seeded, jittered grid x grid poses over the world with the footprint kept inside it."""
    from core.world_sim import Pose

    width_m, length_m = world.extent
    rng = numpy_rng(seed, 'evaluation')
    poses = []
    for j in range(grid):
        for i in range(grid):
            x, y = (i + 0.5) * width_m / grid, (j + 0.5) * length_m / grid
            x += rng.uniform(-0.25, 0.25) * width_m / grid
            y += rng.uniform(-0.25, 0.25) * length_m / grid
            half = camera.footprint / 2.0
            x = min(max(x, half), width_m - half) if width_m > camera.footprint else width_m / 2.0
            y = min(max(y, half), length_m - half) if length_m > camera.footprint else length_m / 2.0
            poses.append(Pose(x, y, altitude))
    return poses


def build_evaluation_set(world, camera, altitude, grid=4, seed=0):
    """Noise-free held-out frames on an evaluation grid. Frame ids are negative to keep them apart from training frames."""
    from core.world_sim import sense

    return [
        sense(world, pose, camera, noise_seed=0, noise_amplitude=0.0, frame_id=-(i + 1), kind='evaluation')
        for i, pose in enumerate(evaluation_poses(world, camera, altitude, grid, seed))
    ]


def evaluate(model, frames, num_classes=None, workers=1):
    """Confusion-matrix metrics of ``model`` over held-out frames, merged across frames."""
    from core.surrogate_model import predict
    from core.world_sim import ground_truth

    num_classes = num_classes or model.num_classes

    def _frame_matrix(frame):
        prediction = predict(model, frame)
        return ConfusionMatrix(num_classes).accumulate(ground_truth(frame), prediction.ml_labels,
                                                       ignore=~np.isfinite(frame.depth))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            matrices = list(executor.map(_frame_matrix, frames))
    else:
        matrices = [_frame_matrix(frame) for frame in frames]

    total = ConfusionMatrix(num_classes)
    for matrix in matrices:
        total = total.merge(matrix)
    return EvaluationResult(miou(total), accuracy(total), per_class_iou(total), total)
