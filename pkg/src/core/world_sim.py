"""
Ground-truth world, nadir RGB-D sensor simulation, travel costs and the human-annotator oracle.

Ground-truth labels are kept in a private Frame field. Only ``annotate`` and the evaluation
module read them, through ``ground_truth``.
"""

import os
import math
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from dotenv import dotenv_values
from scipy.ndimage import gaussian_filter

from core.label_engine import SparseLabelImage
from utils.errors import DomainError, ConfigError

logger = logging.getLogger(__name__)

NUM_FEATURES = 3

# Mean colours of the first classes, roughly surface, building, low vegetation, tree, car, clutter
DEFAULT_PALETTE = (
    (0.80, 0.80, 0.80),
    (0.20, 0.20, 0.85),
    (0.30, 0.85, 0.85),
    (0.15, 0.60, 0.15),
    (0.90, 0.85, 0.20),
    (0.85, 0.20, 0.20),
    (0.55, 0.35, 0.20),
    (0.60, 0.20, 0.60),
)
DEFAULT_CLASS_HEIGHTS = {2: 3.0, 4: 2.0}


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float

    def as_array(self):
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def distance_to(self, other):
        return math.sqrt((self.x - other.x) ** 2 + (self.y - other.y) ** 2 + (self.z - other.z) ** 2)


@dataclass(frozen=True)
class CameraModel:
    """Nadir pinhole camera: ``width`` x ``height`` pixels covering a square ground footprint (meters)."""

    width: int
    height: int
    footprint: float

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ConfigError(f"camera resolution must be at least 2x2, got {self.width}x{self.height}")
        if self.footprint <= 0:
            raise ConfigError(f"camera footprint must be > 0, got {self.footprint}")

    @property
    def num_pixels(self):
        return self.width * self.height

    def with_resolution(self, width, height):
        """Same footprint at another resolution. Low-res views may be 1x1, so validation is bypassed."""
        camera = object.__new__(CameraModel)
        object.__setattr__(camera, 'width', int(width))
        object.__setattr__(camera, 'height', int(height))
        object.__setattr__(camera, 'footprint', self.footprint)
        return camera

    def ground_points(self, pose):
        """Ground-plane (x, y) each pixel looks at, as two (height, width) arrays."""
        cols = (np.arange(self.width) + 0.5) / self.width - 0.5
        rows = (np.arange(self.height) + 0.5) / self.height - 0.5
        gx = pose.x + cols[np.newaxis, :] * self.footprint
        gy = pose.y + rows[:, np.newaxis] * self.footprint
        return np.broadcast_to(gx, (self.height, self.width)).copy(), np.broadcast_to(gy, (self.height, self.width)).copy()


@dataclass
class WorldModel:
    class_raster: np.ndarray
    height_raster: np.ndarray
    feature_field: np.ndarray
    num_classes: int
    cell_size: float
    class_colors: np.ndarray = None

    def __post_init__(self):
        self.class_raster = np.asarray(self.class_raster, dtype=np.int64)
        self.height_raster = np.asarray(self.height_raster, dtype=np.float64)
        self.feature_field = np.asarray(self.feature_field, dtype=np.float64)
        if self.class_raster.ndim != 2:
            raise ConfigError("class raster must be two-dimensional")
        if self.height_raster.shape != self.class_raster.shape or self.feature_field.shape[:2] != self.class_raster.shape:
            raise ConfigError(
                f"raster dimensions differ: classes {self.class_raster.shape}, heights {self.height_raster.shape}, "
                f"features {self.feature_field.shape[:2]}"
            )
        if self.class_raster.min() < 1 or self.class_raster.max() > self.num_classes:
            raise ConfigError(f"class ids must lie in 1..{self.num_classes}")
        if not np.all(np.isfinite(self.height_raster)) or self.height_raster.min() < 0:
            raise ConfigError("heights must be finite and non-negative")
        if self.feature_field.min() < 0 or self.feature_field.max() > 1:
            raise ConfigError("features must lie in [0, 1]")

    @property
    def rows(self):
        return self.class_raster.shape[0]

    @property
    def cols(self):
        return self.class_raster.shape[1]

    @property
    def extent(self):
        """(W_m, L_m): extent along x (columns) and y (rows) in meters."""
        return self.cols * self.cell_size, self.rows * self.cell_size

    @property
    def max_height(self):
        return float(self.height_raster.max())

    def contains(self, x, y):
        width_m, length_m = self.extent
        return 0.0 <= x <= width_m and 0.0 <= y <= length_m

    def cell_index(self, x, y):
        """Row/column indices of the cells under points (x, y), clamped to the raster."""
        col = np.clip(np.floor(np.asarray(x) / self.cell_size).astype(np.int64), 0, self.cols - 1)
        row = np.clip(np.floor(np.asarray(y) / self.cell_size).astype(np.int64), 0, self.rows - 1)
        return row, col


@dataclass(frozen=True, eq=False)
class Frame:
    pose: Pose
    features: np.ndarray
    depth: np.ndarray
    frame_id: int
    kind: str = 'planned'
    _gt_labels: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self):
        return self.depth.shape


def ground_truth(frame):
    """Oracle access to a frame's hidden labels. Reserved for the annotator and evaluation."""
    return frame._gt_labels


def generate_world(size=128, num_classes=5, cell_size=1.0, seed=0, flat=False, smoothness=4.0,
                   variation=0.1, class_colors=None, class_heights=None):
    """
    Procedurally generate a world of blob-shaped class regions.

    Args:
        size (int): Cells per side
        num_classes (int): Number of classes K
        cell_size (float): Cell side in meters
        seed (int): Generator seed
        flat (bool): Force all heights to zero
        smoothness (float): Gaussian sigma (cells) of the class fields
        variation (float): Amplitude of the low-frequency colour variation
        class_colors (array-like, optional): K x 3 mean colours
        class_heights (dict, optional): class id -> height in meters

    Returns:
        WorldModel: The generated world
    """
    rng = np.random.default_rng(seed)
    if num_classes == 1:
        class_raster = np.ones((size, size), dtype=np.int64)
    else:
        fields_ = gaussian_filter(rng.standard_normal((num_classes, size, size)), sigma=(0, smoothness, smoothness))
        class_raster = np.argmax(fields_, axis=0) + 1

    colors = default_class_colors(num_classes, rng) if class_colors is None else np.asarray(class_colors, dtype=np.float64)
    heights_by_class = DEFAULT_CLASS_HEIGHTS if class_heights is None else class_heights
    height_raster = np.zeros((size, size), dtype=np.float64)
    if not flat:
        for class_id, height in heights_by_class.items():
            height_raster[class_raster == class_id] = height

    feature_field = render_feature_field(class_raster, colors, variation, rng)
    return WorldModel(class_raster, height_raster, feature_field, num_classes, cell_size, colors)


def default_class_colors(num_classes, rng):
    colors = [DEFAULT_PALETTE[k] for k in range(min(num_classes, len(DEFAULT_PALETTE)))]
    while len(colors) < num_classes:
        colors.append(tuple(rng.uniform(0.1, 0.9, size=NUM_FEATURES)))
    return np.array(colors, dtype=np.float64)


def render_feature_field(class_raster, class_colors, variation, rng):
    """Per-class mean colour plus smooth spatial variation, clipped to [0, 1]."""
    rows, cols = class_raster.shape
    base = class_colors[class_raster - 1]
    if variation <= 0:
        return np.clip(base, 0.0, 1.0)
    wobble = gaussian_filter(rng.standard_normal((rows, cols, NUM_FEATURES)), sigma=(8.0, 8.0, 0))
    scale = np.abs(wobble).max()
    if scale > 0:
        wobble = wobble / scale
    return np.clip(base + variation * wobble, 0.0, 1.0)


def sense(world, pose, camera, noise_seed, noise_amplitude=0.05, frame_id=0, kind='planned'):
    """
    Simulate one nadir RGB-D observation.

    Every pixel looks at the cell under its ground-plane point. Depth is the z-distance to the terrain,
    features are the cell's appearance plus seeded uniform noise. Pixels whose ground point leaves the
    world return NaN depth and the clamped border cell's appearance.
    """
    if not world.contains(pose.x, pose.y):
        width_m, length_m = world.extent
        raise DomainError(f"pose ({pose.x:.2f}, {pose.y:.2f}) outside world extent {width_m}x{length_m} m")
    if pose.z <= world.max_height:
        raise DomainError(f"pose altitude {pose.z} m not above the highest terrain ({world.max_height} m)")

    gx, gy = camera.ground_points(pose)
    row, col = world.cell_index(gx, gy)
    width_m, length_m = world.extent
    inside = (gx >= 0) & (gy >= 0) & (gx <= width_m) & (gy <= length_m)

    depth = pose.z - world.height_raster[row, col]
    depth = np.where(inside, depth, np.nan)

    features = world.feature_field[row, col].copy()
    if noise_amplitude > 0:
        rng = np.random.default_rng(noise_seed)
        features += rng.uniform(-noise_amplitude, noise_amplitude, size=features.shape)
        np.clip(features, 0.0, 1.0, out=features)

    gt_labels = world.class_raster[row, col].copy()
    return Frame(pose, features, depth, frame_id, kind, gt_labels)


def annotate(frame, pixels):
    """
    Human-annotator oracle: label the queried pixels with their ground-truth class.

    Args:
        frame (Frame): Frame to annotate
        pixels (array-like): (m, n) pixel coordinates; duplicates are dropped

    Returns:
        SparseLabelImage: Human labels at the queried pixels, void elsewhere
    """
    h, w = frame.shape
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if len(pixels):
        out_of_bounds = (pixels[:, 0] < 0) | (pixels[:, 0] >= h) | (pixels[:, 1] < 0) | (pixels[:, 1] >= w)
        if np.any(out_of_bounds):
            raise DomainError(f"frame {frame.frame_id}: pixel {pixels[out_of_bounds][0].tolist()} outside {h}x{w} image")
        _, first = np.unique(pixels[:, 0] * w + pixels[:, 1], return_index=True)
        pixels = pixels[np.sort(first)]
    labels = ground_truth(frame)[pixels[:, 0], pixels[:, 1]] if len(pixels) else np.zeros(0, dtype=np.int64)
    return SparseLabelImage(frame.frame_id, pixels, labels, 'human', len(pixels), (h, w))


class Annotator:
    """Counts every pixel query sent to the oracle so campaigns can audit the label flow."""

    def __init__(self):
        self.queries = 0
        self.frames = 0

    def annotate(self, frame, pixels):
        labels = annotate(frame, pixels)
        self.queries += labels.num_labels
        self.frames += 1
        return labels


def travel_cost(a, b, speed):
    """Straight-line flight time in seconds between two poses."""
    if speed <= 0:
        raise DomainError(f"speed must be > 0, got {speed}")
    return a.distance_to(b) / speed


def save_world(world, directory, height_scale=0.01):
    """
    Write a world as an indexed class PNG, a 16-bit height PNG and a key=value manifest.

    Returns:
        str: Path to the manifest
    """
    os.makedirs(directory, exist_ok=True)
    Image.fromarray(world.class_raster.astype(np.uint8)).save(os.path.join(directory, 'classes.png'))
    height_units = np.round(world.height_raster / height_scale).astype(np.uint16)
    Image.fromarray(height_units).save(os.path.join(directory, 'heights.png'))
    features_path = os.path.join(directory, 'features.npy')
    np.save(features_path, world.feature_field)

    lines = [
        f"cell_size={world.cell_size}",
        f"num_classes={world.num_classes}",
        "class_raster=classes.png",
        "height_raster=heights.png",
        f"height_scale={height_scale}",
        "feature_field=features.npy",
    ]
    colors = world.class_colors if world.class_colors is not None else default_class_colors(world.num_classes, np.random.default_rng(0))
    for k, color in enumerate(colors, start=1):
        lines.append(f"color_{k}=" + ",".join(f"{c:.4f}" for c in color))
    manifest_path = os.path.join(directory, 'world.txt')
    with open(manifest_path, 'w') as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Saved world ({world.rows}x{world.cols} cells, K={world.num_classes}) to {directory}")
    return manifest_path


def load_world(manifest_path, seed=0, variation=0.1):
    """
    Load a world from a key=value manifest.

    Required keys: ``cell_size``, ``num_classes``, ``class_raster`` (8-bit indexed image).
    Optional keys: ``height_raster`` (16-bit image) with ``height_scale`` meters per unit,
    ``feature_field`` (.npy), ``color_<k>=r,g,b`` in [0, 1]. Without a feature file, features are
    rendered from the class colours.
    """
    if not os.path.exists(manifest_path):
        raise ConfigError(f"world manifest not found: {manifest_path}")
    manifest = dotenv_values(manifest_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))

    try:
        cell_size = float(manifest['cell_size'])
        num_classes = int(manifest['num_classes'])
        class_file = manifest['class_raster']
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"world manifest {manifest_path} is missing or has an invalid key: {e}")

    class_raster = np.array(Image.open(os.path.join(base_dir, class_file)), dtype=np.int64)
    if class_raster.ndim != 2:
        raise ConfigError(f"class raster {class_file} must be a single-channel indexed image")

    if manifest.get('height_raster'):
        height_scale = float(manifest.get('height_scale') or 1.0)
        height_raster = np.array(Image.open(os.path.join(base_dir, manifest['height_raster'])), dtype=np.float64) * height_scale
    else:
        height_raster = np.zeros(class_raster.shape, dtype=np.float64)

    rng = np.random.default_rng(seed)
    colors = []
    for k in range(1, num_classes + 1):
        value = manifest.get(f'color_{k}')
        if value:
            colors.append([float(c) for c in value.split(',')])
        else:
            colors.append(None)
    defaults = default_class_colors(num_classes, rng)
    colors = np.array([c if c is not None else defaults[k] for k, c in enumerate(colors)], dtype=np.float64)

    if manifest.get('feature_field'):
        feature_field = np.load(os.path.join(base_dir, manifest['feature_field']))
    else:
        feature_field = render_feature_field(class_raster, colors, variation, rng)

    world = WorldModel(class_raster, height_raster, feature_field, num_classes, cell_size, colors)
    logger.info(f"Loaded world {manifest_path}: {world.rows}x{world.cols} cells of {cell_size} m, K={num_classes}")
    return world
