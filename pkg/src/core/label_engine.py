"""
Sparse label selection.

Human queries are drawn from the most impure (or most uncertain) pixels of the model prediction,
pseudo labels from the least uncertain pixels of the map render. Every selector is a pure function
of its inputs and an explicit seed.
"""

import os
import math
import logging
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import ndimage
from scipy.special import xlogy

from utils.constants import VOID_CLASS
from utils.errors import ConfigError, DomainError
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

PROVENANCES = ('human', 'pseudo')


@dataclass
class SparseLabelImage:
    """Class labels on a subset of one frame's pixels; every other pixel is void."""

    frame_id: int
    pixels: np.ndarray       # (N, 2) int64 (m, n)
    classes: np.ndarray      # (N,) int64 in 1..K
    provenance: str
    alpha: int
    shape: tuple

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.pixels) != len(self.classes):
            raise DomainError(f"frame {self.frame_id}: {len(self.pixels)} pixels but {len(self.classes)} classes")
        if self.provenance not in PROVENANCES:
            raise DomainError(f"unknown label provenance '{self.provenance}'")
        if np.any(self.classes == VOID_CLASS):
            raise DomainError(f"frame {self.frame_id}: explicit entries may not carry the void class")
        if len(self.pixels):
            flat = self.pixels[:, 0] * self.shape[1] + self.pixels[:, 1]
            if len(np.unique(flat)) != len(flat):
                raise DomainError(f"frame {self.frame_id}: duplicate labelled pixels")

    @property
    def num_labels(self):
        return len(self.pixels)

    def to_dense(self):
        dense = np.full(self.shape, VOID_CLASS, dtype=np.int64)
        if self.num_labels:
            dense[self.pixels[:, 0], self.pixels[:, 1]] = self.classes
        return dense


@dataclass(frozen=True)
class SelectionConfig:
    alpha: int = 10
    beta: float = 5.0
    radius: int = 1
    seed: int = 0

    def validate(self, shape=None):
        if self.alpha < 1:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if not 0 < self.beta <= 100:
            raise ConfigError(f"beta must be in (0, 100], got {self.beta}")
        if self.radius < 1:
            raise ConfigError(f"radius must be >= 1, got {self.radius}")
        if shape is not None and self.alpha > pool_size(self.beta, shape[0] * shape[1]):
            raise ConfigError(f"alpha={self.alpha} exceeds the top-{self.beta}% pool of a {shape[0]}x{shape[1]} image")
        return self

    def reseeded(self, *parts):
        return SelectionConfig(self.alpha, self.beta, self.radius, derive_seed(self.seed, *parts))


def pool_size(beta, n):
    return min(n, math.ceil(beta / 100.0 * n))


def _ranked(scores, descending):
    """Flat indices sorted by score, ties broken by pixel order."""
    order_key = -scores if descending else scores
    return np.lexsort((np.arange(scores.size), order_key))


def _to_pixels(flat, width):
    flat = np.asarray(flat, dtype=np.int64)
    return np.stack([flat // width, flat % width], axis=1)


def region_impurity(ml_labels, r):
    """
    Entropy of the predicted classes in each pixel's (2r+1)x(2r+1) neighbourhood.

    Border pixels normalise by their in-bounds neighbour count. Natural log.

    Args:
        ml_labels (np.ndarray): (h, w) predicted class ids
        r (int): Neighbourhood radius

    Returns:
        np.ndarray: (h, w) non-negative impurity scores
    """
    if r < 1:
        raise ConfigError(f"neighbourhood radius must be >= 1, got {r}")
    ml_labels = np.asarray(ml_labels)
    kernel = np.ones((2 * r + 1, 2 * r + 1))
    totals = ndimage.convolve(np.ones(ml_labels.shape), kernel, mode='constant', cval=0.0)

    impurity = np.zeros(ml_labels.shape, dtype=np.float64)
    for k in np.unique(ml_labels):
        counts = ndimage.convolve((ml_labels == k).astype(np.float64), kernel, mode='constant', cval=0.0)
        share = counts / totals
        impurity -= xlogy(share, share)
    return np.maximum(impurity, 0.0)


def select_human_pixels_ours(prediction, cfg):
    """Sample α pixels uniformly from the top-β% by region impurity."""
    ml_labels = prediction.ml_labels
    h, w = ml_labels.shape
    rng = np.random.default_rng(cfg.seed)
    impurity = region_impurity(ml_labels, cfg.radius).ravel()

    if not np.any(impurity > 0):
        logger.warning(f"No impurity signal in a {h}x{w} prediction, falling back to {cfg.alpha} random pixels")
        return _to_pixels(rng.choice(h * w, size=min(cfg.alpha, h * w), replace=False), w)

    pool = _ranked(impurity, descending=True)[:pool_size(cfg.beta, h * w)]
    if len(pool) >= cfg.alpha:
        return _to_pixels(rng.choice(pool, size=cfg.alpha, replace=False), w)

    # pool exhausted: keep all of it and pad with random pixels outside it
    rest = np.setdiff1d(np.arange(h * w), pool)
    padding = rng.choice(rest, size=min(cfg.alpha - len(pool), len(rest)), replace=False)
    logger.warning(f"Top-{cfg.beta}% pool holds {len(pool)} < alpha={cfg.alpha} pixels, padded with {len(padding)} random")
    return _to_pixels(np.concatenate([pool, padding]), w)


def select_human_pixels_baseline(kind, prediction, uncertainty, cfg):
    """
    Baseline human selectors.

    ``random``: α uniform pixels. ``unc_rand``: α uniform from the top-β% most uncertain.
    ``rand_unc``: β% uniform pixels, then the α most uncertain of them.
    ``reg_imp`` / ``reg_imp_greedy``: the α pixels of highest region impurity.
    """
    h, w = prediction.ml_labels.shape
    n = h * w
    alpha = min(cfg.alpha, n)
    rng = np.random.default_rng(cfg.seed)
    u = np.asarray(uncertainty.u, dtype=np.float64).ravel()

    if kind == 'random':
        chosen = rng.choice(n, size=alpha, replace=False)
    elif kind == 'unc_rand':
        pool = _ranked(u, descending=True)[:pool_size(cfg.beta, n)]
        chosen = rng.choice(pool, size=min(alpha, len(pool)), replace=False)
    elif kind == 'rand_unc':
        subset = np.sort(rng.choice(n, size=max(alpha, pool_size(cfg.beta, n)), replace=False))
        chosen = subset[_ranked(u[subset], descending=True)[:alpha]]
    elif kind in ('reg_imp', 'reg_imp_greedy'):
        impurity = region_impurity(prediction.ml_labels, cfg.radius).ravel()
        chosen = _ranked(impurity, descending=True)[:alpha]
    else:
        raise ConfigError(f"unknown human selection baseline '{kind}'")
    return _to_pixels(chosen, w)


def select_dense_pixels(shape):
    h, w = shape
    return _to_pixels(np.arange(h * w), w)


def select_human_pixels(kind, prediction, uncertainty, cfg):
    if kind == 'ours':
        return select_human_pixels_ours(prediction, cfg)
    if kind == 'dense':
        return select_dense_pixels(prediction.ml_labels.shape)
    return select_human_pixels_baseline(kind, prediction, uncertainty, cfg)


def _pseudo_image(frame_id, flat, ml_labels, alpha, shape):
    flat = np.asarray(flat, dtype=np.int64)
    return SparseLabelImage(frame_id, _to_pixels(flat, shape[1]), ml_labels.ravel()[flat], 'pseudo', alpha, shape)


def _render_labels(pseudo_probs, hit_mask):
    ml_labels = np.argmax(pseudo_probs, axis=0) + 1
    return np.where(hit_mask, ml_labels, VOID_CLASS)


def select_pseudo_pixels_ours(frame_id, pseudo_probs, hit_mask, rendered_unc, cfg):
    """Sample α hit pixels uniformly from the lowest-β% rendered uncertainty; labels are the map's ML class."""
    shape = hit_mask.shape
    ml_labels = _render_labels(pseudo_probs, hit_mask)
    hits = np.flatnonzero(hit_mask.ravel())
    if len(hits) == 0:
        return _pseudo_image(frame_id, [], ml_labels, cfg.alpha, shape)
    if len(hits) < cfg.alpha:
        logger.info(f"Frame {frame_id}: only {len(hits)} hit pixels for alpha={cfg.alpha}, taking all")
        return _pseudo_image(frame_id, hits, ml_labels, cfg.alpha, shape)

    u = np.asarray(rendered_unc.u, dtype=np.float64).ravel()[hits]
    size = max(cfg.alpha, pool_size(cfg.beta, len(hits)))
    pool = hits[_ranked(u, descending=False)[:size]]
    rng = np.random.default_rng(cfg.seed)
    return _pseudo_image(frame_id, rng.choice(pool, size=cfg.alpha, replace=False), ml_labels, cfg.alpha, shape)


def class_quotas(histogram, alpha):
    """Split α across classes proportionally to a histogram by largest remainder; sums to exactly α."""
    histogram = np.asarray(histogram, dtype=np.float64)
    total = histogram.sum()
    if total <= 0:
        histogram = np.ones_like(histogram)
        total = histogram.sum()
    exact = alpha * histogram / total
    quotas = np.floor(exact).astype(np.int64)
    remainder = exact - quotas
    for k in np.lexsort((np.arange(len(remainder)), -remainder))[:alpha - quotas.sum()]:
        quotas[k] += 1
    return quotas


def select_pseudo_pixels_baseline(kind, frame_id, pseudo_probs, hit_mask, rendered_unc, human_class_histogram, cfg):
    """
    Baseline pseudo selectors.

    ``random``: α uniform hit pixels. ``dist_align``: per class, the lowest-uncertainty hit pixels of that
    class, with class quotas following the human-label class histogram (index k-1 holds class k).
    """
    shape = hit_mask.shape
    ml_labels = _render_labels(pseudo_probs, hit_mask)
    hits = np.flatnonzero(hit_mask.ravel())
    rng = np.random.default_rng(cfg.seed)

    if kind == 'random':
        chosen = rng.choice(hits, size=min(cfg.alpha, len(hits)), replace=False) if len(hits) else hits
    elif kind == 'dist_align':
        u = np.asarray(rendered_unc.u, dtype=np.float64).ravel()
        labels_flat = ml_labels.ravel()
        quotas = class_quotas(human_class_histogram, cfg.alpha)
        picked = []
        for k, quota in enumerate(quotas, start=1):
            members = hits[labels_flat[hits] == k]
            if quota == 0 or len(members) == 0:
                continue
            picked.append(members[_ranked(u[members], descending=False)[:quota]])
        chosen = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
    else:
        raise ConfigError(f"unknown pseudo selection baseline '{kind}'")
    return _pseudo_image(frame_id, chosen, ml_labels, cfg.alpha, shape)


def select_pseudo_labels(kind, frame_id, pseudo_probs, hit_mask, rendered_unc, cfg, human_class_histogram=None):
    if kind == 'ours':
        return select_pseudo_pixels_ours(frame_id, pseudo_probs, hit_mask, rendered_unc, cfg)
    if kind == 'none':
        return _pseudo_image(frame_id, [], np.zeros(hit_mask.shape, dtype=np.int64), cfg.alpha, hit_mask.shape)
    if kind == 'dense':
        ml_labels = _render_labels(pseudo_probs, hit_mask)
        return _pseudo_image(frame_id, np.flatnonzero(hit_mask.ravel()), ml_labels, hit_mask.size, hit_mask.shape)
    if human_class_histogram is None:
        human_class_histogram = np.ones(pseudo_probs.shape[0])
    return select_pseudo_pixels_baseline(kind, frame_id, pseudo_probs, hit_mask, rendered_unc, human_class_histogram, cfg)


def class_histogram(label_images, num_classes):
    """Counts of classes 1..K over a collection of sparse label images."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_images:
        if labels.num_labels:
            counts += np.bincount(labels.classes - 1, minlength=num_classes)[:num_classes]
    return counts


def rerender_all_pseudo(frames, semantic_map, camera, cfg, kind='ours', human_class_histogram=None, workers=1):
    """
    Re-render and re-select pseudo labels for every stored pseudo frame from the current map.

    Each frame's selection is seeded by its frame id, so an unchanged map gives identical labels.

    Returns:
        list: One SparseLabelImage per frame, in input order
    """
    from core.semantic_map import voxel_states, render_semantics, render_uncertainty

    states = voxel_states(semantic_map)

    def _select(frame):
        probs, hit_mask = render_semantics(semantic_map, frame.pose, camera, states=states)
        rendered_unc = render_uncertainty(semantic_map, frame.pose, camera, states=states)
        frame_cfg = cfg.reseeded('pseudo', int(frame.frame_id))
        return select_pseudo_labels(kind, frame.frame_id, probs, hit_mask, rendered_unc, frame_cfg, human_class_histogram)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            selections = list(executor.map(_select, frames))
    else:
        selections = [_select(frame) for frame in frames]
    logger.info(f"Re-rendered pseudo labels for {len(frames)} frames, {sum(s.num_labels for s in selections)} pixels")
    return selections


def save_labels(labels, path):
    """Write a sparse label file: a header line, then one ``m n k provenance`` line per entry."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    h, w = labels.shape
    with open(path, 'w') as f:
        f.write(f"frame_id={labels.frame_id} shape={h}x{w} alpha={labels.alpha}\n")
        for (m, n), k in zip(labels.pixels.tolist(), labels.classes.tolist()):
            f.write(f"{m} {n} {k} {labels.provenance}\n")


def load_labels(path, default_provenance='human'):
    """Read a sparse label file written by ``save_labels`` or by an external annotator."""
    try:
        with open(path, 'r') as f:
            lines = [line.strip() for line in f if line.strip()]
    except OSError as e:
        raise DomainError(f"could not read label file {path}: {e}")
    if not lines:
        raise DomainError(f"empty label file {path}")

    header = dict(item.split('=', 1) for item in lines[0].split())
    try:
        frame_id = int(header['frame_id'])
        h, w = (int(v) for v in header['shape'].split('x'))
        alpha = int(header.get('alpha', len(lines) - 1))
    except (KeyError, ValueError) as e:
        raise DomainError(f"malformed label header in {path}: {lines[0]!r} ({e})")

    pixels, classes, provenances = [], [], set()
    for line in lines[1:]:
        parts = line.split()
        if len(parts) not in (3, 4):
            raise DomainError(f"malformed label line in {path}: {line!r}")
        m, n, k = (int(v) for v in parts[:3])
        if not (0 <= m < h and 0 <= n < w):
            raise DomainError(f"label pixel ({m}, {n}) outside {h}x{w} image in {path}")
        pixels.append((m, n))
        classes.append(k)
        provenances.add(parts[3] if len(parts) == 4 else default_provenance)
    if len(provenances) > 1:
        raise DomainError(f"mixed provenances {sorted(provenances)} in {path}")
    provenance = provenances.pop() if provenances else default_provenance
    return SparseLabelImage(frame_id, pixels, classes, provenance, alpha, (h, w))


def label_filename(frame_id, provenance):
    return f"frame_{int(frame_id):05d}_{provenance}.txt"


def save_label_set(label_images, directory):
    os.makedirs(directory, exist_ok=True)
    for labels in label_images:
        save_labels(labels, os.path.join(directory, label_filename(labels.frame_id, labels.provenance)))


class FileAnnotator:
    """
    Annotator backed by externally produced label files (``frame_XXXXX_human.txt``).

    Queries are answered from the file; a queried pixel the file does not cover is an error.
    """

    def __init__(self, directory):
        self.directory = directory
        self.queries = 0
        self.frames = 0

    def annotate(self, frame, pixels):
        path = os.path.join(self.directory, label_filename(frame.frame_id, 'human'))
        available = load_labels(path)
        lookup = {tuple(p): k for p, k in zip(available.pixels.tolist(), available.classes.tolist())}
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        chosen, classes = [], []
        for m, n in pixels.tolist():
            if (m, n) in chosen:
                continue
            if (m, n) not in lookup:
                raise DomainError(f"frame {frame.frame_id}: pixel ({m}, {n}) not labelled in {path}")
            chosen.append((m, n))
            classes.append(lookup[(m, n)])
        self.queries += len(chosen)
        self.frames += 1
        return SparseLabelImage(frame.frame_id, chosen, classes, 'human', len(chosen), frame.shape)
