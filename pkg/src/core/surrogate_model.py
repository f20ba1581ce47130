"""
Per-pixel probabilistic classifier over a local feature patch, with Monte-Carlo dropout.

Dropout masks are drawn from explicit ``torch.Generator`` objects so inference and training stay
reproducible when several campaigns run in parallel threads.
"""

import os
import copy
import math
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view

from utils.constants import CHECKPOINT_VERSION
from utils.errors import DomainError, TrainingError
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass
class PredictionTensor:
    probs: np.ndarray        # (K, h, w)
    ml_labels: np.ndarray    # (h, w), class ids 1..K, ties to the lowest id


@dataclass
class UncertaintyImage:
    u: np.ndarray            # (h, w) in [0, 1]


class SurrogateModel(nn.Module):
    """Two hidden ReLU layers with dropout over a (2q+1)x(2q+1)xF feature patch, K softmax outputs."""

    def __init__(self, num_classes, num_features=3, patch_radius=2, hidden=32, dropout=0.5, seed=0):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise DomainError(f"dropout probability must be in [0, 1), got {dropout}")
        self.num_classes = num_classes
        self.num_features = num_features
        self.patch_radius = patch_radius
        self.hidden = hidden
        self.dropout = dropout
        self.seed = seed

        in_dim = (2 * patch_radius + 1) ** 2 * num_features
        self.layer1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.layer2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.output = nn.Linear(hidden, num_classes, dtype=DTYPE)
        self._init_parameters(seed)

    def _init_parameters(self, seed):
        generator = torch.Generator()
        generator.manual_seed(seed)
        with torch.no_grad():
            for layer in (self.layer1, self.layer2, self.output):
                fan_out, fan_in = layer.weight.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
                layer.bias.zero_()

    @property
    def input_dim(self):
        return self.layer1.in_features

    def header(self):
        return {
            'num_classes': self.num_classes,
            'num_features': self.num_features,
            'patch_radius': self.patch_radius,
            'hidden': self.hidden,
            'dropout': self.dropout,
            'seed': self.seed,
            'input_dim': self.input_dim,
        }

    def _drop(self, h, generator):
        if self.dropout == 0.0:
            return h
        keep = 1.0 - self.dropout
        mask = torch.bernoulli(torch.full_like(h, keep), generator=generator)
        return h * mask / keep

    def forward(self, x, generator=None, stochastic=False):
        h = F.relu(self.layer1(x))
        if stochastic:
            h = self._drop(h, generator)
        h = F.relu(self.layer2(h))
        if stochastic:
            h = self._drop(h, generator)
        return self.output(h)

    def check_finite(self):
        for name, param in self.named_parameters():
            if not torch.all(torch.isfinite(param)):
                raise TrainingError(f"non-finite values in model parameter '{name}'")


def extract_patches(features, radius, pixels=None):
    """
    Edge-padded feature patches around pixels.

    Args:
        features (np.ndarray): (h, w, F) image features
        radius (int): Patch half-width q
        pixels (np.ndarray, optional): (n, 2) pixel coordinates; all pixels in row-major order if omitted

    Returns:
        torch.Tensor: (n, (2q+1)^2 * F) float64 patches
    """
    features = np.asarray(features, dtype=np.float64)
    padded = np.pad(features, ((radius, radius), (radius, radius), (0, 0)), mode='edge')
    size = 2 * radius + 1
    windows = sliding_window_view(padded, (size, size), axis=(0, 1))  # (h, w, F, size, size)
    if pixels is None:
        flat = windows.reshape(features.shape[0] * features.shape[1], -1)
    else:
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        flat = windows[pixels[:, 0], pixels[:, 1]].reshape(len(pixels), -1)
    return torch.from_numpy(np.ascontiguousarray(flat))


def mc_seed(base_seed, frame_id):
    """Seed of the stochastic passes for one frame, shared by online integration and map rebuilds."""
    return derive_seed(base_seed, 'mc', int(frame_id))


def _to_prediction(probs_flat, shape, num_classes):
    probs = probs_flat.T.reshape(num_classes, *shape).numpy()
    ml_labels = np.argmax(probs, axis=0) + 1
    return PredictionTensor(probs, ml_labels)


def predict_features(model, features):
    """Deterministic class probabilities (dropout disabled) for an (h, w, F) feature image."""
    model.check_finite()
    h, w = features.shape[:2]
    x = extract_patches(features, model.patch_radius)
    model.eval()
    with torch.no_grad():
        probs = F.softmax(model(x), dim=1)
    return _to_prediction(probs, (h, w), model.num_classes)


def predict(model, frame):
    return predict_features(model, frame.features)


def normalized_entropy(probs, num_classes):
    """Predictive entropy divided by ln K, per row of an (n, K) probability tensor, clipped to [0, 1]."""
    if num_classes <= 1:
        return torch.zeros(probs.shape[0], dtype=probs.dtype)
    entropy = -torch.xlogy(probs, probs).sum(dim=1)
    return torch.clamp(entropy / math.log(num_classes), 0.0, 1.0)


def mc_predict(model, frame, num_samples, seed):
    """
    Mean of ``num_samples`` stochastic forward passes and its normalized predictive entropy.

    Returns:
        tuple: (PredictionTensor, UncertaintyImage)
    """
    if num_samples < 1:
        raise DomainError(f"number of MC samples must be >= 1, got {num_samples}")
    model.check_finite()
    h, w = frame.shape
    x = extract_patches(frame.features, model.patch_radius)
    generator = torch.Generator()
    generator.manual_seed(seed)

    model.eval()
    with torch.no_grad():
        total = torch.zeros(x.shape[0], model.num_classes, dtype=DTYPE)
        for _ in range(num_samples):
            total += F.softmax(model(x, generator=generator, stochastic=True), dim=1)
        mean = total / num_samples
        u = normalized_entropy(mean, model.num_classes)
    return _to_prediction(mean, (h, w), model.num_classes), UncertaintyImage(u.reshape(h, w).numpy())


def clone_model(model):
    return copy.deepcopy(model)


def save_checkpoint(model, path, extra=None):
    """Versioned checkpoint: header (dims, p, K, seed) plus parameter tensors."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        'version': CHECKPOINT_VERSION,
        'header': model.header(),
        'extra': extra or {},
        'state_dict': model.state_dict(),
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path):
    if not os.path.exists(path):
        raise DomainError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location='cpu', weights_only=True)
    if payload.get('version') != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {payload.get('version')} in {path}")
    header = payload['header']
    model = SurrogateModel(
        num_classes=header['num_classes'],
        num_features=header['num_features'],
        patch_radius=header['patch_radius'],
        hidden=header['hidden'],
        dropout=header['dropout'],
        seed=header['seed'],
    )
    model.load_state_dict(payload['state_dict'])
    return model
