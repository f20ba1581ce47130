"""
Semi-supervised training of the surrogate model on sparse human and pseudo labels.

The objective is a masked cross-entropy: void pixels contribute nothing, the human and pseudo terms are
each normalised by (frames x alpha), and an L2 term with the dropout-derived weight decay is added.
"""

import os
import copy
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.optim import SGD
from torch.optim.lr_scheduler import OneCycleLR
from tqdm import tqdm

from core.eval_metrics import ConfusionMatrix, miou
from core.surrogate_model import extract_patches, clone_model
from utils.errors import ConfigError, DomainError, TrainingError
from utils.seeding import derive_seed, numpy_rng, torch_generator

logger = logging.getLogger(__name__)

# Share of the one-cycle schedule spent warming up; early stopping waits for the peak
WARMUP_FRACTION = 0.3


@dataclass
class TrainingSet:
    human: list = field(default_factory=list)    # (Frame, SparseLabelImage)
    pseudo: list = field(default_factory=list)

    def __post_init__(self):
        for name, items, provenance in (('human', self.human, 'human'), ('pseudo', self.pseudo, 'pseudo')):
            for frame, labels in items:
                if labels.provenance != provenance:
                    raise DomainError(f"frame {frame.frame_id}: {labels.provenance} labels in the {name} list")

    @property
    def n_l(self):
        return len(self.human)

    @property
    def n_u(self):
        return len(self.pseudo)

    @property
    def labelled_pixels(self):
        return sum(labels.num_labels for _, labels in self.human)


@dataclass(frozen=True)
class TrainConfig:
    alpha: int = 10
    pseudo_alpha: Optional[int] = None
    dropout: float = 0.5
    peak_lr: float = 0.05
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    weight_decay: Optional[float] = None

    def validate(self):
        if self.alpha < 1 or (self.pseudo_alpha is not None and self.pseudo_alpha < 1):
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}/{self.pseudo_alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ConfigError(f"validation fraction must be in [0, 0.5], got {self.val_fraction}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak learning rate must be > 0, got {self.peak_lr}")
        return self


@dataclass
class LabelledItem:
    """Patches and 0-based targets of one labelled frame."""
    frame_id: int
    provenance: str
    x: torch.Tensor
    y: torch.Tensor


@dataclass
class TrainingReport:
    rows: List[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_miou: float = float('nan')
    weight_decay: float = 0.0

    @property
    def final_loss(self):
        return self.rows[-1]['train_loss'] if self.rows else float('nan')

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=['epoch', 'train_loss', 'val_miou', 'lr'])

    def save_csv(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_frame().to_csv(path, index=False)


def weight_decay(p, n_l, n_u):
    """λ = (1 - p) / (2N) with N = N_l + N_u."""
    n = n_l + n_u
    if n <= 0:
        raise DomainError("weight decay needs at least one training frame")
    return (1.0 - p) / (2.0 * n)


def to_item(frame, labels, patch_radius):
    x = extract_patches(frame.features, patch_radius, labels.pixels)
    y = torch.from_numpy(labels.classes - 1)
    return LabelledItem(frame.frame_id, labels.provenance, x, y)


def _nll_sum(model, items, generator):
    labelled = [item for item in items if len(item.y)]
    if not labelled:
        return torch.zeros((), dtype=torch.float64)
    x = torch.cat([item.x for item in labelled])
    y = torch.cat([item.y for item in labelled])
    logits = model(x, generator=generator, stochastic=generator is not None)
    return F.nll_loss(F.log_softmax(logits, dim=1), y, reduction='sum')


def _offending_frame(model, items, generator):
    for item in items:
        if len(item.y) and not torch.isfinite(_nll_sum(model, [item], None)):
            return item.frame_id
    return items[0].frame_id if items else None


def masked_loss(model, batch, alpha, lam, pseudo_alpha=None, generator=None):
    """
    Masked semi-supervised cross-entropy over a batch of labelled frames.

    Args:
        model (SurrogateModel): Model being trained
        batch (list): LabelledItem objects; void pixels are simply absent
        alpha (int): Label count normaliser of human frames
        lam (float): L2 weight
        pseudo_alpha (int, optional): Normaliser of pseudo frames, defaults to ``alpha``
        generator (torch.Generator, optional): Enables dropout with this generator

    Returns:
        torch.Tensor: Scalar loss with autograd graph
    """
    if alpha < 1:
        raise DomainError(f"alpha must be >= 1, got {alpha}")
    pseudo_alpha = pseudo_alpha or alpha
    human = [item for item in batch if item.provenance == 'human']
    pseudo = [item for item in batch if item.provenance == 'pseudo']

    loss = lam * sum((param ** 2).sum() for param in model.parameters())
    if human:
        loss = loss + _nll_sum(model, human, generator) / (len(human) * alpha)
    if pseudo:
        loss = loss + _nll_sum(model, pseudo, generator) / (len(pseudo) * pseudo_alpha)

    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss on frame {_offending_frame(model, batch, generator)}")
    return loss


def loss_and_gradient(model, batch, alpha, lam, pseudo_alpha=None):
    """Deterministic loss value and its exact gradient, flattened in parameter order."""
    params = list(model.parameters())
    loss = masked_loss(model, batch, alpha, lam, pseudo_alpha)
    grads = torch.autograd.grad(loss, params)
    return float(loss.detach()), torch.cat([g.reshape(-1) for g in grads]).numpy()


def split_validation(human_items, val_fraction, seed):
    """
    Hold out a seeded fraction of all human-labelled pixels.

    Returns:
        tuple: (training items, validation patches, validation targets)
    """
    counts = [len(item.y) for item in human_items]
    total = sum(counts)
    n_val = int(np.floor(val_fraction * total))
    if n_val == 0:
        return list(human_items), None, None

    rng = numpy_rng(seed, 'validation')
    held = np.zeros(total, dtype=bool)
    held[rng.permutation(total)[:n_val]] = True

    train_items, val_x, val_y = [], [], []
    offset = 0
    for item, count in zip(human_items, counts):
        mask = torch.from_numpy(held[offset:offset + count])
        offset += count
        train_items.append(LabelledItem(item.frame_id, item.provenance, item.x[~mask], item.y[~mask]))
        val_x.append(item.x[mask])
        val_y.append(item.y[mask])
    return train_items, torch.cat(val_x), torch.cat(val_y)


def _val_miou(model, val_x, val_y):
    model.eval()
    with torch.no_grad():
        pred = torch.argmax(model(val_x), dim=1)
    cm = ConfusionMatrix(model.num_classes)
    cm.accumulate(val_y.numpy() + 1, pred.numpy() + 1)
    return miou(cm)


def warmup_epoch_count(max_epochs):
    """First epoch at or past the learning-rate peak; earlier epochs are never kept as best."""
    return min(max_epochs, max(1, int(np.ceil(WARMUP_FRACTION * max_epochs - 1e-9))))


def train(initial_model, training_set, cfg, progress=False):
    """
    Train a copy of ``initial_model`` and return it with a report.

    Mini-batch SGD with momentum under a one-cycle schedule. Batches mix human and pseudo frames from a
    seeded permutation. After the warm-up, stops early on validation mIoU (training loss if nothing is
    held out; ties keep the later epoch) and restores the best parameters.

    Returns:
        tuple: (trained SurrogateModel, TrainingReport)
    """
    cfg.validate()
    if training_set.n_l + training_set.n_u == 0:
        raise DomainError("training set is empty")
    lam = cfg.weight_decay if cfg.weight_decay is not None else weight_decay(cfg.dropout, training_set.n_l, training_set.n_u)

    model = clone_model(initial_model)
    radius = model.patch_radius
    human_items = [to_item(frame, labels, radius) for frame, labels in training_set.human]
    pseudo_items = [to_item(frame, labels, radius) for frame, labels in training_set.pseudo]
    human_items, val_x, val_y = split_validation(human_items, cfg.val_fraction, cfg.seed)
    items = human_items + pseudo_items

    batches_per_epoch = int(np.ceil(len(items) / cfg.batch_size))
    optimizer = SGD(model.parameters(), lr=cfg.peak_lr, momentum=0.9)
    scheduler = OneCycleLR(optimizer, max_lr=cfg.peak_lr, total_steps=cfg.max_epochs * batches_per_epoch,
                           pct_start=WARMUP_FRACTION)
    warmup_epochs = warmup_epoch_count(cfg.max_epochs)
    order_rng = numpy_rng(cfg.seed, 'batches')
    dropout_gen = torch_generator(cfg.seed, 'dropout')

    report = TrainingReport(weight_decay=lam)
    best_state = copy.deepcopy(model.state_dict())
    best_score = -np.inf
    stale = 0

    for epoch in tqdm(range(1, cfg.max_epochs + 1), desc="Training", disable=not progress):
        model.train()
        epoch_loss = 0.0
        lr = optimizer.param_groups[0]['lr']
        order = order_rng.permutation(len(items))
        for start in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = masked_loss(model, batch, cfg.alpha, lam, cfg.pseudo_alpha, dropout_gen)
            loss.backward()
            optimizer.step()
            scheduler.step()
            epoch_loss += float(loss.detach())
        epoch_loss /= batches_per_epoch
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"training diverged at epoch {epoch}")

        val_score = _val_miou(model, val_x, val_y) if val_x is not None else float('nan')
        report.rows.append({'epoch': epoch, 'train_loss': epoch_loss, 'val_miou': val_score, 'lr': lr})

        if epoch < warmup_epochs:
            continue
        score = val_score if val_x is not None else -epoch_loss
        if score >= best_score or report.best_epoch == 0:
            best_score = score
            best_state = copy.deepcopy(model.state_dict())
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    report.stopped_epoch = len(report.rows)
    report.best_val_miou = best_score if val_x is not None else float('nan')
    model.load_state_dict(best_state)
    model.check_finite()
    logger.info(
        f"Trained on {training_set.n_l} human / {training_set.n_u} pseudo frames: "
        f"stopped at epoch {report.stopped_epoch}, best epoch {report.best_epoch}, lambda={lam:.5f}"
    )
    return model, report
