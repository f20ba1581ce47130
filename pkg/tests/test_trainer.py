import math

import numpy as np
import pytest
import torch

from core.world_sim import CameraModel, Pose, annotate, sense
from core.surrogate_model import SurrogateModel, predict
from core.label_engine import SparseLabelImage
from core.trainer import (
    LabelledItem, TrainConfig, TrainingSet, loss_and_gradient, masked_loss, split_validation, to_item, train,
    warmup_epoch_count, weight_decay,
)
from utils.errors import ConfigError, DomainError, TrainingError
from helpers import flat_world


def item(frame_id, provenance, x, y):
    return LabelledItem(frame_id, provenance, torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(-1, 3)),
                        torch.as_tensor(np.asarray(y, dtype=np.int64)))


def constant_model(bias, num_classes=2):
    model = SurrogateModel(num_classes, patch_radius=0, hidden=4, dropout=0.0, seed=0)
    with torch.no_grad():
        model.output.weight.zero_()
        model.output.bias.copy_(torch.tensor(bias, dtype=torch.float64))
    return model


def random_items(rng, num_classes, frames, provenance, start_id=0):
    items = []
    for f in range(frames):
        n = int(rng.integers(1, 5))
        items.append(item(start_id + f, provenance, rng.uniform(size=(n, 3)), rng.integers(0, num_classes, size=n)))
    return items


def squared_norm(model):
    return float(sum((p.detach() ** 2).sum() for p in model.parameters()))


def distance_to_kink(model, batch):
    """Smallest |pre-activation| of a hidden unit over the batch; finite differences straddle the ReLU kink below it."""
    x = torch.cat([it.x for it in batch])
    with torch.no_grad():
        first = model.layer1(x)
        second = model.layer2(torch.relu(first))
    return float(min(first.abs().min(), second.abs().min()))


def test_weight_decay_rule():
    assert weight_decay(0.5, 8, 8) == pytest.approx(0.015625)
    assert weight_decay(1.0, 3, 5) == 0.0
    assert weight_decay(0.5, 8, 8) == pytest.approx(2 * weight_decay(0.5, 16, 16))
    with pytest.raises(DomainError):
        weight_decay(0.5, 0, 0)


def test_all_void_batch_is_pure_weight_decay():
    model = SurrogateModel(3, patch_radius=0, hidden=4, seed=1)
    batch = [item(0, 'human', np.zeros((0, 3)), []), item(1, 'pseudo', np.zeros((0, 3)), [])]
    loss = masked_loss(model, batch, alpha=5, lam=0.01)
    assert float(loss) == pytest.approx(0.01 * squared_norm(model), rel=1e-12)


def test_perfect_prediction_has_zero_loss():
    model = constant_model([100.0, 0.0])
    loss = masked_loss(model, [item(0, 'human', [[0.2, 0.3, 0.4]], [0])], alpha=1, lam=0.0)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_even_prediction_costs_ln2():
    model = constant_model([0.0, 0.0])
    loss = masked_loss(model, [item(0, 'human', [[0.2, 0.3, 0.4]], [1])], alpha=1, lam=0.0)
    assert float(loss) == pytest.approx(math.log(2), abs=1e-12)


def test_human_and_pseudo_terms_are_normalised_separately():
    model = constant_model([0.0, 0.0])
    human = [item(0, 'human', [[0.1, 0.1, 0.1]] * 2, [0, 1]), item(1, 'human', [[0.1, 0.1, 0.1]], [1])]
    pseudo = [item(2, 'pseudo', [[0.1, 0.1, 0.1]] * 4, [0, 0, 1, 1])]
    loss = masked_loss(model, human + pseudo, alpha=4, lam=0.0, pseudo_alpha=8)
    assert float(loss) == pytest.approx(3 * math.log(2) / (2 * 4) + 4 * math.log(2) / (1 * 8), abs=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    eps = 1e-5
    for instance in range(20):
        model = SurrogateModel(3, patch_radius=0, hidden=4, dropout=0.5, seed=instance)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.from_numpy(rng.normal(scale=0.1, size=tuple(p.shape))))
        batch = random_items(rng, 3, 2, 'human') + random_items(rng, 3, 2, 'pseudo', start_id=10)
        while distance_to_kink(model, batch) < 1e-4:
            batch = random_items(rng, 3, 2, 'human') + random_items(rng, 3, 2, 'pseudo', start_id=10)
        _, grad = loss_and_gradient(model, batch, alpha=3, lam=0.02, pseudo_alpha=2)

        numeric = []
        with torch.no_grad():
            for p in model.parameters():
                flat = p.view(-1)
                for i in range(flat.numel()):
                    original = flat[i].item()
                    flat[i] = original + eps
                    up = float(masked_loss(model, batch, 3, 0.02, 2))
                    flat[i] = original - eps
                    down = float(masked_loss(model, batch, 3, 0.02, 2))
                    flat[i] = original
                    numeric.append((up - down) / (2 * eps))
        numeric = np.array(numeric)
        scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(grad - numeric) / scale < 1e-4


def test_loss_ignores_pixel_and_frame_order():
    rng = np.random.default_rng(1)
    model = SurrogateModel(3, patch_radius=0, hidden=4, seed=2)
    batch = random_items(rng, 3, 3, 'human') + random_items(rng, 3, 2, 'pseudo', start_id=5)
    shuffled = []
    for it in reversed(batch):
        order = torch.from_numpy(rng.permutation(len(it.y)))
        shuffled.append(LabelledItem(it.frame_id, it.provenance, it.x[order], it.y[order]))
    assert float(masked_loss(model, shuffled, 4, 0.01)) == pytest.approx(float(masked_loss(model, batch, 4, 0.01)), rel=1e-12)


def test_void_only_frame_rescales_the_normaliser():
    rng = np.random.default_rng(2)
    model = SurrogateModel(3, patch_radius=0, hidden=4, seed=3)
    human = random_items(rng, 3, 2, 'human')
    pseudo = random_items(rng, 3, 3, 'pseudo', start_id=5)
    void_human = item(99, 'human', np.zeros((0, 3)), [])
    void_pseudo = item(98, 'pseudo', np.zeros((0, 3)), [])

    human_term = float(masked_loss(model, human, 4, 0.0))
    pseudo_term = float(masked_loss(model, pseudo, 4, 0.0))
    assert float(masked_loss(model, human + [void_human] + pseudo, 4, 0.0)) == pytest.approx(
        human_term * 2 / 3 + pseudo_term, rel=1e-12)
    assert float(masked_loss(model, human + pseudo + [void_pseudo], 4, 0.0)) == pytest.approx(
        human_term + pseudo_term * 3 / 4, rel=1e-12)

    lam_before = weight_decay(0.5, 2, 3)
    lam_after = weight_decay(0.5, 3, 3)
    assert lam_after / lam_before == pytest.approx(5 / 6)


def test_empty_pseudo_list_is_human_only_objective():
    rng = np.random.default_rng(3)
    model = SurrogateModel(3, patch_radius=0, hidden=4, seed=4)
    human = random_items(rng, 3, 2, 'human')
    assert float(masked_loss(model, human, 4, 0.01)) == pytest.approx(
        float(masked_loss(model, human + [item(7, 'pseudo', np.zeros((0, 3)), [])], 4, 0.01)), rel=1e-12)


def test_non_finite_loss_names_the_frame():
    model = SurrogateModel(2, patch_radius=0, hidden=4, seed=0)
    batch = [item(3, 'human', [[0.1, 0.2, 0.3]], [0]), item(42, 'human', [[float('nan'), 0.2, 0.3]], [1])]
    with pytest.raises(TrainingError, match='frame 42'):
        masked_loss(model, batch, 1, 0.0)


def test_alpha_must_be_positive():
    with pytest.raises(DomainError):
        masked_loss(SurrogateModel(2, patch_radius=0, hidden=4), [], 0, 0.0)


def test_split_validation_holds_out_a_fraction():
    rng = np.random.default_rng(4)
    items = [item(i, 'human', rng.uniform(size=(5, 3)), rng.integers(0, 2, size=5)) for i in range(4)]
    train_items, val_x, val_y = split_validation(items, 0.25, seed=1)
    assert len(val_y) == 5
    assert sum(len(it.y) for it in train_items) == 15
    assert val_x.shape == (5, 3)
    again = split_validation(items, 0.25, seed=1)
    assert torch.equal(again[2], val_y)
    assert split_validation(items, 0.0, seed=1)[1] is None


def labelled_frames(world, camera, poses, pixels=None):
    human = []
    for i, (x, y) in enumerate(poses):
        frame = sense(world, Pose(x, y, 20.0), camera, noise_seed=i, noise_amplitude=0.05, frame_id=i)
        query = pixels if pixels is not None else np.argwhere(np.ones(frame.shape, dtype=bool))
        human.append((frame, annotate(frame, query)))
    return human


def test_single_pixel_converges():
    world = flat_world(16)
    human = labelled_frames(world, CameraModel(8, 8, 4.0), [(8.0, 8.0)], pixels=[[3, 3]])
    model = SurrogateModel(2, patch_radius=0, hidden=8, dropout=0.0, seed=0)
    cfg = TrainConfig(alpha=1, peak_lr=0.2, batch_size=1, max_epochs=300, patience=300, val_fraction=0.0, weight_decay=0.0)
    trained, report = train(model, TrainingSet(human, []), cfg)
    frame, labels = human[0]
    assert float(masked_loss(trained, [to_item(frame, labels, 0)], 1, 0.0)) < 1e-2
    assert report.stopped_epoch == 300
    assert report.best_epoch >= 1


def test_early_stopping_waits_for_learning_rate_peak():
    world = flat_world(32, num_classes=3, seed=4)
    rng = np.random.default_rng(5)
    poses = [(8.0, 8.0), (24.0, 8.0), (8.0, 24.0), (24.0, 24.0)]
    pixels = np.stack([rng.integers(0, 16, size=10), rng.integers(0, 16, size=10)], axis=1)
    human = labelled_frames(world, CameraModel(16, 16, 8.0), poses, pixels=pixels)
    cfg = TrainConfig(alpha=10)
    _, report = train(SurrogateModel(3, seed=0), TrainingSet(human, []), cfg)
    assert warmup_epoch_count(cfg.max_epochs) == 60
    assert report.best_epoch >= 60
    assert report.stopped_epoch >= report.best_epoch


def test_flat_validation_score_keeps_latest_epoch():
    world = flat_world(16)
    human = labelled_frames(world, CameraModel(8, 8, 4.0), [(4.0, 4.0), (12.0, 12.0)], pixels=[[0, 0], [4, 5]])
    cfg = TrainConfig(alpha=2, max_epochs=10, patience=10, val_fraction=0.5, seed=1)
    _, report = train(SurrogateModel(2, patch_radius=0, hidden=4, dropout=0.0, seed=0), TrainingSet(human, []), cfg)
    scores = [row['val_miou'] for row in report.rows][warmup_epoch_count(10) - 1:]
    best = max(scores)
    last_best = max(i for i, s in enumerate(scores) if s == best) + warmup_epoch_count(10)
    assert report.best_epoch == last_best


def test_separable_world_reaches_high_training_accuracy():
    world = flat_world(16)
    camera = CameraModel(16, 16, 8.0)
    human = labelled_frames(world, camera, [(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)])
    model = SurrogateModel(2, patch_radius=0, hidden=8, dropout=0.0, seed=1)
    cfg = TrainConfig(alpha=256, peak_lr=0.1, batch_size=1, max_epochs=100, patience=100, val_fraction=0.0, weight_decay=0.0)
    trained, _ = train(model, TrainingSet(human, []), cfg)
    correct = sum(int(np.sum(predict(trained, frame).ml_labels == labels.to_dense())) for frame, labels in human)
    assert correct / (4 * 256) >= 0.95


def test_training_is_deterministic_and_restarts_from_initial_model():
    world = flat_world(16)
    human = labelled_frames(world, CameraModel(8, 8, 4.0), [(4.0, 4.0), (12.0, 12.0)], pixels=[[0, 0], [4, 5], [7, 2]])
    model = SurrogateModel(2, patch_radius=1, hidden=6, dropout=0.5, seed=2)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(alpha=3, max_epochs=15, patience=15, val_fraction=0.3, seed=9)
    a, report_a = train(model, TrainingSet(human, []), cfg)
    b, report_b = train(model, TrainingSet(human, []), cfg)
    for name, tensor in a.state_dict().items():
        assert torch.equal(tensor, b.state_dict()[name])
        assert torch.equal(model.state_dict()[name], before[name])
    assert report_a.rows == report_b.rows
    assert list(report_a.to_frame().columns) == ['epoch', 'train_loss', 'val_miou', 'lr']


def test_training_report_csv(tmp_path):
    world = flat_world(16)
    human = labelled_frames(world, CameraModel(8, 8, 4.0), [(8.0, 8.0)], pixels=[[0, 0], [4, 4]])
    _, report = train(SurrogateModel(2, patch_radius=0, hidden=4, seed=0), TrainingSet(human, []),
                      TrainConfig(alpha=2, max_epochs=4, patience=4, val_fraction=0.0))
    path = tmp_path / 'training' / 'mission_01.csv'
    report.save_csv(str(path))
    assert len(path.read_text().splitlines()) == 1 + report.stopped_epoch
    assert report.weight_decay == pytest.approx(weight_decay(0.5, 1, 0))


def test_empty_training_set_is_rejected():
    with pytest.raises(DomainError):
        train(SurrogateModel(2, patch_radius=0, hidden=4), TrainingSet([], []), TrainConfig())


def test_training_set_checks_provenance():
    frame = sense(flat_world(16), Pose(8.0, 8.0, 20.0), CameraModel(4, 4, 4.0), noise_seed=0)
    pseudo = SparseLabelImage(frame.frame_id, [[0, 0]], [1], 'pseudo', 1, frame.shape)
    with pytest.raises(DomainError):
        TrainingSet([(frame, pseudo)], [])
    assert TrainingSet([], [(frame, pseudo)]).n_u == 1


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=0.6).validate()
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0).validate()
