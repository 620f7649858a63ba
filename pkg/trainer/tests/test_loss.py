import numpy as np
import pytest
import torch

from prednav_trainer.loss import class_balanced_loss


def one_hot_logits(target, scale=50.0):
    b, h, w = target.shape
    scores = torch.full((b, 3, h, w), -scale)
    for c in range(3):
        scores[:, c][torch.as_tensor(target) == c] = scale
    return scores


def test_perfect_predictions_loss_near_zero():
    rng = np.random.default_rng(0)
    target = rng.integers(0, 3, size=(2, 8, 8))
    loss = class_balanced_loss(one_hot_logits(target), target)
    assert float(loss) < 1e-6


def test_uniform_scores_weighted_mean_of_log3():
    rng = np.random.default_rng(1)
    target = rng.integers(0, 3, size=(1, 10, 10))
    scores = torch.zeros((1, 3, 10, 10))
    loss = float(class_balanced_loss(scores, target, weights=(1.0, 5.0, 1.0)))
    counts = [(target == c).sum() for c in range(3)]
    expected = np.log(3.0) * (counts[0] * 1.0 + counts[1] * 5.0 + counts[2] * 1.0) / target.size
    assert loss == pytest.approx(expected, rel=1e-6)


def test_doubling_occupied_weight_doubles_contribution():
    rng = np.random.default_rng(2)
    target = rng.integers(0, 3, size=(1, 12, 12))
    scores = torch.as_tensor(rng.normal(size=(1, 3, 12, 12)), dtype=torch.float32)
    base = float(class_balanced_loss(scores, target, weights=(0.0, 1.0, 0.0)))
    doubled = float(class_balanced_loss(scores, target, weights=(0.0, 2.0, 0.0)))
    assert doubled == pytest.approx(2 * base, rel=1e-6)


def test_loss_permutation_invariant_over_cells():
    rng = np.random.default_rng(3)
    target = rng.integers(0, 3, size=(1, 6, 6))
    scores = torch.as_tensor(rng.normal(size=(1, 3, 6, 6)), dtype=torch.float32)
    a = float(class_balanced_loss(scores, target))
    perm = rng.permutation(36)
    t2 = target.reshape(1, -1)[:, perm].reshape(1, 6, 6)
    s2 = scores.reshape(1, 3, -1)[:, :, perm].reshape(1, 3, 6, 6)
    b = float(class_balanced_loss(s2, t2))
    assert a == pytest.approx(b, rel=1e-6)


def test_loss_strictly_positive_unless_exact():
    rng = np.random.default_rng(4)
    target = rng.integers(0, 3, size=(1, 5, 5))
    scores = torch.as_tensor(rng.normal(size=(1, 3, 5, 5)), dtype=torch.float32)
    assert float(class_balanced_loss(scores, target)) > 0.0


def test_effective_number_weights_favor_rare_class():
    from prednav_trainer.loss import effective_number_weights

    targets = np.concatenate([np.zeros(900, int), np.ones(10, int), np.full(90, 2)])
    w = effective_number_weights(targets, beta=0.99)
    assert w[1] > w[2] > w[0]  # rarer classes get larger weights
    assert sum(w) == pytest.approx(3.0, rel=1e-9)


def test_effective_number_config_flag():
    from prednav_trainer.train import TrainConfig
    from prednav_trainer.worlds import generate_dataset

    ds = generate_dataset(3, seed=0)
    cfg = TrainConfig(effective_number_beta=0.999)
    w = cfg.weights(ds)
    assert len(w) == 3 and all(v > 0 for v in w)
    # flat scheme remains the default
    assert TrainConfig().weights() == (1.0, 5.0, 1.0)
