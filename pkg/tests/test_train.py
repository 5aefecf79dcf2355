"""Training loop invariants: pairing, SGD arithmetic, schedules,
divergence handling, determinism, and the log format."""

import io

import numpy as np
import pytest

from marginlab import (
    DefenseLossConfig,
    Tensor,
    TrainConfig,
    TrainingDivergedError,
    build_siamese_batch,
    make_toy_dataset,
    mlp_classifier,
    sgd_step,
    train,
    write_training_csv,
)
from marginlab.train import TRAINING_CSV_HEADER, SiameseBatch


# ---------------------------------------------------------------------------
# pair construction
# ---------------------------------------------------------------------------

def test_pairs_all_same_class(blobs, rng):
    batch = build_siamese_batch(blobs, np.arange(64), same_prob=1.0, rng=rng)
    np.testing.assert_array_equal(batch.y1, batch.y2)
    np.testing.assert_array_equal(batch.same, 1.0)


def test_pairs_all_different_class(blobs, rng):
    batch = build_siamese_batch(blobs, np.arange(64), same_prob=0.0, rng=rng)
    assert np.all(batch.y1 != batch.y2)
    np.testing.assert_array_equal(batch.same, 0.0)


def test_pairs_half_rate_concentrates(blobs):
    rng = np.random.default_rng(3)
    total, same = 0, 0
    for start in range(0, 10_000, 200):
        idx = rng.integers(0, len(blobs), size=200)
        batch = build_siamese_batch(blobs, idx, same_prob=0.5, rng=rng)
        same += int(batch.same.sum())
        total += len(idx)
    assert abs(same / total - 0.5) <= 0.02


def test_pairs_companions_come_from_dataset(blobs, rng):
    batch = build_siamese_batch(blobs, np.arange(32), same_prob=0.5, rng=rng)
    flat = blobs.inputs.array.reshape(len(blobs), -1)
    for row in batch.x2.reshape(32, -1):
        assert (flat == row).all(axis=1).any()


def test_pairs_empty_companion_class_is_an_error(rng):
    from marginlab import Dataset

    ds = Dataset(np.random.default_rng(0).random((6, 2)), [0, 0, 0, 0, 0, 1], num_classes=3)
    with pytest.raises(ValueError, match="empty class"):
        for _ in range(50):  # the draw of the missing class 2 is stochastic
            build_siamese_batch(ds, np.arange(6), same_prob=0.0, rng=rng)


def test_siamese_batch_validates_indicator(rng):
    x = rng.random((2, 3))
    with pytest.raises(ValueError):
        SiameseBatch(x1=x, x2=x, y1=np.array([0, 1]), y2=np.array([0, 1]), same=np.array([0.0, 1.0]))


# ---------------------------------------------------------------------------
# SGD arithmetic
# ---------------------------------------------------------------------------

def test_sgd_zero_gradient_zero_decay_is_identity():
    params = [Tensor([1.0, -2.0])]
    out = sgd_step(params, [np.zeros(2)], lr=0.5, weight_decay=0.0)
    np.testing.assert_array_equal(out[0].array, [1.0, -2.0])


def test_sgd_scalar_hand_case():
    out = sgd_step([Tensor(1.0)], [np.asarray(2.0)], lr=0.1, weight_decay=0.0)
    assert out[0].item() == pytest.approx(0.8, abs=0.0)


def test_sgd_contracts_quadratic_bowl():
    theta = [Tensor(1.0)]
    for _ in range(100):
        grad = 2.0 * theta[0].item()  # d(theta^2)/d theta
        theta = sgd_step(theta, [np.asarray(grad)], lr=0.1, weight_decay=0.0)
    assert abs(theta[0].item()) < 1e-9


def test_sgd_weight_decay_term():
    out = sgd_step([Tensor(2.0)], [np.asarray(0.0)], lr=0.1, weight_decay=0.5)
    # theta - lr * decay * theta = 2 - 0.1*0.5*2
    assert out[0].item() == pytest.approx(1.9, rel=1e-15)


def test_sgd_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step([Tensor([1.0, 2.0])], [np.zeros(3)], lr=0.1, weight_decay=0.0)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_step_decay():
    cfg = TrainConfig(epochs=10, learning_rate=1.0, decay_points=(0.5, 0.75), decay_factor=0.1)
    assert cfg.lr_at(0) == 1.0
    assert cfg.lr_at(4) == 1.0
    assert cfg.lr_at(5) == pytest.approx(0.1)
    assert cfg.lr_at(7) == pytest.approx(0.1)
    assert cfg.lr_at(8) == pytest.approx(0.01)
    assert cfg.lr_at(9) == pytest.approx(0.01)


# ---------------------------------------------------------------------------
# the loop itself
# ---------------------------------------------------------------------------

def small_cfg(**kw):
    base = dict(
        epochs=2,
        batch_size=32,
        learning_rate=0.1,
        weight_decay=0.0005,
        loss=DefenseLossConfig(jacobian_weight=0.0),
        seed=5,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_network_unchanged(blobs):
    net = mlp_classifier(num_classes=2, input_dim=2, hidden=8, embedding_dim=4, seed=1)
    out, log = train(net, blobs, small_cfg(epochs=0))
    assert log == []
    for a, b in zip(out.params, net.params):
        assert a.array.tobytes() == b.array.tobytes()


def test_same_seed_bit_identical_training(blobs):
    net = mlp_classifier(num_classes=2, input_dim=2, hidden=8, embedding_dim=4, seed=1)
    out1, log1 = train(net, blobs, small_cfg())
    out2, log2 = train(net, blobs, small_cfg())
    for a, b in zip(out1.params, out2.params):
        assert a.array.tobytes() == b.array.tobytes()
    assert [(r.epoch, r.batch, r.loss.total) for r in log1] == [
        (r.epoch, r.batch, r.loss.total) for r in log2
    ]


def test_different_seed_changes_training(blobs):
    net = mlp_classifier(num_classes=2, input_dim=2, hidden=8, embedding_dim=4, seed=1)
    out1, _ = train(net, blobs, small_cfg(seed=5))
    out2, _ = train(net, blobs, small_cfg(seed=6))
    assert any(
        a.array.tobytes() != b.array.tobytes() for a, b in zip(out1.params, out2.params)
    )


def test_blobs_reach_95_percent_clean_accuracy(blobs):
    net = mlp_classifier(num_classes=2, input_dim=2, hidden=16, embedding_dim=8, seed=2)
    cfg = small_cfg(epochs=20, learning_rate=0.2)
    trained, log = train(net, blobs, cfg)
    acc = float(np.mean(trained.predict(blobs.inputs.array) == blobs.labels))
    assert acc >= 0.95
    assert log[-1].loss.total < log[0].loss.total


def test_training_log_epochs_and_lr(blobs):
    net = mlp_classifier(num_classes=2, input_dim=2, hidden=8, embedding_dim=4, seed=1)
    cfg = small_cfg(epochs=4, decay_points=(0.5,), decay_factor=0.1)
    _, log = train(net, blobs, cfg)
    assert {r.epoch for r in log} == {0, 1, 2, 3}
    by_epoch = {r.epoch: r.learning_rate for r in log}
    assert by_epoch[0] == pytest.approx(0.1)
    assert by_epoch[3] == pytest.approx(0.01)


def test_divergence_raises_and_preserves_last_finite_state(blobs):
    net = mlp_classifier(num_classes=2, input_dim=2, hidden=8, embedding_dim=4, seed=1)
    cfg = small_cfg(epochs=40, learning_rate=1e12, weight_decay=0.0)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingDivergedError) as exc_info:
        train(net, blobs, cfg)
    err = exc_info.value
    assert err.network is not None
    for p in err.network.params:
        assert np.all(np.isfinite(p.array))
    assert all(np.isfinite(r.loss.total) for r in err.log)


def test_callback_sees_every_batch(blobs):
    net = mlp_classifier(num_classes=2, input_dim=2, hidden=8, embedding_dim=4, seed=1)
    seen = []
    _, log = train(net, blobs, small_cfg(), callback=seen.append)
    assert len(seen) == len(log)


def test_adversarial_augmentation_runs_and_changes_result(blobs):
    from marginlab import AdversarialTrainingConfig

    net = mlp_classifier(num_classes=2, input_dim=2, hidden=8, embedding_dim=4, seed=1)
    plain = small_cfg(epochs=1)
    adv = small_cfg(epochs=1, adversarial=AdversarialTrainingConfig(epsilon=0.1, iterations=3, ratio=0.5))
    out1, _ = train(net, blobs, plain)
    out2, _ = train(net, blobs, adv)
    assert any(
        a.array.tobytes() != b.array.tobytes() for a, b in zip(out1.params, out2.params)
    )


# ---------------------------------------------------------------------------
# log serialization
# ---------------------------------------------------------------------------

def test_training_csv_header_and_rows(blobs):
    net = mlp_classifier(num_classes=2, input_dim=2, hidden=8, embedding_dim=4, seed=1)
    _, log = train(net, blobs, small_cfg(epochs=1))
    buf = io.StringIO()
    write_training_csv(buf, log)
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == "epoch,batch,ce,siamese,rvl,jacobian,total,learning_rate"
    assert lines[0] == TRAINING_CSV_HEADER
    assert len(lines) == len(log) + 1
    first = lines[1].split(",")
    assert int(first[0]) == 0 and int(first[1]) == 0
    # loss fields round-trip through repr-precision floats
    assert float(first[6]) == log[0].loss.total
