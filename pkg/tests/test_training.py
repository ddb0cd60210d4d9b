import numpy as np
import pytest

from precipsr.model import ModelConfig, build_model, checkpoint_bytes
from precipsr.tensor import ShapeError, Tensor, backward
from precipsr.training import (AdamState, ArrayDataset, TrainConfig, TrainState, adam_step, evaluate_loss, mse_loss,
                               predict, train)


def tiny_cfg(**kw):
    base = dict(scale_factor=2, backbone_layers=2, filters=4, cab_mlp_nodes=8, target_shape=(8, 6))
    base.update(kw)
    return ModelConfig(**base)


def toy_data(n, seed):
    rng = np.random.default_rng(seed)
    x = np.log1p(rng.gamma(0.8, 3.0, (n, 4, 3, 1))).astype(np.float32)
    y = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2) * 1.3
    elev = np.log1p(rng.uniform(0, 1000, (1, 8, 6, 1))).astype(np.float32)
    return ArrayDataset(x, y.astype(np.float32), elev)


def test_mse_loss_value_and_gradient():
    p = Tensor([[1.0, 3.0]], requires_grad=True)
    loss = mse_loss(p, Tensor([[0.0, 1.0]]))
    assert loss.item() == pytest.approx(2.5)
    backward(loss)
    np.testing.assert_allclose(p.grad, [[1.0, 2.0]])
    with pytest.raises(ShapeError):
        mse_loss(p, Tensor([1.0, 2.0]))


def test_adam_matches_hand_update():
    p = Tensor([1.0, -2.0])
    cfg = TrainConfig(learning_rate=0.1, epochs_max=2, patience=1)
    state = AdamState.for_params([p])
    m = v = np.zeros(2)
    expected = p.data.astype(np.float64)
    for t, g in enumerate(([0.5, -1.0], [0.2, 0.3]), start=1):
        p.grad = np.array(g, np.float32)
        adam_step([p], state, cfg)
        g = np.array(g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected = expected - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-6)
    p.grad = None
    with pytest.raises(ValueError):
        adam_step([p], state, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs_max=5, patience=5)


def test_train_state_counts_since_best():
    s = TrainState()
    assert s.observe(1.0) and not s.observe(1.5) and not s.observe(1.0)
    assert s.since_improvement == 2 and s.best_epoch == 1
    assert s.should_stop(2) and not s.should_stop(3)


@pytest.mark.parametrize("patience", [0, 1, 3])
def test_strictly_worsening_validation_stops_after_patience_plus_one(patience):
    model = build_model(tiny_cfg(), seed=0)
    data = toy_data(8, 0)
    losses = iter(float(v) for v in range(1, 100))
    snapshots = []

    def scripted(m, d):
        snapshots.append(m.state_arrays())
        return next(losses)

    cfg = TrainConfig(epochs_max=50, batch_size=4, patience=patience, learning_rate=1e-2)
    result = train(model, data, data, cfg, val_loss_fn=scripted)
    assert len(result.history) == patience + 1
    assert result.best_epoch == 1
    restored = model.state_arrays()
    assert all(np.array_equal(restored[k], snapshots[0][k]) for k in restored)
    if patience:
        assert any(not np.array_equal(restored[k], snapshots[-1][k]) for k in restored)


def test_training_reduces_validation_loss(tmp_path):
    model = build_model(tiny_cfg(), seed=1)
    tr, va = toy_data(32, 1), toy_data(8, 2)
    before = evaluate_loss(model, va)
    result = train(model, tr, va, TrainConfig(epochs_max=15, batch_size=8, patience=5, learning_rate=3e-3))
    assert min(v for _, _, v in result.history) < before
    assert evaluate_loss(model, va) == pytest.approx(result.state.best_val, rel=1e-5)
    result.write_history(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == len(result.history) + 1


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model = build_model(tiny_cfg(), seed=2)
        res = train(model, toy_data(16, 3), toy_data(4, 4), TrainConfig(epochs_max=4, batch_size=5, patience=3,
                                                                         learning_rate=1e-3, seed=9))
        runs.append((res.history, checkpoint_bytes(model)))
    np.testing.assert_allclose(np.array(runs[0][0]), np.array(runs[1][0]), atol=1e-6)
    assert runs[0][1] == runs[1][1]


def test_time_guard_and_topography_off():
    model = build_model(tiny_cfg(use_topography=False), seed=3)
    data = toy_data(8, 5)
    res = train(model, data, data, TrainConfig(epochs_max=100, batch_size=8, patience=99), max_seconds=0.0)
    assert len(res.history) == 1
    assert predict(model, data.x, None).shape == data.y.shape


def test_empty_splits_rejected():
    model = build_model(tiny_cfg(), seed=0)
    empty = ArrayDataset(np.zeros((0, 4, 3, 1)), np.zeros((0, 8, 6, 1)))
    with pytest.raises(ValueError):
        train(model, empty, toy_data(2, 0), TrainConfig(epochs_max=2, patience=1))
