import math

import numpy as np
import pytest

from terrai import train, unet
from terrai.autodiff import Parameter
from terrai.green import EstimatedEnergySource
from terrai.train import AdamState, EarlyStopping, TrainConfig, TrainingError


def small_model(seed=0):
    return unet.build_model(unet.width_config("small"), seed=seed)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=5, patience=6)
    TrainConfig(max_epochs=5, patience=5)


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.arange(4, dtype=np.float32), "p")
    state = AdamState([p])
    train.adam_step([p], state)
    assert p.data.tolist() == [0, 1, 2, 3] and state.t == 1


@pytest.mark.parametrize("g", [1e-4, 0.3, -7.0, 250.0])
def test_adam_first_step_is_lr(g):
    p = Parameter(np.array([1.0]), "w")
    state = AdamState([p])
    p.grad[:] = g
    train.adam_step([p], state, lr=1e-3)
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    expected = 1e-3 * abs(g) / (abs(g) + 1e-8)
    assert (1.0 - p.data[0]) * np.sign(g) == pytest.approx(expected, abs=1e-6)
    assert not p.grad.any()


def test_adam_constant_gradient_steps_stay_lr():
    p = Parameter(np.array([0.0]), "w")
    state = AdamState([p])
    prev = 0.0
    for _ in range(5):
        p.grad[:] = 2.0
        train.adam_step([p], state, lr=1e-3)
        assert prev - p.data[0] == pytest.approx(1e-3, abs=1e-6)
        prev = p.data[0]
    assert state.t == 5


def test_adam_nan_names_parameter():
    a, b = Parameter(np.zeros(2), "enc1.conv1.weight"), Parameter(np.zeros(2), "head.bias")
    b.grad[1] = np.nan
    with pytest.raises(TrainingError, match="head.bias"):
        train.adam_step([a, b], AdamState([a, b]))


def test_early_stopping_patience_definition():
    stopper = EarlyStopping(10)
    losses = [5.0, 4.0, 3.0] + [3.5] * 20
    stopped = None
    for epoch, val in enumerate(losses, start=1):
        if stopper.update(epoch, val, f"ckpt{epoch}"):
            stopped = epoch
            break
    assert stopped == 13
    assert stopper.best_epoch == 3 and stopper.best_checkpoint == "ckpt3"
    # equal loss is not an improvement
    s2 = EarlyStopping(2)
    assert not s2.update(1, 1.0) and not s2.update(2, 1.0) and s2.update(3, 1.0)


def _fake_validation(monkeypatch, losses, seen):
    calls = iter(losses)

    def fake(model, patches, batch_size=256):
        seen.append(model.state())
        return next(calls)

    monkeypatch.setattr(train, "evaluate_loss", fake)


def test_loop_stops_after_patience_and_restores(monkeypatch, patches20):
    seen = []
    _fake_validation(monkeypatch, [5.0, 4.0, 3.0] + [3.5] * 50, seen)
    model = small_model()
    rep = train.train_loop(model, patches20, patches20, TrainConfig(max_epochs=200, patience=10))
    assert rep.epochs == 13 == len(rep.validation_losses)
    assert rep.best_epoch == 3 and rep.stop_reason.startswith("early_stopping")
    assert all(a.tobytes() == b.tobytes() for a, b in zip(model.state(), seen[2]))


def test_loop_runs_to_max_epochs_when_improving(monkeypatch, patches20):
    _fake_validation(monkeypatch, [1.0 / e for e in range(1, 201)], [])
    rep = train.train_loop(small_model(), patches20[:2], patches20[:2], TrainConfig(max_epochs=200))
    assert rep.epochs == 200 and rep.stop_reason == "max_epochs" and rep.best_epoch == 200


def test_patience_equal_max_epochs_never_stops_early(monkeypatch, patches20):
    _fake_validation(monkeypatch, [1.0] + [2.0] * 20, [])
    rep = train.train_loop(small_model(), patches20[:2], patches20[:2], TrainConfig(max_epochs=8, patience=8))
    assert rep.epochs == 8 and rep.stop_reason == "max_epochs"


def test_nan_validation_aborts(monkeypatch, patches20):
    _fake_validation(monkeypatch, [1.0, math.nan], [])
    with pytest.raises(TrainingError, match="epoch 2"):
        train.train_loop(small_model(), patches20[:2], patches20[:2], TrainConfig(max_epochs=5, patience=3))


def test_empty_partition_rejected(patches20):
    with pytest.raises(TrainingError):
        train.train_loop(small_model(), patches20[:0], patches20, TrainConfig())


def test_deterministic_and_restored_loss_exact(patches20):
    cfg = TrainConfig(max_epochs=6, patience=2, batch_size=8, seed=11)
    tr, va = patches20[:14], patches20[14:]
    m1, m2 = small_model(1), small_model(1)
    r1 = train.train_loop(m1, tr, va, cfg)
    r2 = train.train_loop(m2, tr, va, cfg)
    assert r1.train_losses == r2.train_losses and r1.validation_losses == r2.validation_losses
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(m1.parameters(), m2.parameters()))
    assert train.evaluate_loss(m1, va) == r1.best_validation_loss
    # validation is never augmented
    assert train.evaluate_loss(m1, va) == train.evaluate_loss(m1, va)


def test_report_json_and_energy(patches20):
    rep = train.train_loop(small_model(), patches20[:4], patches20[4:8], TrainConfig(max_epochs=2, patience=2),
                           energy_source=EstimatedEnergySource(10.0))
    doc = rep.to_json()
    assert doc["epochs"] == 2 == len(doc["train_losses"])
    assert doc["parameter_count"] == 8009
    assert rep.energy["joules"] == pytest.approx(10.0 * rep.energy["wall_seconds"])
