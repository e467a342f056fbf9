import numpy as np
import pytest

from taconv.dataio import synth_dataset
from taconv.errors import NumericalError
from taconv.layers import assemble, desk_config, model_hash
from taconv.training import TrainConfig, accuracy, train

SMALL = dict(widths=(6, 8, 8, 12))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine")
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)


def test_zero_epochs_leave_model_unchanged():
    model = assemble(desk_config(**SMALL))
    before = model_hash(model)
    hist = train(model, synth_dataset(4), TrainConfig(epochs=0))
    assert model_hash(model) == before and hist.loss == []


def test_training_reduces_loss_and_is_deterministic():
    data = synth_dataset(30, seed=0)
    cfg = TrainConfig(epochs=6, batch_size=16, lr=0.05, seed=1)
    a, b = assemble(desk_config("elastic")), assemble(desk_config("elastic"))
    ha, hb = train(a, data, cfg), train(b, data, cfg)
    assert ha.loss == hb.loss and model_hash(a) == model_hash(b)
    assert ha.loss[-1] < ha.loss[0]
    assert accuracy(a, data.images, data.labels) > 100 / 6 + 10


def test_flip_augmentation_changes_the_run():
    data = synth_dataset(10, seed=0)
    a, b = assemble(desk_config(**SMALL)), assemble(desk_config(**SMALL))
    train(a, data, TrainConfig(epochs=1, seed=2))
    train(b, data, TrainConfig(epochs=1, seed=2, flip=True))
    assert model_hash(a) != model_hash(b)


def test_divergence_names_the_epoch():
    model = assemble(desk_config(**SMALL))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalError, match="epoch 0"):
        train(model, synth_dataset(20), TrainConfig(epochs=5, lr=1e300, schedule="constant", momentum=0.0))


def test_validation_history():
    data = synth_dataset(6)
    hist = train(assemble(desk_config(**SMALL)), data, TrainConfig(epochs=2), val=synth_dataset(3, seed=1))
    assert len(hist.val_acc) == 2 and len(hist.train_acc) == 2
    assert all(0 <= v <= 100 for v in hist.val_acc)
