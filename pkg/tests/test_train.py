import csv

import numpy as np
import pytest

from ctriage.net.model import NetworkSpec
from ctriage.net.train import (LOG_FIELDS, TrainConfig, TrainingDiverged, train_network,
                               write_log)
from ctriage.phantom import PhantomSpec, generate_corpus
from ctriage.pipeline import slice_arrays
from ctriage.taxonomy import default_taxonomy

TAX = default_taxonomy()
SPEC32 = NetworkSpec(TAX.K, 32)


def data(seed, n, size=32, n_slices=8):
    studies, _ = generate_corpus(PhantomSpec(seed=seed, slice_size=size, n_slices=n_slices), n)
    return slice_arrays(studies)


@pytest.fixture(scope="module")
def small():
    return data(100, 10) + data(900, 4)


def test_one_epoch_is_deterministic(small):
    X, Y, Xv, Yv = small
    cfg = TrainConfig(epochs=1, augment=True, seed=3)
    a = train_network(X, Y, TAX, cfg, Xv, Yv, spec=SPEC32)
    b = train_network(X, Y, TAX, cfg, Xv, Yv, spec=SPEC32)
    assert a.best.to_bytes() == b.best.to_bytes()
    assert a.last.to_bytes() == b.last.to_bytes()


def test_seed_changes_the_run(small):
    X, Y, Xv, Yv = small
    a = train_network(X, Y, TAX, TrainConfig(epochs=1, seed=1), spec=SPEC32)
    b = train_network(X, Y, TAX, TrainConfig(epochs=1, seed=2), spec=SPEC32)
    assert a.best.to_bytes() != b.best.to_bytes()


@pytest.mark.parametrize("optimizer", ["adam", "sgd_momentum"])
def test_resume_equals_straight_run(small, optimizer):
    X, Y, Xv, Yv = small
    cfg = TrainConfig(epochs=4, augment=True, gamma=0.5, step_epochs=2, optimizer=optimizer,
                      lr=0.01, patience=10)
    straight = train_network(X, Y, TAX, cfg, Xv, Yv, spec=SPEC32)
    saved = []
    first = train_network(X, Y, TAX, TrainConfig(**{**cfg.to_dict(), "epochs": 2,
                                                    "scale_range": cfg.scale_range}),
                          Xv, Yv, spec=SPEC32, on_epoch=saved.append)
    assert first.last.epoch == 1 and len(saved) == 2
    from ctriage.net.model import Checkpoint
    ckpt = Checkpoint.from_bytes(saved[-1].to_bytes(), TAX.hash)
    resumed = train_network(X, Y, TAX, cfg, Xv, Yv, resume=ckpt)
    assert resumed.last.to_bytes() == straight.last.to_bytes()
    assert resumed.best.to_bytes() == straight.best.to_bytes()
    assert resumed.history == straight.history


def test_training_loss_decreases_on_fifty_studies():
    X, Y = data(200, 50, size=64, n_slices=16)
    result = train_network(X, Y, TAX, TrainConfig(epochs=5))
    losses = np.array([h["train_loss"] for h in result.history])
    smoothed = np.convolve(losses, np.ones(2) / 2, mode="valid")
    assert np.all(np.diff(smoothed) < 0), losses
    assert losses[-1] < losses[0]


def test_patience_zero_stops_at_first_non_improvement(small):
    X, Y, Xv, Yv = small
    result = train_network(X, Y, TAX, TrainConfig(lr=0.05, epochs=10, patience=0), Xv, Yv,
                           spec=SPEC32)
    val = [h["val_loss"] for h in result.history]
    assert result.stopped_early
    assert all(b < a for a, b in zip(val[:-2], val[1:-1]))
    assert val[-1] >= min(val[:-1])
    assert result.best.epoch == len(val) - 2


def test_log_has_one_row_per_epoch(small, tmp_path):
    X, Y, Xv, Yv = small
    result = train_network(X, Y, TAX, TrainConfig(epochs=3, patience=10), Xv, Yv, spec=SPEC32)
    write_log(result.history, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and tuple(rows[0]) == LOG_FIELDS
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small):
    X, Y, _, _ = small
    X = X.copy()
    X[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_network(X, Y, TAX, TrainConfig(epochs=2, batch_size=len(X)), spec=SPEC32)
    assert info.value.epoch == 0


def test_hinge_loss_trains(small):
    X, Y, _, _ = small
    result = train_network(X, Y, TAX, TrainConfig(epochs=2, loss="hinge"), spec=SPEC32)
    assert len(result.history) == 2 and np.isfinite(result.history[-1]["train_loss"])


@pytest.mark.parametrize("kw", [dict(lr=0), dict(beta1=1.0), dict(gamma=0), dict(gamma=1.5),
                                dict(loss="mse"), dict(optimizer="rmsprop"), dict(patience=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


def test_config_round_trip():
    cfg = TrainConfig(scale_range=(0.8, 1.2), epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
