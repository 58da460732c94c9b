import numpy as np
import pytest

from ctriage.net.model import (Checkpoint, CheckpointError, Network, NetworkSpec, normalize_hu,
                               predict_argmax, predict_labels)
from ctriage.taxonomy import Taxonomy, Tier, Trait, default_taxonomy

TAX = default_taxonomy()


def test_default_network_shape():
    net = Network(NetworkSpec(n_outputs=TAX.K))
    out = net.forward(np.zeros((3, 64, 64), np.float32))
    assert out.shape == (3, TAX.K) and out.dtype == np.float32
    assert 5000 < net.n_params < 25000


def test_zero_weights_give_half():
    net = Network(NetworkSpec(n_outputs=TAX.K))
    net.set_params({k: np.zeros_like(v) for k, v in net.params.items()})
    x = np.random.default_rng(0).random((4, 64, 64)).astype(np.float32)
    assert np.all(net.posteriors(x) == 0.5)


def test_posteriors_finite_and_open_interval():
    net = Network(NetworkSpec(n_outputs=TAX.K), seed=3)
    x = net.normalize(np.random.default_rng(1).uniform(-1100, 4000, (5, 64, 64)))
    p = net.posteriors(x)
    assert np.all(np.isfinite(p)) and np.all((p >= 0) & (p <= 1))


def test_eval_forward_is_deterministic():
    net = Network(NetworkSpec(n_outputs=TAX.K), seed=2)
    x = np.random.default_rng(2).random((2, 64, 64)).astype(np.float32)
    assert np.array_equal(net.forward(x), net.forward(x))


def test_shape_mismatch():
    net = Network(NetworkSpec(n_outputs=TAX.K))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 32, 32)))


def test_incompatible_spec():
    with pytest.raises(ValueError):
        Network(NetworkSpec(n_outputs=3, layers=[{"type": "conv", "out": 2, "kernel": 3},
                                                 {"type": "dense"}]))


def test_normalize_window():
    out = normalize_hu(np.array([-50.0, 0.0, 50.0, 100.0, 500.0]), (0.0, 100.0))
    assert out.tolist() == [0.0, 0.0, 0.5, 1.0, 1.0]
    with pytest.raises(ValueError):
        normalize_hu(np.zeros(2), (10.0, 10.0))


def test_predict_rules():
    assert predict_argmax([0.1, 0.7, 0.2]) == 1
    assert predict_argmax([0.5, 0.5]) == 0
    z = np.array([0.3, -1.2, 2.5, 2.4])
    assert predict_argmax(z) == predict_argmax(7.5 * z)
    assert predict_labels([0.2, 0.5, 0.9]).tolist() == [0, 1, 1]


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    net = Network(NetworkSpec(n_outputs=TAX.K), seed=5)
    x = np.random.default_rng(5).random((3, 64, 64)).astype(np.float32)
    before = net.forward(x)
    ckpt = Checkpoint.from_network(net, TAX.hash, epoch=4,
                                   optimizer_state={"t": 7, "m": {k: v + 1 for k, v in net.params.items()}},
                                   meta={"note": "x"})
    path = tmp_path / "m.ckpt"
    ckpt.save(path)
    back = Checkpoint.load(path, TAX.hash)
    assert back.epoch == 4 and back.optimizer_state["t"] == 7 and back.meta["note"] == "x"
    assert np.array_equal(back.network().forward(x), before)
    assert back.to_bytes() == ckpt.to_bytes()


def test_checkpoint_rejects_other_taxonomy():
    other = Taxonomy((Trait(0, "a", Tier.HighRisk, "g"),), frozenset({0}))
    ckpt = Checkpoint.from_network(Network(NetworkSpec(n_outputs=TAX.K)), TAX.hash)
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(ckpt.to_bytes(), other.hash)


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"nonsense")
    good = Checkpoint.from_network(Network(NetworkSpec(n_outputs=TAX.K)), TAX.hash).to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(good[:-10])


def test_set_params_validates():
    net = Network(NetworkSpec(n_outputs=TAX.K))
    params = net.params
    key = next(iter(params))
    with pytest.raises(ValueError):
        net.set_params({key: params[key]})
    bad = dict(params)
    bad[key] = np.zeros(3)
    with pytest.raises(ValueError):
        net.set_params(bad)
