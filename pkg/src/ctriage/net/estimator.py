from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..taxonomy import Taxonomy, default_taxonomy
from .model import Checkpoint, NetworkSpec, predict_labels
from .train import TrainConfig, train_network


def _check_slices(X, size=None):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 3:
        raise ValueError(f"expected HU slices of shape (n, H, W), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError("slices must be square")
    if size is not None and X.shape[1] != size:
        raise ValueError(f"slices must be {size}x{size}, got {X.shape[1]}x{X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("slices contain non-finite values")
    return X


def _check_labels(y, n, K):
    y = np.asarray(y)
    if y.shape != (n, K):
        raise ValueError(f"labels must have shape ({n}, {K}), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return y.astype(np.int8)


class SliceClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label CT slice classifier trained from scratch.

    Parameters
    ----------
    taxonomy : Taxonomy, optional
        Trait ontology; defaults to the 12-trait desk taxonomy.
    network : NetworkSpec, optional
        Architecture; defaults to the two-block inception-lite network.
    loss : {"cross_entropy_sigmoid", "hinge"}
    hierarchical : bool
        Drop lower-tier positive labels from the loss when a higher tier is present.
    optimizer : {"adam", "sgd_momentum"}
    learning_rate, gamma, step_epochs : step learning-rate schedule.
    epochs, batch_size, dropout, patience, augment : training recipe.
    random_state : int
        Seeds initialisation, visit order, augmentation and dropout.

    Attributes
    ----------
    checkpoint_ : Checkpoint
        Best-validation snapshot.
    network_ : Network
    history_ : list of dict
        One row per epoch (lr, train/validation loss, validation AUC).
    """

    def __init__(self, taxonomy=None, network=None, loss="cross_entropy_sigmoid",
                 hierarchical=True, optimizer="adam", learning_rate=3e-3, gamma=1.0,
                 step_epochs=4, epochs=20, batch_size=64, dropout=0.1, patience=4,
                 augment=False, random_state=0):
        self.taxonomy = taxonomy
        self.network = network
        self.loss = loss
        self.hierarchical = hierarchical
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.step_epochs = step_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.dropout = dropout
        self.patience = patience
        self.augment = augment
        self.random_state = random_state

    def _tax(self) -> Taxonomy:
        return self.taxonomy if self.taxonomy is not None else default_taxonomy()

    def train_config(self) -> TrainConfig:
        return TrainConfig(loss=self.loss, hierarchical=self.hierarchical, optimizer=self.optimizer,
                           lr=self.learning_rate, gamma=self.gamma, step_epochs=self.step_epochs,
                           epochs=self.epochs, batch_size=self.batch_size, dropout=self.dropout,
                           patience=self.patience, augment=self.augment,
                           seed=int(self.random_state or 0))

    def fit(self, X, y, X_val=None, y_val=None, resume=None, on_epoch=None):
        tax = self._tax()
        spec = self.network or NetworkSpec(n_outputs=tax.K)
        X = _check_slices(X, spec.input_size)
        y = _check_labels(y, len(X), tax.K)
        if X_val is not None:
            X_val = _check_slices(X_val, spec.input_size)
            y_val = _check_labels(y_val, len(X_val), tax.K)
        result = train_network(X, y, tax, self.train_config(), X_val, y_val, spec=spec,
                               resume=resume, on_epoch=on_epoch)
        self._set_checkpoint(result.best)
        self.last_checkpoint_ = result.last
        self.history_ = result.history
        self.stopped_early_ = result.stopped_early
        return self

    def _set_checkpoint(self, ckpt: Checkpoint):
        self.checkpoint_ = ckpt
        self.network_ = ckpt.network()
        self.taxonomy_hash_ = ckpt.taxonomy_hash
        self.n_outputs_ = ckpt.spec.n_outputs

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, taxonomy=None):
        tax = taxonomy if taxonomy is not None else default_taxonomy()
        if ckpt.taxonomy_hash != tax.hash:
            raise ValueError("checkpoint was trained with a different taxonomy")
        cfg = ckpt.meta.get("train_config", {})
        est = cls(taxonomy=taxonomy, network=ckpt.spec,
                  random_state=cfg.get("seed", 0), loss=cfg.get("loss", "cross_entropy_sigmoid"))
        est._set_checkpoint(ckpt)
        est.history_ = ckpt.meta.get("history", [])
        return est

    def decision_function(self, X):
        """Pre-sigmoid per-trait scores."""
        check_is_fitted(self, "network_")
        X = self.network_.normalize(_check_slices(X, self.network_.spec.input_size))
        net = self.network_
        out = [net.forward(X[i:i + 256]) for i in range(0, len(X), 256)]
        net._forwarded = False
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = _check_slices(X, self.network_.spec.input_size)
        return self.network_.posteriors(self.network_.normalize(X)).astype(np.float64)

    def predict(self, X):
        return predict_labels(self.predict_proba(X))

    def score(self, X, y, sample_weight=None):
        """Mean per-trait accuracy at the 0.5 threshold."""
        y = np.asarray(y)
        return float(np.average((self.predict(X) == y).mean(axis=1), weights=sample_weight))
