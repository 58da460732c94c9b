"""From-scratch convolutional classifier: layers, losses, optimizers, training."""

from .augment import AugmentConfig, affine, augment
from .estimator import SliceClassifier
from .losses import (cross_entropy_loss, hinge_loss, sigmoid, sigmoid_cross_entropy,
                     softmax_cross_entropy)
from .model import (Checkpoint, CheckpointError, Network, NetworkSpec, normalize_hu,
                    predict_argmax, predict_labels)
from .optim import Adam, SGDMomentum, adam_step, sgd_momentum_step, step_lr
from .train import TrainConfig, TrainingDiverged, TrainResult, train_network

__all__ = [
    "Adam", "AugmentConfig", "Checkpoint", "CheckpointError", "Network", "NetworkSpec",
    "SGDMomentum", "SliceClassifier", "TrainConfig", "TrainResult", "TrainingDiverged",
    "adam_step", "affine", "augment", "cross_entropy_loss", "hinge_loss", "normalize_hu",
    "predict_argmax", "predict_labels", "sgd_momentum_step", "sigmoid", "sigmoid_cross_entropy",
    "softmax_cross_entropy", "step_lr", "train_network",
]
