"""Mini-batch training with hierarchical masking, step LR and early stopping.

All randomness (visit order, augmentation, dropout) is drawn from
generators seeded by ``(seed, epoch, batch)``, so a run can be stopped
after any epoch and resumed from its checkpoint bit-identically.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..metrics import roc
from ..taxonomy import MaskedTarget, Taxonomy, effective_weights
from .augment import AugmentConfig, augment
from .losses import LOSSES, sigmoid
from .model import Checkpoint, Network, NetworkSpec
from .optim import Adam, SGDMomentum, step_lr

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_auc_significant")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, msg="non-finite training loss"):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {msg}")


@dataclass
class TrainConfig:
    loss: str = "cross_entropy_sigmoid"
    hierarchical: bool = True
    optimizer: str = "adam"
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    gamma: float = 1.0
    step_epochs: int = 4
    epochs: int = 20
    batch_size: int = 64
    dropout: float = 0.1
    patience: int = 4
    augment: bool = False
    rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    mirror_p: float = 0.5
    seed: int = 0

    def validate(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError("optimizer must be 'adam' or 'sgd_momentum'")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.step_epochs < 1:
            raise ValueError("epochs, batch_size and step_epochs must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)

    @property
    def augment_config(self):
        return AugmentConfig(self.rotation_deg, tuple(self.scale_range), self.mirror_p)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list = field(default_factory=list)
    stopped_early: bool = False


def _optimizer(config):
    if config.optimizer == "adam":
        return Adam(config.beta1, config.beta2, config.eps)
    return SGDMomentum(config.momentum)


def _targets(Y, tax, hierarchical):
    Y = np.asarray(Y, dtype=np.float64)
    w = effective_weights(Y, tax) if hierarchical else np.ones_like(Y)
    return MaskedTarget(Y, w)


def composite_significant_auc(probs, Y, tax: Taxonomy) -> float:
    """AUC of max significant-trait posterior against 'any significant trait'."""
    sig = tax.significant_ids
    if not sig:
        return float("nan")
    truth = np.asarray(Y)[:, sig].max(axis=1)
    if truth.min() == truth.max():
        return float("nan")
    return roc(np.asarray(probs)[:, sig].max(axis=1), truth).auc


def evaluate_loss(net, X, Y, tax, config, batch_size=256):
    loss_fn = LOSSES[config.loss]
    total, probs = 0.0, []
    for i in range(0, len(X), batch_size):
        xb = net.normalize(X[i:i + batch_size])
        logits = net.forward(xb)
        loss, _ = loss_fn(logits, _targets(Y[i:i + batch_size], tax, config.hierarchical))
        total += loss * len(xb)
        probs.append(sigmoid(logits))
    net._forwarded = False
    return total / len(X), np.concatenate(probs)


def _snapshot(net, tax, epoch, opt, config, best_params, state, history):
    extra = {f"best/{k}": v.copy() for k, v in best_params.items()}
    opt_state = {"t": opt.state.get("t", 0)}
    for slot in opt.slots:
        opt_state[slot] = {k: v.copy() for k, v in opt.state.get(slot, {}).items()}
    meta = {"train_config": config.to_dict(), "history": [dict(r) for r in history], **state}
    return Checkpoint.from_network(net, tax.hash, epoch=epoch, optimizer_state=opt_state,
                                   extra_tensors=extra, meta=meta)


def train_network(X, Y, tax: Taxonomy, config: TrainConfig, X_val=None, Y_val=None,
                  spec: NetworkSpec | None = None, resume: Checkpoint | None = None,
                  on_epoch=None) -> TrainResult:
    """Fit a network on HU slices ``X`` (N, S, S) with binary slice labels ``Y`` (N, K).

    Early stopping watches the validation loss; without validation data the
    run lasts ``config.epochs`` epochs and the last state is the best one.
    """
    config.validate()
    X = np.asarray(X, dtype=np.float32)
    Y = np.asarray(Y)
    if len(X) == 0:
        raise ValueError("empty training set")
    if len(X) != len(Y) or Y.shape[1] != tax.K:
        raise ValueError("X and Y disagree in length, or Y is not (N, K)")
    has_val = X_val is not None and len(X_val) > 0
    if has_val:
        X_val = np.asarray(X_val, dtype=np.float32)
        Y_val = np.asarray(Y_val)

    loss_fn = LOSSES[config.loss]
    opt = _optimizer(config)
    if resume is not None:
        if resume.taxonomy_hash != tax.hash:
            raise ValueError("resume checkpoint was trained with a different taxonomy")
        net = resume.network()
        opt.state = {"t": resume.optimizer_state.get("t", 0)}
        for slot in opt.slots:
            opt.state[slot] = {k: v.copy() for k, v in resume.optimizer_state.get(slot, {}).items()}
        best_params = {k[len("best/"):]: v.copy() for k, v in resume.extra_tensors.items()
                       if k.startswith("best/")}
        state = {k: resume.meta[k] for k in ("best_val_loss", "best_epoch", "bad_epochs")}
        history = [dict(r) for r in resume.meta.get("history", [])]
        start = resume.epoch + 1
    else:
        spec = spec or NetworkSpec(n_outputs=tax.K)
        net = Network(spec.with_dropout(config.dropout), seed=config.seed)
        best_params = {k: v.copy() for k, v in net.params.items()}
        state = {"best_val_loss": None, "best_epoch": -1, "bad_epochs": 0}
        history = []
        start = 0

    acfg = config.augment_config
    n = len(X)
    stopped = False
    last = resume
    for epoch in range(start, config.epochs):
        lr = step_lr(epoch, config.lr, config.gamma, config.step_epochs)
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            brng = np.random.default_rng([config.seed, 2, epoch, b])
            xb = X[idx]
            if config.augment:
                xb = np.stack([augment(img, brng, acfg) for img in xb])
            logits = net.forward(net.normalize(xb), train=True, rng=brng)
            loss, g = loss_fn(logits, _targets(Y[idx], tax, config.hierarchical))
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            try:
                grads = net.backward(g)
                opt.step(net.params, grads, lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            total += loss * len(idx)
        train_loss = total / n
        if has_val:
            val_loss, val_probs = evaluate_loss(net, X_val, Y_val, tax, config)
            val_auc = composite_significant_auc(val_probs, Y_val, tax)
        else:
            val_loss, val_auc = train_loss, float("nan")
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, "non-finite validation loss")
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                        "val_loss": val_loss, "val_auc_significant": val_auc})
        log.info("epoch %d lr %.3g train %.4f val %.4f auc %.3f", epoch, lr, train_loss, val_loss, val_auc)

        best = state["best_val_loss"]
        if not has_val or best is None or val_loss < best:
            state.update(best_val_loss=val_loss, best_epoch=epoch, bad_epochs=0)
            best_params = {k: v.copy() for k, v in net.params.items()}
        else:
            state["bad_epochs"] += 1
        last = _snapshot(net, tax, epoch, opt, config, best_params, state, history)
        if on_epoch is not None:
            on_epoch(last)
        if has_val and state["bad_epochs"] > config.patience:
            stopped = True
            break

    if last is None:
        raise ValueError("nothing to train: resume checkpoint already reached config.epochs")
    best_ckpt = Checkpoint(spec=last.spec, params={k: v.copy() for k, v in best_params.items()},
                           taxonomy_hash=tax.hash, epoch=state["best_epoch"],
                           meta={"train_config": config.to_dict(), "history": history,
                                 "best_val_loss": state["best_val_loss"]})
    return TrainResult(best=best_ckpt, last=last, history=history, stopped_early=stopped)


def write_log(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in LOG_FIELDS})
