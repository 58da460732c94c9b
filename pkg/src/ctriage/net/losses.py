"""Per-trait losses with 0/1 masking weights.

Every loss accepts a single K-vector or an ``(N, K)`` batch. A sample's
loss is normalised by its own weight sum; a batch loss is the mean over
samples. Each function returns ``(loss, gradient)`` with the gradient
shaped like its first argument.
"""

from __future__ import annotations

import numpy as np

from ..taxonomy import MaskedTarget

EPS = 1e-7


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _prepare(scores, target: MaskedTarget):
    scores = np.asarray(scores, dtype=np.float64)
    t = np.asarray(target.targets, dtype=np.float64)
    w = np.asarray(target.weights, dtype=np.float64)
    if scores.shape != t.shape or t.shape != w.shape:
        raise ValueError(f"shape mismatch: scores {scores.shape}, targets {t.shape}, weights {w.shape}")
    single = scores.ndim == 1
    if single:
        scores, t, w = scores[None], t[None], w[None]
    wsum = w.sum(axis=1, keepdims=True)
    if np.any(wsum == 0):
        raise ValueError("every loss weight of a sample is zero; the loss is undefined")
    return scores, t, w, wsum, single


def _finish(per_elem, grad, wsum, single):
    n = per_elem.shape[0]
    loss = float((per_elem.sum(axis=1, keepdims=True) / wsum).mean())
    grad = grad / wsum / n
    return loss, (grad[0] if single else grad)


def cross_entropy_loss(probs, target: MaskedTarget):
    """Weighted binary cross-entropy on posteriors, clamped to [1e-7, 1 - 1e-7]."""
    p, t, w, wsum, single = _prepare(probs, target)
    pc = np.clip(p, EPS, 1.0 - EPS)
    per = -w * (t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    inside = (p > EPS) & (p < 1.0 - EPS)
    grad = np.where(inside, -w * (t / pc - (1.0 - t) / (1.0 - pc)), 0.0)
    return _finish(per, grad, wsum, single)


def sigmoid_cross_entropy(logits, target: MaskedTarget):
    """Same loss as ``cross_entropy_loss(sigmoid(logits))``, differentiated in logit space.

    Uses the log-sum-exp form, so it agrees with the clamped version
    wherever the posterior stays inside the clamp.
    """
    z, t, w, wsum, single = _prepare(logits, target)
    # -[t log s(z) + (1 - t) log(1 - s(z))] = softplus(z) - t z
    per = w * (np.logaddexp(0.0, z) - t * z)
    grad = w * (sigmoid(z) - t)
    return _finish(per, grad, wsum, single)


def hinge_loss(logits, target: MaskedTarget):
    """Weighted per-trait margin loss on pre-sigmoid scores; subgradient 0 at the kink."""
    z, t, w, wsum, single = _prepare(logits, target)
    ysgn = 2.0 * t - 1.0
    margin = 1.0 - z * ysgn
    per = w * np.maximum(margin, 0.0)
    grad = np.where(margin > 0, -w * ysgn, 0.0)
    return _finish(per, grad, wsum, single)


def softmax_cross_entropy(logits, labels):
    """Single-label ``-log softmax(z)[y]`` averaged over the batch."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (z.shape[0],):
        raise ValueError("need one class index per sample")
    if np.any((labels < 0) | (labels >= z.shape[1])):
        raise ValueError("class index out of range")
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


LOSSES = {
    "cross_entropy_sigmoid": sigmoid_cross_entropy,
    "hinge": hinge_loss,
}
