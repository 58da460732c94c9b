"""Central finite-difference checks on float64 copies of layers and networks."""

import numpy as np

from ctriage.net.layers import Conv2D, Dense, Dropout, GlobalAvgPool, Inception, MaxPool2D, ReLU
from ctriage.net.losses import cross_entropy_loss, hinge_loss, sigmoid, sigmoid_cross_entropy
from ctriage.net.model import Network, NetworkSpec
from ctriage.taxonomy import default_taxonomy, effective_target

H = 1e-3
TOL = 1e-4


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


class KinkCrossed(Exception):
    """A +-h probe flipped a ReLU or max-pool decision; the instance is not smooth there."""


def _leaves(layers):
    for layer in layers:
        if isinstance(layer, Inception):
            for branch in layer.branches:
                yield from _leaves(branch)
        else:
            yield layer


def _decisions(layers):
    """Current ReLU masks and max-pool argmax indices, read from the forward caches."""
    out = []
    for layer in _leaves(layers):
        if isinstance(layer, (ReLU, MaxPool2D)) and layer._cache is not None:
            cache = layer._cache if isinstance(layer, ReLU) else layer._cache[0]
            out.append(np.asarray(cache).tobytes())
    return out


def _numeric(f, x, layers=(), extra=lambda: []):
    """Central differences of ``f`` in every entry of ``x``.

    ``f`` must leave the forward caches of ``layers`` in place so that each
    probe can be compared with the decisions taken at the base point;
    ``extra`` reports further piecewise decisions (e.g. hinge margins).
    """
    f()
    base = _decisions(layers) + extra()
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + H
        up = f()
        same = _decisions(layers) + extra() == base
        flat[i] = old - H
        down = f()
        same = same and _decisions(layers) + extra() == base
        flat[i] = old
        if not same:
            raise KinkCrossed
        gf[i] = (up - down) / (2 * H)
    return g


def _spread(rng, shape):
    """Distinct values at least 0.01 apart, so max-pool ties never flip under +-h."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - 0.005 * n).reshape(shape)


LAYER_KINDS = ("conv", "conv_strided", "relu", "maxpool", "maxpool_overlap", "gap", "dropout",
               "dense", "inception")
MAX_ATTEMPTS = 50


def make_layer_case(kind, rng):
    N = 2
    if kind == "conv":
        return Conv2D(2, 3, 3, stride=1, pad=1, rng=rng), rng.standard_normal((2, N, 5, 5))
    if kind == "conv_strided":
        return Conv2D(2, 3, 5, stride=2, pad=2, rng=rng), rng.standard_normal((2, N, 7, 7))
    if kind == "relu":
        return ReLU(), rng.standard_normal((2, N, 4, 4))
    if kind == "maxpool":
        return MaxPool2D(2), _spread(rng, (2, N, 4, 4))
    if kind == "maxpool_overlap":
        return MaxPool2D(3, 1, pad=1), _spread(rng, (2, N, 4, 4))
    if kind == "gap":
        return GlobalAvgPool(), rng.standard_normal((3, N, 3, 3))
    if kind == "dropout":
        return Dropout(0.3), rng.standard_normal((4, N))
    if kind == "dense":
        return Dense(4, 3, rng=rng), rng.standard_normal((N, 4))
    if kind == "inception":
        layer = Inception(2, (2, 3, 2, 2), rng=rng)
        for name, p in layer.params.items():
            if name.endswith(".b"):
                p[...] = rng.normal(0.0, 0.1, p.shape)
        return layer, rng.standard_normal((2, N, 4, 4))
    raise ValueError(kind)


def _smooth_instance(build, check, seed):
    """Run ``check`` on the first instance drawn for ``seed`` whose probes cross no kink."""
    for attempt in range(MAX_ATTEMPTS):
        try:
            return check(*build(np.random.default_rng([seed, attempt])))
        except KinkCrossed:
            continue
    raise RuntimeError(f"no kink-free instance in {MAX_ATTEMPTS} draws for seed {seed}")


def check_layer(kind, seed):
    """Worst relative error over the input and every parameter of one layer."""

    def check(layer, x):
        layer.astype(np.float64)
        x = x.astype(np.float64)

        def f():
            out = layer.forward(x, train=True, rng=np.random.default_rng(seed))
            return float(np.sum(out * R))

        R = np.random.default_rng([seed, 99]).standard_normal(
            layer.forward(x, train=True, rng=np.random.default_rng(seed)).shape)
        layer.forward(x, train=True, rng=np.random.default_rng(seed))
        dx = layer.backward(R)
        analytic = {k: v.copy() for k, v in layer.grads.items()}
        errs = [rel_err(dx, _numeric(f, x, [layer]))]
        for name, p in layer.params.items():
            errs.append(rel_err(analytic[name], _numeric(f, p, [layer])))
        return max(errs)

    return _smooth_instance(lambda rng: make_layer_case(kind, rng), check, seed)


def small_spec(K):
    layers = [
        {"type": "conv", "out": 3, "kernel": 3, "stride": 1, "pad": 1},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2},
        {"type": "inception", "widths": [2, 2, 2, 2]},
        {"type": "maxpool", "kernel": 2},
        {"type": "inception", "widths": [2, 2, 2, 2]},
        {"type": "gap"},
        {"type": "dropout", "rate": 0.2},
        {"type": "dense"},
    ]
    return NetworkSpec(n_outputs=K, input_size=8, layers=layers)


def check_network(seed, loss="cross_entropy_sigmoid"):
    """Two-block network: analytic parameter gradients against finite differences."""
    tax = default_taxonomy()
    fn = sigmoid_cross_entropy if loss == "cross_entropy_sigmoid" else hinge_loss

    def build(rng):
        net = Network(small_spec(tax.K), seed=int(rng.integers(2 ** 31))).astype(np.float64)
        for name, p in net.params.items():
            if name.endswith(".b"):
                p[...] = rng.normal(0.0, 0.1, p.shape)
        x = rng.random((3, 8, 8))
        target = effective_target(rng.integers(0, 2, size=(3, tax.K)), tax)
        return net, x, target

    def check(net, x, target):
        ysgn = 2 * target.targets - 1
        last = {}

        def f():
            z = net.forward(x, train=True, rng=np.random.default_rng(seed))
            net._forwarded = False
            last["z"] = z
            return fn(z, target)[0]

        def margins():
            if loss != "hinge":
                return []
            return [(1 - last["z"] * ysgn > 0).tobytes()]

        z = net.forward(x, train=True, rng=np.random.default_rng(seed))
        _, g = fn(z, target)
        grads = {k: v.copy() for k, v in net.backward(g).items()}
        params = net.params
        return max(rel_err(grads[k], _numeric(f, params[k], net.layers, margins)) for k in params)

    return _smooth_instance(build, check, seed)


def check_losses(seed):
    tax = default_taxonomy()
    rng = np.random.default_rng(seed)
    target = effective_target(rng.integers(0, 2, size=(4, tax.K)), tax)
    ysgn = 2 * target.targets - 1
    errs = {}
    z = rng.standard_normal((4, tax.K)) * 2
    z = np.where(np.abs(1 - z * ysgn) < 0.05, z + 0.1 * ysgn, z)  # stay off the hinge
    for name, fn, x in (("sigmoid_ce", sigmoid_cross_entropy, z.copy()),
                        ("hinge", hinge_loss, z.copy()),
                        ("ce_probs", cross_entropy_loss, sigmoid(z.copy()) * 0.6 + 0.2)):
        _, g = fn(x, target)
        errs[name] = rel_err(g, _numeric(lambda: fn(x, target)[0], x))
    return errs
