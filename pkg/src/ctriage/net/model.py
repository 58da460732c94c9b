"""Network description, the assembled network, and the checkpoint container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import (Conv2D, Dense, Dropout, GlobalAvgPool, Inception, Layer, MaxPool2D,
                     ReLU, StaleCacheError)
from .losses import sigmoid

HU_WINDOW = (0.0, 100.0)


def normalize_hu(hu, window=HU_WINDOW):
    """Affine window ``[lo, hi]`` HU -> [0, 1], clipped (default: brain window)."""
    lo, hi = window
    if not hi > lo:
        raise ValueError("HU window must have hi > lo")
    x = (np.asarray(hu, dtype=np.float32) - np.float32(lo)) / np.float32(hi - lo)
    return np.clip(x, np.float32(0.0), np.float32(1.0))


def default_layers(dropout=0.2):
    return [
        {"type": "conv", "out": 16, "kernel": 5, "stride": 2, "pad": 2},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 4},
        {"type": "inception", "widths": [4, 8, 4, 4]},
        {"type": "maxpool", "kernel": 2},
        {"type": "inception", "widths": [4, 8, 4, 4]},
        {"type": "gap"},
        {"type": "dropout", "rate": dropout},
        {"type": "dense"},
    ]


@dataclass
class NetworkSpec:
    n_outputs: int
    input_size: int = 64
    layers: list = field(default_factory=default_layers)
    hu_window: tuple = HU_WINDOW

    def to_dict(self):
        return {"n_outputs": self.n_outputs, "input_size": self.input_size, "layers": self.layers,
                "hu_window": [float(v) for v in self.hu_window]}

    @classmethod
    def from_dict(cls, d):
        return cls(n_outputs=d["n_outputs"], input_size=d["input_size"],
                   layers=[dict(layer) for layer in d["layers"]],
                   hu_window=tuple(d.get("hu_window", HU_WINDOW)))

    def with_dropout(self, rate):
        layers = [dict(layer, rate=rate) if layer["type"] == "dropout" else dict(layer)
                  for layer in self.layers]
        return NetworkSpec(self.n_outputs, self.input_size, layers, tuple(self.hu_window))


def _build_layer(cfg, shape, n_outputs, rng) -> Layer:
    kind = cfg["type"]
    if kind == "conv":
        return Conv2D(shape[0], cfg["out"], cfg["kernel"], cfg.get("stride", 1), cfg.get("pad", 0), rng=rng)
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool2D(cfg["kernel"], cfg.get("stride"), cfg.get("pad", 0))
    if kind == "inception":
        return Inception(shape[0], tuple(cfg.get("widths", (4, 8, 4, 4))), rng=rng)
    if kind == "gap":
        return GlobalAvgPool()
    if kind == "dropout":
        return Dropout(cfg.get("rate", 0.0))
    if kind == "dense":
        if len(shape) != 1:
            raise ValueError("dense layer needs a flat input; add a 'gap' layer first")
        return Dense(shape[0], cfg.get("out", n_outputs), rng=rng)
    raise ValueError(f"unknown layer type {kind!r}")


class Network:
    """Sequential network built from a :class:`NetworkSpec`.

    Inputs are ``(N, H, W)`` normalised slices; outputs are ``(N, K)``
    logits. ``posteriors`` applies the per-trait sigmoid.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        shape = (1, spec.input_size, spec.input_size)
        self.layers: list[Layer] = []
        for cfg in spec.layers:
            layer = _build_layer(cfg, shape, spec.n_outputs, rng)
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        if shape != (spec.n_outputs,):
            raise ValueError(f"network output shape {shape} != ({spec.n_outputs},)")
        self._forwarded = False

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                out[f"{i:02d}.{layer.kind}.{name}"] = value
        return out

    @property
    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.grads.items():
                out[f"{i:02d}.{layer.kind}.{name}"] = value
        return out

    def set_params(self, params: dict) -> None:
        own = self.params
        if set(own) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(own) ^ set(params))}")
        for key, value in params.items():
            if own[key].shape != np.shape(value):
                raise ValueError(f"{key}: shape {np.shape(value)} != {own[key].shape}")
            i, _, name = key.split(".", 2)
            layer = self.layers[int(i)]
            layer.params[name] = np.array(value, dtype=own[key].dtype)
            if isinstance(layer, Inception):
                layer._push_params()

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x)
        s = self.spec.input_size
        if x.ndim != 3 or x.shape[1:] != (s, s):
            raise ValueError(f"expected a (N, {s}, {s}) batch, got {x.shape}")
        dtype = next(iter(self.params.values())).dtype
        h = x.astype(dtype, copy=False)[None]
        for layer in self.layers:
            h = layer.forward(h, train, rng)
        self._forwarded = True
        return h

    def normalize(self, hu):
        return normalize_hu(hu, self.spec.hu_window)

    def posteriors(self, x, batch_size=256):
        out = [sigmoid(self.forward(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        self._forwarded = False
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.n_outputs))

    def backward(self, dlogits):
        if not self._forwarded:
            raise StaleCacheError("backward called without a forward pass")
        g = np.asarray(dlogits, dtype=next(iter(self.params.values())).dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._forwarded = False
        return self.grads


def predict_labels(scores, threshold=0.5):
    """Multi-label decision: trait present when its posterior reaches the threshold."""
    return (np.asarray(scores) >= threshold).astype(np.int8)


def predict_argmax(scores):
    """Single-label diagnostic mode; ties go to the lowest index."""
    return np.argmax(np.asarray(scores), axis=-1)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CTRGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Immutable-by-convention snapshot of a network and its training state."""

    spec: NetworkSpec
    params: dict
    taxonomy_hash: bytes
    epoch: int = -1
    optimizer_state: dict = field(default_factory=dict)
    extra_tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, taxonomy_hash: bytes, **kw) -> "Checkpoint":
        params = {k: v.copy() for k, v in net.params.items()}
        return cls(spec=net.spec, params=params, taxonomy_hash=taxonomy_hash, **kw)

    def network(self) -> Network:
        net = Network(self.spec)
        net.set_params(self.params)
        return net

    def _tensors(self):
        out = {f"param/{k}": v for k, v in self.params.items()}
        t = self.optimizer_state.get("t", 0)
        for slot in ("m", "v"):
            for k, v in self.optimizer_state.get(slot, {}).items():
                out[f"opt/{slot}/{k}"] = v
        out.update({f"extra/{k}": v for k, v in self.extra_tensors.items()})
        return out, t

    def to_bytes(self) -> bytes:
        tensors, t = self._tensors()
        meta = dict(self.meta, spec=self.spec.to_dict(), epoch=self.epoch, optimizer_t=t)
        meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        if len(self.taxonomy_hash) != 32:
            raise CheckpointError("taxonomy hash must be 32 bytes")
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), self.taxonomy_hash,
                 struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw_name = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw_name)) + raw_name)
            parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, taxonomy_hash: bytes | None = None) -> "Checkpoint":
        try:
            return cls._parse(buf, taxonomy_hash)
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from None

    @classmethod
    def _parse(cls, buf, taxonomy_hash):
        if buf[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        (version,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tax_hash = bytes(buf[pos:pos + 32])
        pos += 32
        if taxonomy_hash is not None and tax_hash != taxonomy_hash:
            raise CheckpointError("checkpoint was trained with a different taxonomy")
        (mlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise CheckpointError(f"tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos) \
                .reshape(dims).astype(np.float32)
            pos += size
        spec = NetworkSpec.from_dict(meta.pop("spec"))
        epoch = meta.pop("epoch")
        t = meta.pop("optimizer_t")
        params, opt, extra = {}, {"t": t} if t else {}, {}
        for name, arr in tensors.items():
            kind, rest = name.split("/", 1)
            if kind == "param":
                params[rest] = arr
            elif kind == "opt":
                slot, pname = rest.split("/", 1)
                opt.setdefault(slot, {})[pname] = arr
            else:
                extra[rest] = arr
        ckpt = cls(spec=spec, params=params, taxonomy_hash=tax_hash, epoch=epoch,
                   optimizer_state=opt, extra_tensors=extra, meta=meta)
        expected = {k: v.shape for k, v in Network(spec).params.items()}
        got = {k: v.shape for k, v in params.items()}
        if expected != got:
            raise CheckpointError("checkpoint tensors do not match its network spec")
        return ckpt

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, taxonomy_hash: bytes | None = None) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), taxonomy_hash)
