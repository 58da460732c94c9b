"""Run configuration: YAML file, command-line overrides, derived seeds."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .net.train import TrainConfig
from .taxonomy import Taxonomy, default_taxonomy

THREADS_ENV = "CTRIAGE_THREADS"
SPLITS = ("train", "val", "calib", "test")
_SPLIT_STRIDE = 1_000_000  # phantom seed offset between splits
_RUN_STRIDE = 10_000_000  # phantom seed offset between run seeds


def _default_train():
    return TrainConfig()


def _default_prevalence():
    return {"ich": 0.3, "depressed_skull_fracture": 0.3, "acute_infarct": 0.3, "mass": 0.3}


@dataclass
class RunConfig:
    seed: int = 0
    taxonomy: str | None = None
    out: str = "runs/desk"
    n_train: int = 600
    n_val: int = 100
    n_calib: int = 150
    n_test: int = 400
    slice_size: int = 64
    n_slices: int = 16
    # oversampling of rare significant traits in the training split only
    train_prevalence: dict = field(default_factory=_default_prevalence)
    ensemble_size: int = 2
    target_coverages: tuple = (0.421, 0.085)
    top_m: int = 3
    n_bootstrap: int = 1000
    train: TrainConfig = field(default_factory=_default_train)

    def validate(self):
        for name in ("n_train", "n_val", "n_calib", "n_test"):
            n = getattr(self, name)
            if not 1 <= n < _SPLIT_STRIDE:
                raise ValueError(f"{name} must be in [1, {_SPLIT_STRIDE})")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be at least 1")
        if not self.target_coverages:
            raise ValueError("need at least one target coverage")
        for c in self.target_coverages:
            if not 0.0 < c <= 1.0:
                raise ValueError("target coverages must lie in (0, 1]")
        if self.top_m < 1 or self.n_bootstrap < 1:
            raise ValueError("top_m and n_bootstrap must be positive")
        if not 0 <= self.seed < 2 ** 31:
            raise ValueError("seed must be a non-negative 31-bit integer")
        self.train.validate()

    @property
    def calibration_fraction(self) -> float:
        held_out = self.n_calib + self.n_test
        return self.n_calib / held_out

    def split_size(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    def split_seed(self, split: str) -> int:
        """First phantom seed of a split; splits occupy disjoint seed ranges."""
        return self.seed * _RUN_STRIDE + SPLITS.index(split) * _SPLIT_STRIDE

    def member_seed(self, member: int) -> int:
        return self.seed * 1000 + member

    def load_taxonomy(self) -> Taxonomy:
        return Taxonomy.load(self.taxonomy) if self.taxonomy else default_taxonomy()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_coverages"] = list(self.target_coverages)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        train = d.pop("train", None) or {}
        base = _default_train().to_dict()
        bad = set(train) - set(base)
        if bad:
            raise ValueError(f"unknown train keys: {sorted(bad)}")
        base.update(train)
        if "target_coverages" in d:
            d["target_coverages"] = tuple(float(c) for c in d["target_coverages"])
        cfg = cls(**d, train=TrainConfig.from_dict(base))
        cfg.validate()
        return cfg

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config (or defaults) and apply overrides; overrides win.

    Override keys may be dotted (``train.epochs``) to reach the training block.
    """
    d = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            head, tail = key.split(".", 1)
            d.setdefault(head, {})[tail] = value
        else:
            d[key] = value
    return RunConfig.from_dict(d)


def thread_count() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer")
    return n
