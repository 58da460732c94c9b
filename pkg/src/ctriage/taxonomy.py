"""Trait ontology with risk tiers, anatomical/type groups and loss masking."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np


class Tier(IntEnum):
    ZeroRisk = 0
    ModerateRisk = 1
    HighRisk = 2


@dataclass(frozen=True)
class Trait:
    id: int
    name: str
    tier: Tier
    group: str


@dataclass(frozen=True)
class MaskedTarget:
    """Binary targets plus 0/1 loss weights; weight 0 removes the entry."""

    targets: np.ndarray
    weights: np.ndarray


FIELDS = ("id", "name", "tier", "group", "significant")


@dataclass(frozen=True)
class Taxonomy:
    traits: tuple[Trait, ...]
    significant: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        ids = [t.id for t in self.traits]
        if ids != list(range(len(ids))):
            raise ValueError(f"trait ids must be dense 0..K-1 in order, got {ids}")
        names = [t.name for t in self.traits]
        if len(set(names)) != len(names):
            raise ValueError("trait names must be unique")
        for k in self.significant:
            if not 0 <= k < len(self.traits):
                raise ValueError(f"significant id {k} out of range")
            if self.traits[k].tier != Tier.HighRisk:
                raise ValueError(f"significant trait {self.traits[k].name!r} must be HighRisk")
        object.__setattr__(self, "significant", frozenset(self.significant))

    @property
    def K(self) -> int:
        return len(self.traits)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.traits]

    @property
    def tiers(self) -> np.ndarray:
        return np.array([int(t.tier) for t in self.traits], dtype=np.int64)

    @property
    def groups(self) -> list[str]:
        seen = []
        for t in self.traits:
            if t.group not in seen:
                seen.append(t.group)
        return seen

    @property
    def significant_ids(self) -> list[int]:
        return sorted(self.significant)

    @property
    def significant_mask(self) -> np.ndarray:
        mask = np.zeros(self.K, dtype=bool)
        mask[self.significant_ids] = True
        return mask

    def index(self, name: str) -> int:
        for t in self.traits:
            if t.name == name:
                return t.id
        raise KeyError(f"unknown trait {name!r}")

    def members(self, group: str) -> list[int]:
        ids = [t.id for t in self.traits if t.group == group]
        if not ids:
            raise KeyError(f"unknown group {group!r}")
        return ids

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(FIELDS)
        for t in self.traits:
            writer.writerow([t.id, t.name, t.tier.name, t.group, int(t.id in self.significant)])
        return buf.getvalue()

    @property
    def hash(self) -> bytes:
        """SHA-256 of the canonical CSV form; ties checkpoints to a taxonomy."""
        return hashlib.sha256(self.to_csv().encode("utf-8")).digest()

    @classmethod
    def from_csv(cls, text: str) -> "Taxonomy":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("taxonomy file has no trait records")
        missing = set(FIELDS) - set(rows[0])
        if missing:
            raise ValueError(f"taxonomy file missing columns {sorted(missing)}")
        traits, significant = [], set()
        for row in sorted(rows, key=lambda r: int(r["id"])):
            tid = int(row["id"])
            traits.append(Trait(tid, row["name"].strip(), Tier[row["tier"].strip()],
                                row["group"].strip()))
            if row["significant"].strip().lower() in ("1", "true", "yes"):
                significant.add(tid)
        return cls(tuple(traits), frozenset(significant))

    @classmethod
    def load(cls, path) -> "Taxonomy":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


_DEFAULT = [
    ("ich", Tier.HighRisk, "ich", True),
    ("depressed_skull_fracture", Tier.HighRisk, "bone", True),
    ("acute_infarct", Tier.HighRisk, "ischemia", True),
    ("mass", Tier.HighRisk, "mass", True),
    ("midline_shift", Tier.ModerateRisk, "mass_effect", False),
    ("hydrocephalus", Tier.ModerateRisk, "csf", False),
    ("pneumocephalus", Tier.ModerateRisk, "air", False),
    ("fracture", Tier.ModerateRisk, "bone", False),
    ("sinus_disease", Tier.ZeroRisk, "sinus", False),
    ("atrophy", Tier.ZeroRisk, "csf", False),
    ("scalp_swelling", Tier.ZeroRisk, "soft_tissue", False),
    ("calcification", Tier.ZeroRisk, "calcification", False),
]


def default_taxonomy() -> Taxonomy:
    """The 12-trait desk taxonomy that the phantom generator can render."""
    traits = tuple(Trait(i, name, tier, group) for i, (name, tier, group, _) in enumerate(_DEFAULT))
    significant = frozenset(i for i, row in enumerate(_DEFAULT) if row[3])
    return Taxonomy(traits, significant)


def _check_labels(labels, tax: Taxonomy) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape[-1] != tax.K:
        raise ValueError(f"label vector has length {labels.shape[-1]}, taxonomy has K={tax.K}")
    return labels


def effective_weights(labels, tax: Taxonomy) -> np.ndarray:
    """Loss weights for one label vector or a ``(N, K)`` batch of them.

    Positive labels whose tier is below the highest positive tier of the
    same sample get weight 0; negatives and top-tier positives keep 1.
    """
    labels = _check_labels(labels, tax)
    pos = labels > 0.5
    tiers = tax.tiers
    top = np.where(pos, tiers, -1).max(axis=-1, keepdims=True)
    masked = pos & (tiers < top)
    return (~masked).astype(np.float64)


def effective_target(labels, tax: Taxonomy) -> MaskedTarget:
    labels = _check_labels(labels, tax)
    return MaskedTarget(targets=labels.astype(np.float64), weights=effective_weights(labels, tax))


def group_reduce(scores, tax: Taxonomy, group: str) -> float:
    """Group score as the max over member-trait scores."""
    scores = _check_labels(scores, tax)
    return float(np.max(scores[..., tax.members(group)], axis=-1))
