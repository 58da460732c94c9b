"""Synthetic head-CT studies with exact ground-truth trait labels.

Each study is a stack of 2-D elliptical head slices (air, scalp, skull
ring, brain, lateral ventricles, frontal sinus). Sampled traits are painted
in as geometric or attenuation perturbations, and every trait keeps a voxel
mask so the slice labels mark exactly the slices a lesion touches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dicom_lite import DicomHeader, HuVolume, hu_to_raw, write_file
from .taxonomy import Taxonomy, default_taxonomy

AIR, SOFT, BONE, CSF = -1000.0, 40.0, 1000.0, 5.0
BRAIN_LO, BRAIN_HI = 20.0, 45.0
BLOOD_LO, BLOOD_HI = 50.0, 90.0
AXIAL = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

DEFAULT_TRAIT_PROBS = {
    "ich": 0.12,
    "depressed_skull_fracture": 0.05,
    "acute_infarct": 0.08,
    "mass": 0.07,
    "midline_shift": 0.04,
    "hydrocephalus": 0.05,
    "pneumocephalus": 0.04,
    "fracture": 0.08,
    "sinus_disease": 0.15,
    "atrophy": 0.15,
    "scalp_swelling": 0.10,
    "calcification": 0.10,
}

DEFAULT_COOCCURRENCE = {
    ("mass", "midline_shift"): 0.6,
    ("ich", "midline_shift"): 0.25,
    ("depressed_skull_fracture", "scalp_swelling"): 0.5,
}

# Paint order; later lesions overwrite earlier ones where they overlap.
RENDER_ORDER = (
    "atrophy", "hydrocephalus", "midline_shift", "acute_infarct", "mass", "ich",
    "calcification", "pneumocephalus", "fracture", "depressed_skull_fracture",
    "sinus_disease", "scalp_swelling",
)
EXTRACRANIAL = frozenset({"fracture", "depressed_skull_fracture", "sinus_disease", "scalp_swelling"})
_VENTRICLE_TRAITS = ("atrophy", "hydrocephalus", "midline_shift")


@dataclass
class PhantomSpec:
    seed: int = 0
    slice_size: int = 64
    n_slices: int = 16
    trait_probs: dict = field(default_factory=lambda: dict(DEFAULT_TRAIT_PROBS))
    cooccurrence: dict = field(default_factory=lambda: dict(DEFAULT_COOCCURRENCE))
    severity_range: dict = field(default_factory=dict)
    # extra per-trait probability of forcing a positive (rare-trait balancing)
    force_probs: dict = field(default_factory=dict)

    def validate(self, tax: Taxonomy | None = None) -> None:
        if self.slice_size < 32:
            raise ValueError("slice_size must be at least 32")
        if self.n_slices < 1:
            raise ValueError("n_slices must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit non-negative integer")
        probs = list(self.trait_probs.values()) + list(self.cooccurrence.values())
        probs += list(self.force_probs.values())
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        for lo, hi in self.severity_range.values():
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("severity ranges must satisfy 0 <= lo <= hi <= 1")
        if tax is not None:
            names = set(tax.names)
            used = set(self.trait_probs) | set(self.force_probs) | set(self.severity_range)
            used |= {n for pair in self.cooccurrence for n in pair}
            unknown = used - names
            if unknown:
                raise ValueError(f"phantom spec names unknown traits {sorted(unknown)}")
            unrenderable = {n for n in names if n not in RENDER_ORDER}
            active = {n for n in unrenderable if self.trait_probs.get(n, 0) > 0
                      or self.force_probs.get(n, 0) > 0}
            if active:
                raise ValueError(f"no phantom renderer for traits {sorted(active)}")

    def replace(self, **kw) -> "PhantomSpec":
        d = dict(self.__dict__)
        d.update(kw)
        return PhantomSpec(**d)


@dataclass
class LabeledStudy:
    volume: HuVolume
    study_labels: np.ndarray  # (K,) int8
    slice_labels: np.ndarray  # (n_slices, K) int8
    seed: int = 0
    brain_mask: np.ndarray | None = None  # skull interior, (n, S, S)
    lesion_masks: np.ndarray | None = None  # (K, n, S, S)

    @property
    def study_uid(self) -> str:
        return self.volume.study_uid


def study_uid_for(seed: int) -> str:
    return f"2.25.{int(seed)}"


def sample_traits(spec: PhantomSpec, tax: Taxonomy, rng) -> np.ndarray:
    """Independent base draws, forced positives, then conditional redraws.

    A cooccurrence rule ``(i, j): p`` redraws trait ``j`` with probability
    ``p`` whenever ``i`` is positive; with several active rules for ``j``
    the largest probability wins.
    """
    K = tax.K
    u = rng.random(K)
    base = np.array([spec.trait_probs.get(n, 0.0) for n in tax.names])
    labels = u < base
    force = np.array([spec.force_probs.get(n, 0.0) for n in tax.names])
    labels |= rng.random(K) < force
    primary = labels.copy()
    cond = np.full(K, -1.0)
    for (i, j), p in spec.cooccurrence.items():
        if primary[tax.index(i)]:
            cond[tax.index(j)] = max(cond[tax.index(j)], p)
    redraw = rng.random(K)
    active = cond >= 0
    labels[active] = redraw[active] < cond[active]
    return labels


class _Canvas:
    """Per-study painting state: volume, skull interior and lesion masks."""

    def __init__(self, n, size, names):
        self.vol = np.full((n, size, size), AIR, dtype=np.float64)
        self.interior = np.zeros((n, size, size), dtype=bool)
        self.masks = {name: np.zeros((n, size, size), dtype=bool) for name in names}

    def paint(self, region, values, owners):
        owners = [o for o in owners if o in self.masks]
        self.vol[region] = values
        for name, m in self.masks.items():
            if name in owners:
                m[region] = True
            else:
                m[region] = False


def _ellipse_radius(x, y, a, b):
    return np.sqrt((x / a) ** 2 + (y / b) ** 2)


def generate_study(spec: PhantomSpec, tax: Taxonomy | None = None, keep_masks: bool = False,
                   labels=None) -> LabeledStudy:
    """Render one study; deterministic in ``spec.seed``.

    ``labels`` overrides trait sampling (a length-K boolean vector) and is
    what tests use to force a trait on.
    """
    tax = tax or default_taxonomy()
    spec.validate(tax)
    rng = np.random.default_rng(spec.seed)
    sampled = sample_traits(spec, tax, rng)
    if labels is not None:
        sampled = np.asarray(labels, dtype=bool)
        if sampled.shape != (tax.K,):
            raise ValueError("forced labels must have length K")
    positive = {tax.names[k] for k in np.flatnonzero(sampled)}
    unrenderable = positive - set(RENDER_ORDER)
    if unrenderable:
        raise ValueError(f"no phantom renderer for traits {sorted(unrenderable)}")

    n, S = spec.n_slices, spec.slice_size
    cv = _Canvas(n, S, tax.names)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    c = (S - 1) / 2.0
    x, y = xx - c, yy - c
    theta = np.arctan2(y, x)
    zn = np.linspace(-0.9, 0.9, n) if n > 1 else np.zeros(1)

    a0 = S * 0.36 * rng.uniform(0.95, 1.05)
    b0 = S * 0.42 * rng.uniform(0.95, 1.05)
    thick = max(2.0, S * 0.045)
    bone = rng.uniform(900, 1100)
    vent_dx = S * 0.06
    vent_a, vent_b = S * 0.045, S * 0.12

    def severity(name):
        lo, hi = spec.severity_range.get(name, (0.3, 1.0))
        return rng.uniform(lo, hi)

    # ---- baseline anatomy
    axes = []
    for i in range(n):
        shrink = np.sqrt(max(1.0 - 0.7 * zn[i] ** 2, 0.05))
        A, B = a0 * shrink, b0 * shrink
        axes.append((A, B))
        r_out = _ellipse_radius(x, y, A, B)
        r_in = _ellipse_radius(x, y, A - thick, B - thick)
        r_skin = _ellipse_radius(x, y, A + 1.5, B + 1.5)
        sl = cv.vol[i]
        sl[r_skin <= 1.0] = SOFT
        sl[r_out <= 1.0] = bone + rng.normal(0, 20, size=(S, S))[r_out <= 1.0]
        inside = r_in <= 1.0
        cv.interior[i] = inside
        grey = 28.0 + 10.0 * np.clip((r_in - 0.6) / 0.3, 0.0, 1.0)
        brain = np.clip(grey + rng.normal(0, 3.0, size=(S, S)), BRAIN_LO, BRAIN_HI)
        sl[inside] = brain[inside]
        if zn[i] < -0.35:
            # frontal sinus: air pocket in a bony shell just anterior to the skull
            sy = -(B + S * 0.03)
            shell = _ellipse_radius(x, y - sy, S * 0.11, S * 0.06) <= 1.0
            sl[shell & ~inside] = bone
            pocket = _ellipse_radius(x, y - sy, S * 0.075, S * 0.035) <= 1.0
            sl[pocket & ~inside] = AIR

    # ---- ventricle-based traits share one painted structure
    vent_scale = 1.0
    shift = 0.0
    if "hydrocephalus" in positive:
        vent_scale *= 1.6 + 0.5 * severity("hydrocephalus")
    if "atrophy" in positive:
        vent_scale *= 1.3
    if "midline_shift" in positive:
        shift = S * (0.06 + 0.05 * severity("midline_shift")) * rng.choice([-1.0, 1.0])
    owners = [t for t in _VENTRICLE_TRAITS if t in positive]
    for i in range(n):
        if abs(zn[i]) >= 0.45:
            continue
        zs = np.sqrt(1.0 - (zn[i] / 0.45) ** 2)
        va, vb = vent_a * vent_scale * zs, vent_b * vent_scale ** 0.5 * zs
        if va < 0.7:
            continue
        vent = np.zeros((S, S), dtype=bool)
        for side in (-1.0, 1.0):
            cx = shift + side * (vent_dx + (vent_scale - 1.0) * vent_a * 0.6)
            vent |= _ellipse_radius(x - cx, y + S * 0.02, va, vb) <= 1.0
        vent &= cv.interior[i]
        if not vent.any():
            continue
        region = np.zeros((n, S, S), dtype=bool)
        region[i] = vent
        cv.paint(region, np.clip(CSF + rng.normal(0, 2.0, size=int(vent.sum())), 0, 10), owners)

    if "atrophy" in positive:
        for i in range(n):
            A, B = axes[i]
            gap = 1.5 + 1.5 * severity("atrophy")
            rim = cv.interior[i] & (_ellipse_radius(x, y, A - thick - gap, B - thick - gap) > 1.0)
            region = np.zeros((n, S, S), dtype=bool)
            region[i] = rim
            cv.paint(region, np.clip(CSF + rng.normal(0, 2.0, size=int(rim.sum())), 0, 10), ["atrophy"])

    # ---- focal intracranial lesions
    def blob_region(radius, z_half, centre_frac=0.65):
        """Ellipsoidal blob centred in the brain; returns (region, center slice)."""
        mid = [i for i in range(n) if abs(zn[i]) < 0.7] or list(range(n))
        ci = int(rng.choice(mid))
        A, B = axes[ci]
        ang = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform(0, 1)) * centre_frac
        cx, cy = rad * (A - thick) * np.cos(ang), rad * (B - thick) * np.sin(ang)
        region = np.zeros((n, S, S), dtype=bool)
        for i in range(max(0, ci - z_half), min(n, ci + z_half + 1)):
            dz = (i - ci) / (z_half + 1.0)
            r = radius * np.sqrt(max(1.0 - dz * dz, 0.0))
            if r < 0.8:
                continue
            region[i] = (((x - cx) ** 2 + (y - cy) ** 2) <= r * r) & cv.interior[i]
        return region

    def painted_values(region, lo, hi, noise):
        level = rng.uniform(lo, hi)
        vals = level + rng.normal(0, noise, size=int(region.sum()))
        return np.clip(vals, lo, hi)

    if "acute_infarct" in positive:
        s = severity("acute_infarct")
        ci = int(rng.integers(max(0, n // 4), max(n // 4 + 1, 3 * n // 4)))
        z_half = int(rng.integers(1, 3))
        centre = rng.uniform(-np.pi, np.pi)
        width = np.deg2rad(30 + 30 * s)
        dtheta = np.angle(np.exp(1j * (theta - centre)))
        region = np.zeros((n, S, S), dtype=bool)
        for i in range(max(0, ci - z_half), min(n, ci + z_half + 1)):
            A, B = axes[i]
            rr = _ellipse_radius(x, y, A - thick, B - thick)
            region[i] = cv.interior[i] & (np.abs(dtheta) <= width / 2) & (rr >= 0.45)
        cv.paint(region, painted_values(region, 8.0, 16.0, 1.5), ["acute_infarct"])

    if "mass" in positive:
        s = severity("mass")
        outer = blob_region(3.5 + 3.0 * s, int(rng.integers(1, 3)), centre_frac=0.55)
        core = np.zeros_like(outer)
        for i in range(n):
            if outer[i].any():
                core[i] = _erode(outer[i], 1)
        rim = outer & ~core
        cv.paint(rim, painted_values(rim, 6.0, 14.0, 1.5), ["mass"])
        cv.paint(core, painted_values(core, 25.0, 40.0, 2.0), ["mass"])

    if "ich" in positive:
        s = severity("ich")
        region = blob_region(2.6 + 3.0 * s, int(rng.integers(1, 3)))
        cv.paint(region, painted_values(region, 58.0, 85.0, 2.0), ["ich"])

    if "calcification" in positive:
        region = blob_region(1.2 + 0.8 * severity("calcification"), 0, centre_frac=0.8)
        cv.paint(region, painted_values(region, 150.0, 400.0, 10.0), ["calcification"])

    if "pneumocephalus" in positive:
        n_pockets = int(rng.integers(1, 4))
        ci = int(rng.integers(n // 4, max(n // 4 + 1, 3 * n // 4)))
        region = np.zeros((n, S, S), dtype=bool)
        for _ in range(n_pockets):
            ang = rng.uniform(-np.pi, np.pi)
            r = 1.6 + 1.0 * severity("pneumocephalus")
            for i in range(max(0, ci - 1), min(n, ci + 2)):
                A, B = axes[i]
                px = (A - thick - r - 0.5) * np.cos(ang)
                py = (B - thick - r - 0.5) * np.sin(ang)
                region[i] |= (((x - px) ** 2 + (y - py) ** 2) <= r * r) & cv.interior[i]
        cv.paint(region, painted_values(region, -1000.0, -900.0, 20.0), ["pneumocephalus"])

    # ---- skull ring and extracranial traits
    def skull_ring(i, inward=0.0):
        A, B = axes[i]
        r_out = _ellipse_radius(x, y, A - inward, B - inward)
        r_in = _ellipse_radius(x, y, A - thick - inward, B - thick - inward)
        return (r_out <= 1.0) & (r_in > 1.0)

    if "fracture" in positive:
        s = severity("fracture")
        ci = int(rng.integers(n // 4, max(n // 4 + 1, 3 * n // 4)))
        centre = rng.uniform(-np.pi, np.pi)
        width = np.deg2rad(8 + 8 * s)
        dtheta = np.abs(np.angle(np.exp(1j * (theta - centre))))
        region = np.zeros((n, S, S), dtype=bool)
        for i in range(max(0, ci - 1), min(n, ci + 2)):
            region[i] = skull_ring(i) & (dtheta <= width / 2)
        cv.paint(region, painted_values(region, 30.0, 50.0, 3.0), ["fracture"])

    if "depressed_skull_fracture" in positive:
        s = severity("depressed_skull_fracture")
        ci = int(rng.integers(n // 4, max(n // 4 + 1, 3 * n // 4)))
        centre = rng.uniform(-np.pi, np.pi)
        width = np.deg2rad(25 + 20 * s)
        depth = 2.5 + 2.5 * s
        dtheta = np.abs(np.angle(np.exp(1j * (theta - centre))))
        sector = dtheta <= width / 2
        gap = np.zeros((n, S, S), dtype=bool)
        frag = np.zeros((n, S, S), dtype=bool)
        for i in range(max(0, ci - 1), min(n, ci + 2)):
            gap[i] = skull_ring(i) & sector
            frag[i] = skull_ring(i, inward=depth) & sector & cv.interior[i]
        gap &= ~frag
        cv.paint(gap, painted_values(gap, 30.0, 50.0, 3.0), ["depressed_skull_fracture"])
        cv.paint(frag, painted_values(frag, 850.0, 1100.0, 20.0), ["depressed_skull_fracture"])

    if "sinus_disease" in positive:
        fill = 0.5 + 0.5 * severity("sinus_disease")
        region = np.zeros((n, S, S), dtype=bool)
        for i in range(n):
            if zn[i] >= -0.35:
                continue
            A, B = axes[i]
            sy = -(B + S * 0.03)
            pocket = (_ellipse_radius(x, y - sy, S * 0.075, S * 0.035) <= 1.0) & ~cv.interior[i]
            level = sy + S * 0.035 * (1.0 - 2.0 * fill)
            region[i] = pocket & (y >= level)
        cv.paint(region, painted_values(region, 20.0, 45.0, 3.0), ["sinus_disease"])

    if "scalp_swelling" in positive:
        s = severity("scalp_swelling")
        ci = int(rng.integers(n // 4, max(n // 4 + 1, 3 * n // 4)))
        centre = rng.uniform(-np.pi, np.pi)
        width = np.deg2rad(50 + 50 * s)
        dtheta = np.abs(np.angle(np.exp(1j * (theta - centre))))
        swell = 2.5 + 2.5 * s
        region = np.zeros((n, S, S), dtype=bool)
        for i in range(max(0, ci - 2), min(n, ci + 3)):
            A, B = axes[i]
            outside_skull = _ellipse_radius(x, y, A, B) > 1.0
            within = _ellipse_radius(x, y, A + 1.5 + swell, B + 1.5 + swell) <= 1.0
            region[i] = outside_skull & within & (dtheta <= width / 2)
        cv.paint(region, painted_values(region, 45.0, 65.0, 3.0), ["scalp_swelling"])

    vol = np.clip(np.rint(cv.vol), -1100, 4000).astype(np.float32)
    lesion = np.stack([cv.masks[name] for name in tax.names])
    slice_labels = lesion.any(axis=(2, 3)).T.astype(np.int8)
    study_labels = slice_labels.max(axis=0).astype(np.int8)
    uid = study_uid_for(spec.seed)
    volume = HuVolume(study_uid=uid, slices=vol, instance_numbers=list(range(1, n + 1)))
    return LabeledStudy(volume=volume, study_labels=study_labels, slice_labels=slice_labels,
                        seed=spec.seed,
                        brain_mask=cv.interior if keep_masks else None,
                        lesion_masks=lesion if keep_masks else None)


def _erode(mask, steps):
    out = mask.copy()
    for _ in range(steps):
        m = out
        out = m.copy()
        out[1:, :] &= m[:-1, :]
        out[:-1, :] &= m[1:, :]
        out[:, 1:] &= m[:, :-1]
        out[:, :-1] &= m[:, 1:]
        out[0, :] = out[-1, :] = out[:, 0] = out[:, -1] = False
    return out


def balance_force_probs(spec: PhantomSpec, target_prevalence: dict) -> dict:
    """Force probabilities lifting each named trait's base rate to a target.

    Forcing with probability q on top of base rate p gives p + (1 - p) q,
    so q = (target - p) / (1 - p). Conditional redraws are not accounted for.
    """
    out = dict(spec.force_probs)
    for name, target in target_prevalence.items():
        p = spec.trait_probs.get(name, 0.0)
        if target > p:
            out[name] = (target - p) / (1.0 - p)
    return out


def generate_corpus(spec: PhantomSpec, n_studies: int, tax: Taxonomy | None = None,
                    target_prevalence: dict | None = None):
    """Studies seeded ``spec.seed + index`` plus a manifest record per study."""
    if n_studies < 1:
        raise ValueError("n_studies must be at least 1")
    tax = tax or default_taxonomy()
    if target_prevalence:
        spec = spec.replace(force_probs=balance_force_probs(spec, target_prevalence))
    studies, manifest = [], []
    for i in range(n_studies):
        study = generate_study(spec.replace(seed=spec.seed + i), tax)
        studies.append(study)
        manifest.append({"study_uid": study.study_uid, "seed": spec.seed + i,
                         "labels": study.study_labels.tolist(),
                         "slice_labels": study.slice_labels.tolist(), "files": []})
    return studies, manifest


def slice_header(study_uid: str, instance: int, rows: int, cols: int,
                 orientation=AXIAL, modality: str = "CT") -> DicomHeader:
    return DicomHeader(modality=modality, study_uid=study_uid, series_uid=study_uid + ".1",
                       instance_number=instance, image_orientation=tuple(orientation),
                       rows=rows, cols=cols, bits_allocated=16,
                       rescale_slope=1.0, rescale_intercept=-1024.0)


def export_study(study: LabeledStudy, directory) -> list[str]:
    """Write one file per slice; returns paths relative to ``directory``."""
    directory = Path(directory)
    sub = directory / study.study_uid
    sub.mkdir(parents=True, exist_ok=True)
    rel = []
    vol = study.volume
    for inst, sl in zip(vol.instance_numbers, vol.slices):
        header = slice_header(vol.study_uid, inst, *sl.shape)
        name = f"{study.study_uid}/{inst:04d}.dcm"
        (directory / name).write_bytes(write_file(header, hu_to_raw(sl)))
        rel.append(name)
    return rel


def write_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
