"""Study-level scoring and the confidence-gated Report/Refer policy.

Slice posteriors from every ensemble member are averaged, pooled to one
score per trait with a top-m mean, and turned into a study confidence
equal to the worst decision margin over the clinically significant
traits. A study is reported only when it is confidently negative for all
of them; everything else is referred.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dicom_lite import HuVolume
from .metrics import REFER_ALL
from .net.model import Network
from .taxonomy import Taxonomy

REPORT, REFER = "Report", "Refer"


@dataclass
class StudyVerdict:
    study_uid: str
    trait_scores: np.ndarray
    confidence: float
    decision: str
    threshold: float

    def to_json(self, names=None) -> str:
        rec = {"study_uid": self.study_uid,
               "scores": [float(s) for s in self.trait_scores],
               "confidence": float(self.confidence),
               "decision": self.decision,
               "threshold": float(self.threshold)}
        if names is not None:
            rec["traits"] = list(names)
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "StudyVerdict":
        rec = json.loads(line)
        return cls(rec["study_uid"], np.asarray(rec["scores"], dtype=np.float64),
                   rec["confidence"], rec["decision"], rec["threshold"])


class NetworkScorer:
    """Adapts a bare :class:`Network` to the ``predict_proba(hu_slices)`` interface."""

    def __init__(self, network: Network, taxonomy_hash: bytes | None = None):
        self.network = network
        self.taxonomy_hash = taxonomy_hash

    def predict_proba(self, slices):
        return self.network.posteriors(self.network.normalize(slices))


class Ensemble:
    """Mean of member posteriors; members expose ``predict_proba(hu_slices)``."""

    def __init__(self, members):
        self.members = list(members)
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        hashes = {getattr(m, "taxonomy_hash", None) or getattr(m, "taxonomy_hash_", None)
                  for m in self.members} - {None}
        if len(hashes) > 1:
            raise ValueError("ensemble members were trained on different taxonomies")
        sizes = {_input_size(m) for m in self.members} - {None}
        if len(sizes) > 1:
            raise ValueError("ensemble members expect different input sizes")

    @classmethod
    def from_checkpoints(cls, checkpoints):
        return cls(NetworkScorer(c.network(), c.taxonomy_hash) for c in checkpoints)

    def predict_proba(self, slices) -> np.ndarray:
        total = None
        for m in self.members:
            p = np.asarray(m.predict_proba(slices), dtype=np.float64)
            total = p if total is None else total + p
        return total / len(self.members)


def _input_size(member):
    net = getattr(member, "network_", None)
    if net is None and isinstance(getattr(member, "network", None), Network):
        net = member.network
    return getattr(getattr(net, "spec", None), "input_size", None)


def top_m_pool(slice_scores, m=3) -> np.ndarray:
    """Per-trait mean of the ``min(m, n_slices)`` highest slice scores."""
    s = np.asarray(slice_scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("need a non-empty (n_slices, K) score matrix")
    top = min(m, s.shape[0])
    return np.sort(s, axis=0)[-top:].mean(axis=0)


def _slices(volume):
    return volume.slices if isinstance(volume, HuVolume) else np.asarray(volume, dtype=np.float32)


def score_study(ensemble, volume, top_m=3):
    """Returns ``(slice_scores (n, K), study_scores (K,))``."""
    slices = _slices(volume)
    if slices.ndim != 3 or slices.shape[0] == 0:
        raise ValueError("study has no slices to score")
    slice_scores = ensemble.predict_proba(slices)
    return slice_scores, top_m_pool(slice_scores, top_m)


def study_confidence(trait_scores, tax: Taxonomy) -> float:
    """Worst significant-trait margin ``min_k |2 s_k - 1|``."""
    sig = tax.significant_ids
    if not sig:
        raise ValueError("taxonomy has no clinically significant traits")
    s = np.asarray(trait_scores, dtype=np.float64)[sig]
    return float(np.min(1.0 - 2.0 * np.minimum(s, 1.0 - s)))


def negative_predicted(trait_scores, tax: Taxonomy) -> bool:
    s = np.asarray(trait_scores, dtype=np.float64)
    return bool(np.all(s[tax.significant_ids] < 0.5))


def decide(trait_scores, confidence, tau, tax: Taxonomy, study_uid="") -> StudyVerdict:
    if not 0.0 <= tau <= REFER_ALL:
        raise ValueError("threshold must lie in [0, 1] (or the refer-all sentinel)")
    report = confidence >= tau and negative_predicted(trait_scores, tax)
    return StudyVerdict(study_uid, np.asarray(trait_scores, dtype=np.float64), float(confidence),
                        REPORT if report else REFER, float(tau))


def calibrate_threshold(confidences, negative_mask, target_coverage) -> float:
    """Smallest threshold whose coverage is the largest achievable not above the target.

    Coverage counts negative-predicted studies with confidence at or above
    the threshold, over all studies. Ties move together, so a tie that would
    overshoot the target pushes the threshold up (lower, safer coverage).
    Returns the refer-all sentinel when no positive coverage fits.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    neg = np.asarray(negative_mask, dtype=bool)
    if conf.size == 0:
        raise ValueError("empty calibration set")
    if conf.shape != neg.shape:
        raise ValueError("confidences and negative mask differ in length")
    if not 0.0 <= target_coverage <= 1.0:
        raise ValueError("target coverage must be in [0, 1]")
    n = conf.size
    budget = target_coverage * n + 1e-9
    best = REFER_ALL
    for tau in np.unique(conf[neg])[::-1]:  # descending: coverage grows
        if np.count_nonzero(neg & (conf >= tau)) <= budget:
            best = float(tau)
        else:
            break
    return best


class SelectiveReporter(BaseEstimator):
    """Calibrates the Report/Refer threshold on held-out studies, then triages.

    Parameters
    ----------
    members : list
        Fitted slice scorers exposing ``predict_proba(hu_slices)``, e.g.
        :class:`~ctriage.net.SliceClassifier` instances.
    taxonomy : Taxonomy
        Defines which traits are clinically significant.
    target_coverage : float, default=0.421
        Fraction of calibration studies to report on.
    top_m : int, default=3
        Slices pooled per trait.

    Calibration uses only the ensemble's own outputs, never labels.
    """

    def __init__(self, members=None, taxonomy=None, target_coverage=0.421, top_m=3):
        self.members = members
        self.taxonomy = taxonomy
        self.target_coverage = target_coverage
        self.top_m = top_m

    def _ensemble(self):
        if isinstance(self.members, Ensemble):
            return self.members
        return Ensemble(self.members or [])

    def study_scores(self, volumes) -> np.ndarray:
        ens = self._ensemble()
        return np.array([score_study(ens, v, self.top_m)[1] for v in volumes])

    def _confidence(self, scores):
        tax = self.taxonomy
        conf = np.array([study_confidence(s, tax) for s in scores])
        neg = np.array([negative_predicted(s, tax) for s in scores], dtype=bool)
        return conf, neg

    def fit(self, volumes, y=None, scores=None):
        """Pick the threshold on calibration ``volumes`` (or precomputed study ``scores``)."""
        if self.taxonomy is None:
            raise ValueError("SelectiveReporter needs a taxonomy")
        scores = self.study_scores(volumes) if scores is None else np.asarray(scores)
        conf, neg = self._confidence(scores)
        self.threshold_ = calibrate_threshold(conf, neg, self.target_coverage)
        self.calibration_coverage_ = float(np.mean(neg & (conf >= self.threshold_)))
        return self

    def decision_function(self, volumes):
        conf, _ = self._confidence(self.study_scores(volumes))
        return conf

    def predict(self, volumes, scores=None, study_uids=None) -> list[StudyVerdict]:
        check_is_fitted(self, "threshold_")
        volumes = list(volumes) if volumes is not None else None
        scores = self.study_scores(volumes) if scores is None else np.asarray(scores)
        if study_uids is None:
            study_uids = [getattr(v, "study_uid", str(i)) for i, v in enumerate(volumes or scores)]
        out = []
        for uid, s in zip(study_uids, scores):
            out.append(decide(s, study_confidence(s, self.taxonomy), self.threshold_,
                              self.taxonomy, uid))
        return out
