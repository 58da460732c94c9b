"""Evaluation: ROC/AUC, percentile bootstrap, miss rates and risk-coverage.

The unit of analysis is the study. A clinically significant miss is a
study the system reported on although its ground truth carries at least
one clinically significant trait; the miss rate is taken over reported
studies only and is undefined (``None``) when nothing was reported.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class UndefinedStatistic(ValueError):
    """The statistic has no value on this sample (e.g. AUC on one class)."""


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc(scores, labels) -> RocCurve:
    """Sweep thresholds over distinct scores, descending; tied scores move together."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise UndefinedStatistic("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    fpr = np.r_[0.0, fp / N]
    tpr = np.r_[0.0, tp / P]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


def auc_score(scores, labels) -> float:
    return roc(scores, labels).auc


# --------------------------------------------------------------- bootstrap

@dataclass
class BootstrapResult:
    lo: float
    hi: float
    estimates: np.ndarray
    redraws: int

    def __iter__(self):
        return iter((self.lo, self.hi))


def _as_columns(data):
    if isinstance(data, tuple):
        cols = tuple(np.asarray(d) for d in data)
    else:
        cols = (np.asarray(data),)
    n = len(cols[0])
    if n == 0:
        raise ValueError("bootstrap needs non-empty data")
    if any(len(c) != n for c in cols):
        raise ValueError("all bootstrap columns must have the same length")
    return cols, n


def _replicate(cols, n, statistic, seed, i, max_redraws):
    for attempt in range(max_redraws + 1):
        rng = np.random.default_rng([seed, i, attempt])
        idx = rng.integers(0, n, size=n)
        try:
            value = float(statistic(*(c[idx] for c in cols)))
        except UndefinedStatistic:
            continue
        if np.isfinite(value):
            return value, attempt
    raise UndefinedStatistic(f"statistic undefined on {max_redraws + 1} draws of replicate {i}")


def bootstrap_ci(data, statistic, n_resamples=1000, seed=0, alpha=0.05, max_redraws=100,
                 n_jobs=1) -> BootstrapResult:
    """Percentile interval over with-replacement resamples of rows.

    ``data`` is one array or a tuple of equal-length arrays resampled
    jointly (one row per study). Each replicate has its own generator
    derived from ``(seed, replicate, attempt)``; a resample on which the
    statistic is undefined is redrawn and counted in ``redraws``.
    """
    cols, n = _as_columns(data)
    if n_resamples < 1:
        raise ValueError("n_resamples must be positive")

    def one(i):
        return _replicate(cols, n, statistic, seed, i, max_redraws)

    if n_jobs == 1:
        results = [one(i) for i in range(n_resamples)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, range(n_resamples)))
    estimates = np.array([v for v, _ in results])
    redraws = int(sum(a for _, a in results))
    if redraws:
        log.info("bootstrap: %d resamples redrawn (statistic undefined)", redraws)
    lo, hi = np.percentile(estimates, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapResult(float(lo), float(hi), estimates, redraws)


def roc_band(scores, labels, fpr_grid, n_resamples=200, seed=0, alpha=0.05):
    """Pointwise percentile band of TPR on a fixed FPR grid."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    grid = np.asarray(fpr_grid, dtype=np.float64)
    n = len(scores)
    curves = []
    for i in range(n_resamples):
        for attempt in range(101):
            rng = np.random.default_rng([seed, i, attempt])
            idx = rng.integers(0, n, size=n)
            try:
                c = roc(scores[idx], labels[idx])
                break
            except UndefinedStatistic:
                continue
        else:
            raise UndefinedStatistic("could not draw a two-class resample")
        curves.append(np.interp(grid, c.fpr, c.tpr))
    curves = np.array(curves)
    return (np.percentile(curves, 100 * alpha / 2, axis=0),
            np.percentile(curves, 100 * (1 - alpha / 2), axis=0))


# --------------------------------------------------------------- miss rates

@dataclass
class CsmrResult:
    n_total: int
    n_reported: int
    n_missed_significant: int
    csmr: float | None
    coverage: float


def csmr_from_arrays(reported, has_significant) -> CsmrResult:
    reported = np.asarray(reported, dtype=bool)
    sig = np.asarray(has_significant, dtype=bool)
    if reported.shape != sig.shape:
        raise ValueError("reported and ground-truth arrays differ in length")
    n_rep = int(reported.sum())
    missed = int((reported & sig).sum())
    n = len(reported)
    return CsmrResult(n_total=n, n_reported=n_rep, n_missed_significant=missed,
                      csmr=(missed / n_rep) if n_rep else None,
                      coverage=(n_rep / n) if n else 0.0)


def _truth_rows(verdicts, ground_truth):
    rows = []
    for v in verdicts:
        if v.study_uid not in ground_truth:
            raise ValueError(f"no ground truth for study {v.study_uid}")
        rows.append(np.asarray(ground_truth[v.study_uid]))
    return np.array(rows)


def csmr(verdicts, ground_truth, tax) -> CsmrResult:
    """Miss rate over Report-decision studies; ``ground_truth`` maps study uid -> label vector."""
    verdicts = list(verdicts)
    truth = _truth_rows(verdicts, ground_truth)
    reported = np.array([v.decision == "Report" for v in verdicts], dtype=bool)
    sig = truth[:, tax.significant_ids].max(axis=1) > 0 if len(truth) else np.zeros(0, bool)
    return csmr_from_arrays(reported, sig)


@dataclass(frozen=True)
class LiterarySource:
    n_studies: int
    error_rate: float
    label: str = ""

    def __post_init__(self):
        if self.n_studies <= 0 or not 0.0 <= self.error_rate <= 1.0:
            raise ValueError("need n_studies > 0 and error_rate in [0, 1]")


# Published CT-head reader studies with clinically significant error rates.
CT_HEAD_SOURCES = (
    LiterarySource(137, 0.04, "pysher1999"),
    LiterarySource(716, 0.02, "erly2003"),
    LiterarySource(1081, 0.004, "jordan2006"),
    LiterarySource(560, 0.007, "jordan2012"),
    LiterarySource(284, 0.02, "babiarz2012"),
)
# most conservative reported share of errors that are misses, for CT head
CT_HEAD_MISS_FRACTION = 0.68


def literary_rate(sources=CT_HEAD_SOURCES, miss_fraction=CT_HEAD_MISS_FRACTION):
    """Study-weighted overall error rate and the implied significant miss rate."""
    sources = list(sources)
    if not sources:
        raise ValueError("need at least one source")
    if not 0.0 <= miss_fraction <= 1.0:
        raise ValueError("miss_fraction must be in [0, 1]")
    n = sum(s.n_studies for s in sources)
    overall = sum(s.n_studies * s.error_rate for s in sources) / n
    return overall, overall * miss_fraction


# --------------------------------------------------------------- risk/coverage

@dataclass
class RiskCoveragePoint:
    threshold: float
    coverage: float
    n_reported: int
    n_missed_significant: int
    csmr: float | None


REFER_ALL = float(np.nextafter(1.0, 2.0))


def risk_coverage(confidences, negative_predicted, has_significant):
    """One point per distinct confidence among negative-predicted studies, ascending
    threshold, ending with the refer-everything sentinel at coverage 0."""
    conf = np.asarray(confidences, dtype=np.float64)
    neg = np.asarray(negative_predicted, dtype=bool)
    sig = np.asarray(has_significant, dtype=bool)
    taus = list(np.unique(conf[neg])) + [REFER_ALL]
    points = []
    for tau in taus:
        r = csmr_from_arrays(neg & (conf >= tau), sig)
        points.append(RiskCoveragePoint(float(tau), r.coverage, r.n_reported,
                                        r.n_missed_significant, r.csmr))
    return points


def risk_coverage_band(confidences, negative_predicted, has_significant, thresholds,
                       n_resamples=200, seed=0, alpha=0.05):
    """Pointwise percentile band of the miss rate at fixed thresholds.

    Resamples where nothing is reported at a threshold contribute no value
    there; thresholds with no defined value at all get NaN bounds.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    neg = np.asarray(negative_predicted, dtype=bool)
    sig = np.asarray(has_significant, dtype=bool)
    taus = np.asarray(thresholds, dtype=np.float64)
    n = len(conf)
    values = np.full((n_resamples, len(taus)), np.nan)
    for i in range(n_resamples):
        idx = np.random.default_rng([seed, i]).integers(0, n, size=n)
        c, g, y = conf[idx], neg[idx], sig[idx]
        reported = g[None, :] & (c[None, :] >= taus[:, None])
        n_rep = reported.sum(axis=1)
        missed = (reported & y[None, :]).sum(axis=1)
        ok = n_rep > 0
        values[i, ok] = missed[ok] / n_rep[ok]
    lo = np.full(len(taus), np.nan)
    hi = np.full(len(taus), np.nan)
    for j in range(len(taus)):
        col = values[:, j][np.isfinite(values[:, j])]
        if col.size:
            lo[j], hi[j] = np.percentile(col, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return lo, hi


def trait_table(reported_by_op: dict, truth, tax):
    """Per-trait incidence over all studies and among each operating point's reported set."""
    truth = np.asarray(truth)
    n = len(truth)
    rows = []
    for k, name in enumerate(tax.names):
        pos = truth[:, k] > 0
        row = {"trait": name, "significant": k in tax.significant, "count": int(pos.sum()),
               "incidence_pct": 100.0 * pos.sum() / n if n else 0.0}
        for op, reported in reported_by_op.items():
            reported = np.asarray(reported, dtype=bool)
            hits = int((pos & reported).sum())
            n_rep = int(reported.sum())
            row[f"{op}_count"] = hits
            row[f"{op}_pct"] = 100.0 * hits / n_rep if n_rep else None
        rows.append(row)
    return rows


# --------------------------------------------------------------- CSV output

METRIC_FIELDS = ("metric", "trait_or_ALL", "operating_point", "value", "ci_lo", "ci_hi")


def _fmt(v):
    if v is None:
        return "undefined"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r.get(f)) if f in r else "" for f in METRIC_FIELDS])


def write_table_csv(header, rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
