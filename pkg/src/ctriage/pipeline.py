"""Experiment plumbing shared by the command line and the in-memory desk trial.

Splits are generated from disjoint phantom seed ranges, members are trained
with derived seeds, thresholds are calibrated on the calibration split and
the test split is scored, triaged and evaluated at every target coverage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregate import REPORT, SelectiveReporter, StudyVerdict, negative_predicted
from .config import SPLITS, RunConfig
from .dicom_lite import CorruptedDicom, GeometryError, assemble_study, parse_file
from .metrics import (UndefinedStatistic, bootstrap_ci, csmr_from_arrays, literary_rate, risk_coverage,
                      risk_coverage_band, roc, roc_band, trait_table, write_metrics_csv, write_table_csv)
from .net import SliceClassifier
from .net.model import Checkpoint, NetworkSpec
from .phantom import (LabeledStudy, PhantomSpec, export_study, generate_corpus, read_manifest,
                      write_manifest)
from .taxonomy import Taxonomy

log = logging.getLogger(__name__)

COMPOSITE = "ALL"


class SplitOverlap(RuntimeError):
    """Two splits share a study uid."""


def op_name(coverage: float) -> str:
    return f"cov{100 * coverage:g}"


# ------------------------------------------------------------------ corpora

def phantom_spec(cfg: RunConfig, split: str) -> PhantomSpec:
    return PhantomSpec(seed=cfg.split_seed(split), slice_size=cfg.slice_size, n_slices=cfg.n_slices)


def make_split(cfg: RunConfig, split: str, tax: Taxonomy):
    prevalence = cfg.train_prevalence if split == "train" else None
    return generate_corpus(phantom_spec(cfg, split), cfg.split_size(split), tax,
                           target_prevalence=prevalence)


def check_disjoint(uids_by_split: dict) -> None:
    seen = {}
    for split, uids in uids_by_split.items():
        for uid in uids:
            if uid in seen and seen[uid] != split:
                raise SplitOverlap(f"study {uid} is in both {seen[uid]} and {split}")
            seen[uid] = split


def write_corpus(studies, manifest, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for study, rec in zip(studies, manifest):
        records.append(dict(rec, files=export_study(study, directory)))
    write_manifest(records, directory / "manifest.jsonl")
    return directory


@dataclass
class LoadedCorpus:
    volumes: list
    records: list
    excluded_files: int = 0
    excluded_studies: list = field(default_factory=list)


def load_corpus(directory, strict=False) -> LoadedCorpus:
    """Parse every study listed in ``manifest.jsonl``.

    Unreadable files are skipped and counted unless ``strict``; a study left
    with no usable slice is dropped and listed in ``excluded_studies``.
    """
    directory = Path(directory)
    records = read_manifest(directory / "manifest.jsonl")
    out = LoadedCorpus([], [])
    for rec in records:
        parsed = []
        for name in rec["files"]:
            try:
                parsed.append(parse_file((directory / name).read_bytes()))
            except (CorruptedDicom, GeometryError, OSError) as exc:
                if strict:
                    raise
                log.warning("excluding %s: %s", name, exc)
                out.excluded_files += 1
        try:
            volume = assemble_study(parsed)
        except (ValueError, GeometryError) as exc:
            if strict:
                raise
            log.warning("excluding study %s: %s", rec["study_uid"], exc)
            out.excluded_studies.append(rec["study_uid"])
            continue
        out.excluded_files += volume.excluded
        out.volumes.append(volume)
        out.records.append(rec)
    return out


def slice_arrays(studies):
    """Stack ``LabeledStudy`` objects (or ``(volume, record)`` pairs) into slice arrays."""
    xs, ys = [], []
    for s in studies:
        if isinstance(s, LabeledStudy):
            xs.append(s.volume.slices)
            ys.append(s.slice_labels)
        else:
            volume, rec = s
            xs.append(volume.slices)
            ys.append(np.asarray(rec["slice_labels"], dtype=np.int8))
    return np.concatenate(xs), np.concatenate(ys)


# ------------------------------------------------------------------ training

def make_member(cfg: RunConfig, tax: Taxonomy, member: int) -> SliceClassifier:
    t = cfg.train
    return SliceClassifier(taxonomy=tax, network=NetworkSpec(tax.K, cfg.slice_size), loss=t.loss, hierarchical=t.hierarchical,
                           optimizer=t.optimizer, learning_rate=t.lr, gamma=t.gamma,
                           step_epochs=t.step_epochs, epochs=t.epochs, batch_size=t.batch_size,
                           dropout=t.dropout, patience=t.patience, augment=t.augment,
                           random_state=cfg.member_seed(member))


def train_ensemble(cfg: RunConfig, tax: Taxonomy, X, Y, X_val, Y_val, resume=None, on_epoch=None):
    """Fit ``cfg.ensemble_size`` members that differ only in their seed.

    ``resume`` maps member index to a last-epoch checkpoint; ``on_epoch`` is
    called as ``on_epoch(member, checkpoint)``.
    """
    members = []
    for m in range(cfg.ensemble_size):
        hook = None if on_epoch is None else (lambda ckpt, m=m: on_epoch(m, ckpt))
        start = (resume or {}).get(m)
        est = make_member(cfg, tax, m)
        if start is not None and start.epoch + 1 >= cfg.train.epochs:
            est = SliceClassifier.from_checkpoint(_best_from_last(start, tax), tax)
        else:
            est.fit(X, Y, X_val, Y_val, resume=start, on_epoch=hook)
        log.info("member %d trained (seed %d)", m, cfg.member_seed(m))
        members.append(est)
    return members


def _best_from_last(last: Checkpoint, tax: Taxonomy) -> Checkpoint:
    params = {k[len("best/"):]: v for k, v in last.extra_tensors.items() if k.startswith("best/")}
    return Checkpoint(spec=last.spec, params=params or last.params, taxonomy_hash=tax.hash,
                      epoch=last.meta.get("best_epoch", last.epoch), meta=dict(last.meta))


# ------------------------------------------------------------------ inference

def study_scores(members, volumes, top_m=3) -> np.ndarray:
    return SelectiveReporter(members, None, top_m=top_m).study_scores(volumes)


def calibrate(members, tax, calib_scores, coverages, top_m=3) -> dict:
    """Threshold per target coverage, from calibration-split study scores only."""
    out = {}
    for c in coverages:
        rep = SelectiveReporter(members, tax, target_coverage=c, top_m=top_m)
        rep.fit(None, scores=calib_scores)
        out[op_name(c)] = rep.threshold_
    return out


def make_verdicts(scores, uids, tau, tax) -> list[StudyVerdict]:
    rep = SelectiveReporter(None, tax)
    rep.threshold_ = tau
    return rep.predict(None, scores=scores, study_uids=uids)


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalResult:
    rows: list
    roc_curves: dict
    risk_coverage: list
    trait_rows: list
    operating_points: list
    curve_inputs: dict = field(default_factory=dict)
    selection_inputs: tuple | None = None


def _auc_stat(scores, labels):
    return roc(scores, labels).auc


def _csmr_stat(reported, sig):
    r = csmr_from_arrays(reported, sig)
    if r.csmr is None:
        raise UndefinedStatistic("nothing reported")
    return r.csmr


def evaluate(verdicts_by_op: dict, truth: dict, tax: Taxonomy, n_bootstrap=1000, seed=0) -> EvalResult:
    """Metrics for verdict sets that share the same studies and scores.

    ``truth`` maps study uid to its binary study label vector.
    """
    if not verdicts_by_op:
        raise ValueError("no verdicts to evaluate")
    ops = list(verdicts_by_op)
    ref = verdicts_by_op[ops[0]]
    uids = [v.study_uid for v in ref]
    missing = [u for u in uids if u not in truth]
    if missing:
        raise ValueError(f"no ground truth for {len(missing)} studies, e.g. {missing[0]}")
    for op in ops[1:]:
        if [v.study_uid for v in verdicts_by_op[op]] != uids:
            raise ValueError(f"operating point {op} covers different studies")
    scores = np.array([v.trait_scores for v in ref], dtype=np.float64)
    Y = np.array([truth[u] for u in uids], dtype=np.int8)
    sig_ids = tax.significant_ids
    has_sig = Y[:, sig_ids].max(axis=1) > 0
    composite = scores[:, sig_ids].max(axis=1)

    rows = [{"metric": "n_studies", "trait_or_ALL": COMPOSITE, "operating_point": "-",
             "value": len(uids)}]
    curves, inputs = {}, {}
    for name, s, y in [(n, scores[:, k], Y[:, k]) for k, n in enumerate(tax.names)] + \
            [(COMPOSITE, composite, has_sig)]:
        try:
            curve = roc(s, y)
        except UndefinedStatistic:
            curves[name] = None
            rows.append({"metric": "auc", "trait_or_ALL": name, "operating_point": "-",
                         "value": None, "ci_lo": None, "ci_hi": None})
            continue
        curves[name] = curve
        inputs[name] = (s, y)
        ci = bootstrap_ci((s, y), _auc_stat, n_resamples=n_bootstrap, seed=seed)
        rows.append({"metric": "auc", "trait_or_ALL": name, "operating_point": "-",
                     "value": curve.auc, "ci_lo": ci.lo, "ci_hi": ci.hi})

    confidences = np.array([v.confidence for v in ref])
    neg = np.array([negative_predicted(v.trait_scores, tax) for v in ref])
    reported_by_op = {}
    for op in ops:
        verdicts = verdicts_by_op[op]
        reported = np.array([v.decision == REPORT for v in verdicts])
        reported_by_op[op] = reported
        r = csmr_from_arrays(reported, has_sig)
        positive_reported = int(sum(v.decision == REPORT and not negative_predicted(v.trait_scores, tax)
                                    for v in verdicts))
        lo = hi = None
        if r.csmr is not None:
            try:
                lo, hi = bootstrap_ci((reported, has_sig), _csmr_stat, n_resamples=n_bootstrap,
                                      seed=seed)
            except UndefinedStatistic:
                lo = hi = None
        base = {"trait_or_ALL": COMPOSITE, "operating_point": op}
        rows += [dict(base, metric="threshold", value=verdicts[0].threshold if verdicts else None),
                 dict(base, metric="coverage", value=r.coverage),
                 dict(base, metric="n_reported", value=r.n_reported),
                 dict(base, metric="n_missed_significant", value=r.n_missed_significant),
                 dict(base, metric="csmr", value=r.csmr, ci_lo=lo, ci_hi=hi),
                 dict(base, metric="reported_with_positive_significant", value=positive_reported)]
    overall, lit = literary_rate()
    rows += [{"metric": "literary_error_rate_pct", "trait_or_ALL": COMPOSITE,
              "operating_point": "literature", "value": 100.0 * overall},
             {"metric": "literary_csmr_pct", "trait_or_ALL": COMPOSITE,
              "operating_point": "literature", "value": 100.0 * lit}]
    rc = risk_coverage(confidences, neg, has_sig)
    return EvalResult(rows=rows, roc_curves=curves, risk_coverage=rc,
                      trait_rows=trait_table(reported_by_op, Y, tax), operating_points=ops,
                      curve_inputs=inputs, selection_inputs=(confidences, neg, has_sig))


def metric_value(result: EvalResult, metric, trait=COMPOSITE, op="-"):
    for r in result.rows:
        if r["metric"] == metric and r["trait_or_ALL"] == trait and r["operating_point"] == op:
            return r["value"]
    raise KeyError((metric, trait, op))


def write_eval_outputs(result: EvalResult, directory, seed=0, band_resamples=200) -> Path:
    """metrics.csv, one ROC CSV per trait plus the composite, risk-coverage, trait table, SVGs."""
    from .plots import plot_risk_coverage, plot_roc

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.rows, directory / "metrics.csv")
    for name, curve in result.roc_curves.items():
        fname = "roc_composite.csv" if name == COMPOSITE else f"roc_{name}.csv"
        rows = [] if curve is None else zip(curve.thresholds, curve.fpr, curve.tpr)
        write_table_csv(("threshold", "fpr", "tpr"), rows, directory / fname)
    write_table_csv(("threshold", "coverage", "n_reported", "n_missed_significant", "csmr"),
                    [(p.threshold, p.coverage, p.n_reported, p.n_missed_significant, p.csmr)
                     for p in result.risk_coverage], directory / "risk_coverage.csv")
    if result.trait_rows:
        header = list(result.trait_rows[0])
        write_table_csv(header, [[r[h] for h in header] for r in result.trait_rows],
                        directory / "trait_table.csv")

    grid = np.linspace(0.0, 1.0, 101)
    for name, curve in result.roc_curves.items():
        if curve is None or name not in result.curve_inputs:
            continue
        band = roc_band(*result.curve_inputs[name], grid, n_resamples=band_resamples, seed=seed)
        fname = "roc_composite.svg" if name == COMPOSITE else f"roc_{name}.svg"
        plot_roc(curve, directory / fname, band, grid,
                 title="Any significant trait" if name == COMPOSITE else name)
    operating = {op: (metric_value(result, "coverage", op=op), metric_value(result, "csmr", op=op))
                 for op in result.operating_points}
    rc_band = None
    if result.selection_inputs is not None:
        rc_band = risk_coverage_band(*result.selection_inputs,
                                     [p.threshold for p in result.risk_coverage],
                                     n_resamples=band_resamples, seed=seed)
    plot_risk_coverage(result.risk_coverage, directory / "risk_coverage.svg", rc_band, operating,
                       literary=literary_rate()[1])
    return directory


# ------------------------------------------------------------------ desk trial

@dataclass
class TrialResult:
    config: RunConfig
    members: list
    thresholds: dict
    verdicts: dict
    evaluation: EvalResult
    test_scores: np.ndarray
    test_truth: np.ndarray


def run_trial(cfg: RunConfig, tax: Taxonomy | None = None) -> TrialResult:
    """Whole experiment in memory; the command-line ``run`` writes the same stages to disk."""
    cfg.validate()
    tax = tax or cfg.load_taxonomy()
    splits = {s: make_split(cfg, s, tax)[0] for s in SPLITS}
    check_disjoint({s: [st.study_uid for st in v] for s, v in splits.items()})
    X, Y = slice_arrays(splits["train"])
    Xv, Yv = slice_arrays(splits["val"])
    members = train_ensemble(cfg, tax, X, Y, Xv, Yv)
    calib_scores = study_scores(members, [s.volume for s in splits["calib"]], cfg.top_m)
    thresholds = calibrate(members, tax, calib_scores, cfg.target_coverages, cfg.top_m)
    test = splits["test"]
    scores = study_scores(members, [s.volume for s in test], cfg.top_m)
    uids = [s.study_uid for s in test]
    verdicts = {op: make_verdicts(scores, uids, tau, tax) for op, tau in thresholds.items()}
    truth = {s.study_uid: s.study_labels for s in test}
    result = evaluate(verdicts, truth, tax, cfg.n_bootstrap, cfg.seed)
    return TrialResult(cfg, members, thresholds, verdicts, result, scores,
                       np.array([s.study_labels for s in test]))


__all__ = [
    "COMPOSITE", "EvalResult", "LoadedCorpus", "SplitOverlap", "TrialResult", "calibrate",
    "check_disjoint", "evaluate", "load_corpus", "make_member", "make_split", "make_verdicts",
    "metric_value", "op_name", "phantom_spec", "run_trial", "slice_arrays", "study_scores",
    "train_ensemble", "write_corpus", "write_eval_outputs",
]
