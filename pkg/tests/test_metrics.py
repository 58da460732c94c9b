import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctriage.aggregate import StudyVerdict
from ctriage.metrics import (REFER_ALL, LiterarySource, UndefinedStatistic, auc_score,
                             bootstrap_ci, csmr, csmr_from_arrays, literary_rate, risk_coverage,
                             roc, trait_table, write_metrics_csv)
from ctriage.taxonomy import default_taxonomy

TAX = default_taxonomy()


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def random_instance(rng, n):
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse grid so that ties actually occur
    scores = rng.integers(0, max(2, n // 3), n) / 7.0 if rng.random() < 0.5 else rng.random(n)
    return scores, labels


def test_auc_examples():
    assert auc_score([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_score([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedStatistic):
        roc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(10))
def test_auc_matches_pair_count_oracle(seed):
    rng = np.random.default_rng(seed)
    scores, labels = random_instance(rng, 50)
    assert abs(auc_score(scores, labels) - pair_count_auc(scores, labels)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
def test_roc_curve_invariants(rows):
    scores = [s for s, _ in rows]
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        return
    c = roc(scores, labels)
    assert c.fpr[0] == 0 and c.tpr[0] == 0 and c.fpr[-1] == 1 and c.tpr[-1] == 1
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert len(c.thresholds) == len(set(scores)) + 1
    assert abs(c.auc - pair_count_auc(scores, labels)) <= 1e-12


def test_bootstrap_constant_data_has_zero_width():
    r = bootstrap_ci(np.full(30, 2.5), np.mean, n_resamples=200, seed=1)
    assert r.lo == r.hi == 2.5


def test_bootstrap_is_deterministic_and_thread_independent():
    x = np.random.default_rng(0).standard_normal(80)
    a = bootstrap_ci(x, np.mean, 300, seed=11)
    b = bootstrap_ci(x, np.mean, 300, seed=11)
    c = bootstrap_ci(x, np.mean, 300, seed=11, n_jobs=3)
    assert (a.lo, a.hi) == (b.lo, b.hi) == (c.lo, c.hi)
    assert np.array_equal(a.estimates, c.estimates)
    assert (a.lo, a.hi) != tuple(bootstrap_ci(x, np.mean, 300, seed=12))


def test_auc_interval_contains_estimate():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 200)
    s = y * 0.8 + rng.standard_normal(200)
    r = bootstrap_ci((s, y), auc_score, 500, seed=0)
    assert r.lo <= auc_score(s, y) <= r.hi


def test_undefined_resamples_are_redrawn():
    y = np.zeros(12, int)
    y[0] = 1
    s = np.linspace(0, 1, 12)
    r = bootstrap_ci((s, y), auc_score, 200, seed=0)
    assert r.redraws > 0 and len(r.estimates) == 200


def test_interval_narrows_with_more_data():
    narrower = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        w = []
        for n in (100, 1000):
            x = rng.standard_normal(n)
            lo, hi = bootstrap_ci(x, np.mean, 200, seed=seed)
            w.append(hi - lo)
        narrower += w[1] < w[0]
    assert narrower == 10


def test_csmr_examples():
    r = csmr_from_arrays(np.ones(1000, bool), np.r_[np.ones(2, bool), np.zeros(998, bool)])
    assert r.csmr == pytest.approx(0.002)
    assert csmr_from_arrays(np.zeros(5, bool), np.ones(5, bool)).csmr is None


def test_csmr_denominator_is_reported_set():
    reported = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], bool)
    sig = np.array([1, 0, 0, 0, 1, 1, 1, 0, 0, 0], bool)
    r = csmr_from_arrays(reported, sig)
    assert r.csmr == 0.25 and r.coverage == 0.4 and r.n_missed_significant == 1


def _verdict(uid, decision):
    return StudyVerdict(uid, np.zeros(TAX.K), 1.0, decision, 0.5)


def test_oracle_verdicts_have_zero_misses():
    rng = np.random.default_rng(2)
    truth = {f"s{i}": rng.integers(0, 2, TAX.K) for i in range(50)}
    verdicts = [_verdict(u, "Refer" if y[TAX.significant_ids].any() else "Report")
                for u, y in truth.items()]
    r = csmr(verdicts, truth, TAX)
    assert r.csmr == 0 and r.n_reported > 0
    with pytest.raises(ValueError):
        csmr([_verdict("missing", "Report")], truth, TAX)


def test_literary_rate():
    overall, miss = literary_rate()
    assert round(100 * overall, 2) == 1.21 and round(100 * miss, 2) == 0.83
    assert abs(100 * overall - 1.214) < 1e-3 and abs(100 * miss - 0.8255) < 1e-3
    assert literary_rate([LiterarySource(100, 0.02)], 1.0) == (0.02, 0.02)
    with pytest.raises(ValueError):
        literary_rate([], 0.5)
    with pytest.raises(ValueError):
        LiterarySource(0, 0.1)


def test_risk_coverage_endpoints_and_recompute():
    rng = np.random.default_rng(4)
    conf = np.round(rng.random(60), 1)
    neg = np.ones(60, bool)
    sig = rng.random(60) < 0.2
    pts = risk_coverage(conf, neg, sig)
    assert pts[0].coverage == 1.0 and pts[-1].coverage == 0.0
    assert pts[-1].threshold == REFER_ALL and pts[-1].csmr is None
    cov = [p.coverage for p in pts]
    assert all(b < a for a, b in zip(cov, cov[1:]))
    for p in pts[:-1]:
        again = csmr_from_arrays(neg & (conf >= p.threshold), sig)
        assert again.csmr == p.csmr and again.n_reported == p.n_reported


def test_risk_coverage_oracle_scorer():
    sig = np.array([1, 0, 0, 1, 0], bool)
    pts = risk_coverage(np.linspace(0.1, 0.9, 5), ~sig, sig)
    assert all(p.csmr in (0, None) for p in pts)


def test_trait_table_counts():
    rng = np.random.default_rng(5)
    truth = rng.integers(0, 2, (40, TAX.K))
    truth[:, TAX.index("calcification")] = 0
    reported = rng.random(40) < 0.5
    rows = trait_table({"op": reported, "all": np.ones(40, bool)}, truth, TAX)
    assert [r["count"] for r in rows] == truth.sum(axis=0).tolist()
    calc = rows[TAX.index("calcification")]
    assert calc["incidence_pct"] == 0 and calc["op_count"] == 0
    for k, r in enumerate(rows):
        assert r["op_count"] == int(truth[reported, k].sum())
        assert r["all_pct"] == pytest.approx(r["incidence_pct"])


def test_metrics_csv_format(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv([{"metric": "csmr", "trait_or_ALL": "ALL", "operating_point": "x",
                        "value": None},
                       {"metric": "auc", "trait_or_ALL": "ich", "operating_point": "-",
                        "value": 0.5, "ci_lo": 0.25, "ci_hi": 0.75}], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "metric,trait_or_ALL,operating_point,value,ci_lo,ci_hi"
    assert lines[1] == "csmr,ALL,x,undefined,,"
    assert lines[2] == "auc,ich,-,0.5,0.25,0.75"
