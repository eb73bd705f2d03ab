import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asd.dataset import TruthRow
from asd.evaluation import (EvaluationError, EvaluationReport, SectionResult, aggregate_reports, auc_domain,
                            collect_scores, evaluate, harmonic_mean, n_hard_normals, official_score, pauc_section,
                            read_report_csv, render_report, write_report_csv)
from asd.scoring import write_score_csv
from oracles import pair_auc, pair_pauc


def test_auc_examples():
    assert auc_domain([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auc_domain([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert auc_domain([0.3, 0.7], [0.5, 0.9]) == 0.75


def test_auc_needs_both_sides():
    with pytest.raises(EvaluationError):
        auc_domain([], [1.0])
    with pytest.raises(EvaluationError):
        auc_domain([1.0], [])
    with pytest.raises(EvaluationError):
        auc_domain([np.nan], [1.0])


def test_pauc_examples():
    assert pauc_section(list(range(10)), [10, 5], 0.1) == 0.5
    assert pauc_section([0.1, 0.2, 0.3], [0.4, 0.5], 0.5) == 1.0
    assert pauc_section([1.0] * 20, [1.0] * 3, 0.1) == 0.0


def test_pauc_too_few_normals():
    with pytest.raises(EvaluationError, match="too few normal clips for p"):
        pauc_section(list(range(9)), [1.0], 0.1)
    with pytest.raises(EvaluationError):
        pauc_section(list(range(10)), [1.0], 0.0)


def test_hard_normal_count_uses_exact_floor():
    assert n_hard_normals(200, 0.1) == 20
    assert n_hard_normals(100, 0.29) == 29  # float product is 28.999999999999996
    assert n_hard_normals(19, 0.1) == 1


def test_pauc_cut_tie_break_by_name():
    # two normals tie at the cut; the one with the smaller name is kept, result unchanged by order
    normals, names = [0.5, 0.9, 0.9, 0.1], ["d", "b", "a", "c"]
    assert pauc_section(normals, [0.95], 0.25, names) == 1.0
    assert pauc_section(normals[::-1], [0.95], 0.25, names[::-1]) == 1.0


def test_harmonic_mean_examples():
    assert harmonic_mean([0.6] * 5) == pytest.approx(0.6, rel=1e-15)
    assert harmonic_mean([0.5, 1.0]) == pytest.approx(2 / 3, rel=1e-15)
    assert harmonic_mean([1.0]) == 1.0
    for bad in ([0.5, 0.0], [-0.1], []):
        with pytest.raises(EvaluationError):
            harmonic_mean(bad)


def test_official_score_constant_and_singleton():
    grid = {(f"m{i}", "00"): (0.5, 0.5, 0.5) for i in range(7)}
    assert official_score(grid) == pytest.approx(0.5, rel=1e-15)
    assert official_score([SectionResult("fan", "00", 0.7, 0.7, 0.7)]) == pytest.approx(0.7, rel=1e-15)


def test_official_score_missing_cell():
    grid = {("fan", "00"): (0.5, 0.5, 0.5), ("valve", "00"): (0.5, None, 0.5)}
    with pytest.raises(EvaluationError, match="valve/section_00"):
        official_score(grid)
    with pytest.raises(EvaluationError):
        official_score({})


@given(seed=st.integers(0, 2**32 - 1), n_neg=st.integers(1, 50), n_pos=st.integers(1, 50),
       discrete=st.booleans())
@settings(max_examples=200, deadline=None)
def test_oracle_equivalence(seed, n_neg, n_pos, discrete):
    rng = np.random.default_rng(seed)
    draw = (lambda n: rng.integers(0, 5, n).astype(float)) if discrete else (lambda n: rng.normal(size=n))
    normals, anomalies = draw(n_neg), draw(n_pos)
    assert auc_domain(normals, anomalies) == float(pair_auc(normals, anomalies))
    if n_hard_normals(n_neg, 0.1) >= 1:
        assert pauc_section(normals, anomalies, 0.1) == float(pair_pauc(normals, anomalies, 0.1))


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    src, tgt, anom = rng.normal(size=30), rng.normal(size=20), rng.normal(0.5, size=25)
    f = lambda x: np.exp(3 * np.asarray(x)) + 1  # noqa: E731  strictly increasing
    base = (auc_domain(src, anom), auc_domain(tgt, anom), pauc_section(np.r_[src, tgt], anom))
    moved = (auc_domain(f(src), f(anom)), auc_domain(f(tgt), f(anom)), pauc_section(f(np.r_[src, tgt]), f(anom)))
    assert base == moved


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_harmonic_mean_bounds(values):
    h = harmonic_mean(values)
    assert min(values) * (1 - 1e-12) <= h <= np.mean(values) * (1 + 1e-12)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_pauc_full_range_is_pooled_auc(seed):
    rng = np.random.default_rng(seed)
    normals, anomalies = rng.integers(0, 8, 17).astype(float), rng.integers(0, 8, 9).astype(float)
    assert pauc_section(normals, anomalies, 1.0) == auc_domain(normals, anomalies)


def _truth_and_scores(rng, machine="fan", n_src=6, n_tgt=4, n_anom=10):
    truth, scores = [], {}
    idx = 0
    for domain, cond, n, mu in (("source", "normal", n_src, 0.0), ("target", "normal", n_tgt, 0.3),
                                ("source", "anomaly", n_anom // 2, 1.0), ("target", "anomaly", n_anom // 2, 1.0)):
        for _ in range(n):
            name = f"{machine}/test/section_00_{domain}_test_{cond}_{idx:04d}_noAttributes.wav"
            truth.append(TruthRow(name, domain, cond))
            scores[name] = float(rng.normal(mu, 0.5))
            idx += 1
    return truth, scores


def test_evaluate_matches_direct_computation():
    rng = np.random.default_rng(0)
    truth, scores = _truth_and_scores(rng, n_src=10, n_tgt=10)
    report = evaluate(truth, scores, p=0.1)
    (res,) = report.sections
    by = lambda d, c: [scores[r.filename] for r in truth if r.domain == d and r.condition == c]  # noqa: E731
    anomalies = by("source", "anomaly") + by("target", "anomaly")
    assert res.auc_source == float(pair_auc(by("source", "normal"), anomalies))
    assert res.auc_target == float(pair_auc(by("target", "normal"), anomalies))
    assert res.pauc == float(pair_pauc(by("source", "normal") + by("target", "normal"), anomalies, 0.1))
    assert report.official_score == pytest.approx(harmonic_mean(res.values()), rel=1e-15)


def test_evaluate_rejects_bad_score_sets():
    rng = np.random.default_rng(1)
    truth, scores = _truth_and_scores(rng)
    missing = dict(scores)
    missing.pop(truth[0].filename)
    with pytest.raises(EvaluationError, match="1 missing"):
        evaluate(truth, missing)
    with pytest.raises(EvaluationError, match="1 extra"):
        evaluate(truth, {**scores, "fan/test/bogus.wav": 0.0})
    with pytest.raises(EvaluationError, match="duplicate"):
        evaluate(truth + truth[:1], scores)


def test_collect_scores(tmp_path):
    write_score_csv(tmp_path / "anomaly_score_fan_section_00_test.csv", [("a.wav", 0.5), ("b.wav", 1.5)])
    assert collect_scores(tmp_path, [("fan", "00")]) == {"fan/test/a.wav": 0.5, "fan/test/b.wav": 1.5}
    with pytest.raises(EvaluationError, match="missing score file"):
        collect_scores(tmp_path, [("valve", "00")])


def _report(values, p=0.1):
    sections = [SectionResult(m, "00", *v) for m, v in values.items()]
    return EvaluationReport(sections, official_score(sections), p)


def test_report_csv_round_trip(tmp_path):
    rep = _report({"fan": (0.9, 0.7, 0.6), "valve": (1 / 3, 0.5, 0.25)})
    write_report_csv(tmp_path / "r.csv", rep)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "machine,section,auc_source,auc_target,pauc"
    assert lines[-1].startswith("official_score,,")
    back = read_report_csv(tmp_path / "r.csv")
    assert back.sections == rep.sections
    assert back.official_score == rep.official_score


def test_render_single_trial():
    text = render_report(_report({"fan": (0.9, 0.7, 0.6)}), title="demo")
    assert text.splitlines()[0] == "demo"
    assert "90.00" in text and "70.00" in text and "60.00" in text
    assert "±" not in text


def test_render_identical_trials_zero_std():
    rep = _report({"fan": (0.9, 0.7, 0.6), "gearbox": (0.8, 0.75, 0.5)})
    text = render_report([rep] * 5)
    assert "90.00 ± 0.00" in text and "5 trials" in text
    for entry in aggregate_reports([rep] * 5):
        assert entry["auc_source_std"] == 0.0
    assert aggregate_reports([rep])[0]["pauc_std"] is None


def test_render_mean_and_population_std():
    a, b = _report({"fan": (0.8, 0.5, 0.5)}), _report({"fan": (1.0, 0.5, 0.5)})
    assert "90.00 ± 10.00" in render_report([a, b])


def test_render_rejects_mismatched_trials():
    with pytest.raises(EvaluationError):
        render_report([_report({"fan": (0.5,) * 3}), _report({"valve": (0.5,) * 3})])


def test_table_inputs_closed_form():
    values = [0.6698, 0.3375, 0.4877, 0.7663, 0.4692, 0.4795]
    expected = len(values) / math.fsum(1 / v for v in values)
    grid = {(str(i), "00"): values[3 * i:3 * i + 3] for i in range(2)}
    assert official_score(grid) == pytest.approx(expected, rel=1e-14)
