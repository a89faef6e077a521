import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemblerl import analysis, pipeline
from ensemblerl.agents import TrainingConfig
from ensemblerl.analysis import (ArmSummary, PopulationReport, StabilityReport, best_decile, compare_strategies,
                                 emit_report, load_report, load_report_with_meta, rsd, score_factor,
                                 stability_factor)
from ensemblerl.errors import (ComparabilityError, ConfigurationError, ContractViolation, InsufficientDataError,
                               UndefinedMetricError)
from ensemblerl.pipeline import RunConfig
from ensemblerl.search import build_ensemble_specs

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_best_decile_examples():
    assert best_decile(list(range(1, 101))) == 91
    assert best_decile([3.5] * 10) == 3.5
    assert best_decile(list(range(10))) == 9
    assert best_decile(list(range(11))) == 9  # ceil(1.1) = 2nd largest
    with pytest.raises(InsufficientDataError):
        best_decile(list(range(9)))


@given(st.lists(finite, min_size=10, max_size=200))
def test_best_decile_oracle(scores):
    # independent route: count how many scores are >= the candidate
    k = -(-len(scores) // 10)
    candidates = sorted(set(scores))
    expected = max(c for c in candidates if sum(s >= c for s in scores) >= k)
    assert best_decile(scores) == expected


def test_rsd_examples():
    assert rsd([2, 2, 2]) == 0
    assert rsd([1, 3]) == pytest.approx(0.7071, abs=1e-4)
    with pytest.raises(UndefinedMetricError):
        rsd([0, 0])
    with pytest.raises(InsufficientDataError):
        rsd([1.0])
    assert rsd([-1, -3]) == pytest.approx(-0.7071, abs=1e-4)


@settings(max_examples=200)
@given(st.lists(st.floats(1, 100), min_size=2, max_size=20), st.floats(0, 100))
def test_rsd_shift_formula(values, c):
    x = np.array(values)
    expected = np.std(x, ddof=1) / (x.mean() + c)
    assert rsd(list(x + c)) == pytest.approx(expected, rel=1e-9, abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=20), st.floats(0.01, 100))
def test_rsd_scale_invariance(values, c):
    assert rsd([v * c for v in values]) == pytest.approx(rsd(values), rel=1e-9, abs=1e-12)


def test_population_report():
    rep = PopulationReport.from_values(range(1, 101), "homogeneous", 0.0, "avg")
    assert rep.arm == "homo-b0.0-avg"
    assert (rep.n, rep.max, rep.best_decile) == (100, 100.0, 91.0)
    assert (rep.q1, rep.median, rep.q3) == tuple(np.percentile(range(1, 101), [25, 50, 75]))
    small = PopulationReport.from_values([1, 2, 3], "heterogeneous", "inf", "best")
    assert small.best_decile is None and small.arm == "hetero-binf-best"
    with pytest.raises(InsufficientDataError):
        PopulationReport.from_values([], "homo", 0, "avg")


def test_stability_grid():
    rep = StabilityReport.from_grid([[4, 6]])
    assert rep.mean_of_means == 5 and rep.mean_of_stds == pytest.approx(math.sqrt(2))
    assert rep.rsd == pytest.approx(0.283, abs=1e-3)
    same = StabilityReport.from_grid([[7, 7, 7], [3, 3, 3]])
    assert same.mean_of_stds == 0 and same.rsd == 0
    neg = StabilityReport.from_grid([[-4, -6]])
    assert neg.negative_mean and neg.rsd < 0 and neg.rsd_abs == pytest.approx(0.283, abs=1e-3)
    with pytest.raises(InsufficientDataError):
        StabilityReport.from_grid([[1.0]])
    with pytest.raises(InsufficientDataError):
        StabilityReport.from_grid([[1.0, 2.0], [1.0, 2.0, 3.0]])
    with pytest.raises(UndefinedMetricError):
        StabilityReport.from_grid([[-1, 1]])


def test_rerun_specs_seeds():
    spec = build_ensemble_specs("dqn", "homo", 2, 1, 0.0, "avg", master_seed=3)[0]
    runs = analysis.rerun_specs(spec, 4)
    assert [r.spec_id for r in runs] == [f"{spec.spec_id}-r{i}" for i in range(4)]
    seeds = [s for r in runs for s in r.member_seeds]
    assert len(set(seeds)) == len(seeds) and not set(seeds) & set(spec.member_seeds)
    same = analysis.rerun_specs(spec, 3, identical_seeds=True)
    assert all(r.member_seeds == spec.member_seeds for r in same)


def test_factor_examples():
    assert score_factor(10, 10) == 1 and stability_factor(0.1, 0.1) == 1
    assert score_factor(10, 5) == 2 and stability_factor(0.1, 0.4) == pytest.approx(4)
    assert score_factor(-5, -10) == 2  # less negative is better
    with pytest.raises(UndefinedMetricError):
        score_factor(1, 0)
    with pytest.raises(UndefinedMetricError):
        stability_factor(0, 1)


@given(st.floats(0.1, 1e3), st.floats(0.1, 1e3), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_factor_antisymmetry(ma, mb, ra, rb):
    assert score_factor(ma, mb) * score_factor(mb, ma) == pytest.approx(1)
    assert stability_factor(ra, rb) * stability_factor(rb, ra) == pytest.approx(1)


def test_compare_identical_and_ranking():
    arms = [ArmSummary("A", "grid", 10, 0.1, 9), ArmSummary("B", "grid", 5, 0.4, 12)]
    cmp = compare_strategies(arms)
    assert cmp.ranking["grid"] == ["B", "A"]  # decile beats mean when every arm has one
    assert cmp.factors[("A", "B")]["grid"] == {"score_factor": 2, "stability_factor": pytest.approx(4)}
    arms = [ArmSummary("A", "grid", 10, 0.1), ArmSummary("B", "grid", 5, 0.4)]
    assert compare_strategies(arms).ranking["grid"] == ["A", "B"]
    twins = compare_strategies([ArmSummary("A", "g", 3, 0.2), ArmSummary("B", "g", 3, 0.2)])
    assert twins.medians[("A", "B")] == {"score_factor": 1, "stability_factor": 1}
    assert len(cmp.rows()) == 4


def test_compare_requires_same_envs():
    with pytest.raises(ComparabilityError):
        compare_strategies([ArmSummary("A", "x", 1, 0.1), ArmSummary("B", "y", 1, 0.1)])
    with pytest.raises(ComparabilityError):
        compare_strategies([ArmSummary("A", "x", 1, 0.1)])


def test_median_of_factors_across_envs():
    score = [0.98, 1.54, 1.38, 19.1]
    stab = [4.2, 5.08, 2.95, 0.83]
    arms = []
    for i, (sf, tf) in enumerate(zip(score, stab)):
        arms.append(ArmSummary("ens", f"env{i}", sf, 0.1))
        arms.append(ArmSummary("single", f"env{i}", 1.0, 0.1 * tf))
    med = compare_strategies(arms).medians[("ens", "single")]
    assert med["score_factor"] == pytest.approx(1.46)
    assert med["stability_factor"] == pytest.approx(3.575)
    assert round(med["stability_factor"], 2) == 3.58


def test_empty_report_is_header_only(tmp_path):
    path = emit_report([], tmp_path / "e.csv", kind="population")
    assert path.read_text().strip() == ",".join(analysis.POPULATION_COLUMNS)
    assert load_report(path) == ("population", [])
    with pytest.raises(ContractViolation):
        emit_report([], tmp_path / "x.csv")
    with pytest.raises(ConfigurationError):
        emit_report([], tmp_path / "x.csv", fmt="xml", kind="population")


report_values = st.lists(st.floats(-1e9, 1e9, allow_nan=False), min_size=1, max_size=30)


@settings(max_examples=100)
@given(st.lists(report_values, min_size=1, max_size=4), st.sampled_from([0.0, 1.5, math.inf]))
def test_population_report_roundtrip(tmp_path_factory, pops, beta):
    d = tmp_path_factory.mktemp("rt")
    rows = [PopulationReport.from_values(v, "homogeneous", beta, "avg", arm=f"a{i}") for i, v in enumerate(pops)]
    for fmt in ("csv", "json"):
        kind, back = load_report(emit_report(rows, d / f"r.{fmt}", fmt=fmt))
        assert kind == "population" and back == rows
    _, from_json = load_report(d / "r.json")
    assert [r.values for r in from_json] == [r.values for r in rows]


def test_stability_and_curve_roundtrip(tmp_path):
    rep = StabilityReport.from_grid([[-4, -6], [-1, -2]], "heterogeneous", math.inf, "closest", spec_ids=["a", "b"])
    emit_report([rep], tmp_path / "s.json", fmt="json", meta={"env": "microgrid"})
    kind, rows, meta = load_report_with_meta(tmp_path / "s.json")
    assert kind == "stability" and rows == [rep] and meta == {"env": "microgrid"}
    assert rows[0].grid == rep.grid and rows[0].spec_ids == ("a", "b")
    _, csv_rows = load_report(emit_report([rep], tmp_path / "s.csv"))
    assert csv_rows == [rep]
    curves = [(1, "member-0", -3.5), (1, "ensemble", -2.0)]
    assert load_report(emit_report(curves, tmp_path / "c.csv"))[1] == curves


def test_ranking_table():
    a = PopulationReport.from_values(range(10), "homo", 0, "avg", arm="a")
    b = PopulationReport.from_values(range(5, 15), "homo", 0, "avg", arm="b")
    c = PopulationReport.from_values([100], "homo", 0, "avg", arm="c")
    assert [r.arm for r in analysis.ranking_table([a, c, b])] == ["b", "a", "c"]


SMALL = TrainingConfig(replay_capacity=500, learning_starts=16)


def _config():
    return RunConfig(episodes=2, train_horizon=24, validation_horizon=24, test_horizon=24, training=SMALL)


def test_stability_protocol_end_to_end(tmp_path):
    specs = build_ensemble_specs("dqn", "homo", 2, 3, 0.0, "avg", master_seed=21)
    manifests = pipeline.run_population(specs, _config(), tmp_path / "pop")
    rep = analysis.stability_protocol(2, 2, manifests, _config(), tmp_path / "stab")
    assert (rep.k, rep.m) == (2, 2)
    ranked = sorted(manifests, key=lambda m: (-m.validation_R, m.spec.spec_id))
    assert list(rep.spec_ids) == [m.spec.spec_id for m in ranked[:2]]
    assert all(m.test is None for m in manifests)
    same = analysis.stability_protocol(1, 2, manifests, _config(), tmp_path / "same", identical_seeds=True)
    assert same.mean_of_stds == 0
    with pytest.raises(ConfigurationError):
        analysis.stability_protocol(1, 1, manifests, _config(), tmp_path / "x")
    with pytest.raises(InsufficientDataError):
        analysis.stability_protocol(5, 2, manifests, _config(), tmp_path / "x")


def test_population_scores_do_not_mark_manifests(tmp_path):
    specs = build_ensemble_specs("dqn", "homo", 1, 2, 0.0, "avg", master_seed=4)
    manifests = pipeline.run_population(specs, _config(), tmp_path)
    assert analysis.population_scores(manifests, "validation") == [m.validation_R for m in manifests]
    test_scores = analysis.population_scores(manifests, "test")
    assert len(test_scores) == 2 and all(m.test is None for m in manifests)
    _, _, reloaded = pipeline.load_population(tmp_path)
    assert all(m.test is None for m in reloaded)


def test_learning_curves_shape():
    spec = build_ensemble_specs("dqn", "homo", 2, 1, 0.0, "avg", master_seed=8)[0]
    rows = analysis.learning_curves(spec, _config())
    assert [(e, a) for e, a, _ in rows] == [(e, a) for e in (1, 2) for a in ("member-0", "member-1", "ensemble")]
    assert all(math.isfinite(r) for _, _, r in rows)
