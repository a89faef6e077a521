import json

import numpy as np
import pytest

from ensemblerl import pipeline
from ensemblerl.agents import EvalResult, TrainingConfig, agent_for_env, run_training
from ensemblerl.envs import track_phase_access
from ensemblerl.errors import (CheckpointIntegrityError, CheckpointVersionError, ConfigurationError,
                               ContractViolation, ParseError, RunError)
from ensemblerl.pipeline import RunConfig, RunManifest
from ensemblerl.search import build_ensemble_specs

SMALL = TrainingConfig(replay_capacity=500, learning_starts=16)


def _config(**kw):
    base = dict(episodes=2, train_horizon=24, validation_horizon=24, test_horizon=24, training=SMALL)
    base.update(kw)
    return RunConfig(**base)


def _specs(count=3, size=2, algo="dqn", rule="avg", beta=0.0, seed=11, mode="homo"):
    return build_ensemble_specs(algo, mode, size, count, beta, rule, master_seed=seed)


def _fake(spec_id, R):
    spec = _specs(1, 1)[0]
    spec = spec.with_seeds(spec.member_seeds, spec_id)
    val = EvalResult("validation", R, [R], [0], 1, "microgrid")
    return RunManifest(spec, {}, [], status="ok", validation=val)


def test_run_config_validation_and_roundtrip():
    cfg = _config(phase_split={"train": (0, 10), "validation": (10, 20), "test": (20, 30)})
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(ConfigurationError):
        RunConfig(episodes=-1)
    with pytest.raises(ConfigurationError):
        RunConfig(eval_repeats=0)
    assert len({cfg.phase_seed(p) for p in ("train", "validation", "test")}) == 3


def test_population_run_writes_manifests(tmp_path):
    specs = _specs()
    manifests = pipeline.run_population(specs, _config(), tmp_path)
    assert [m.spec.spec_id for m in manifests] == [s.spec_id for s in specs]
    for m in manifests:
        assert m.ok and m.test is None
        assert abs(sum(m.weights.weights) - 1) < 1e-12
        assert all((m.directory / r.checkpoint).exists() for r in m.members)
    loaded_specs, cfg, loaded = pipeline.load_population(tmp_path)
    assert loaded_specs == specs and cfg.to_dict() == _config().to_dict()
    assert [m.comparable() for m in loaded] == [m.comparable() for m in manifests]


def test_worker_count_does_not_change_results(tmp_path):
    specs = _specs(count=4)
    one = pipeline.run_population(specs, _config(), tmp_path / "w1", workers=1)
    two = pipeline.run_population(specs, _config(), tmp_path / "w2", workers=2)
    assert [m.comparable() for m in one] == [m.comparable() for m in two]
    for a, b in zip(one, two):
        for r in a.members:
            assert (a.directory / r.checkpoint).read_bytes() == (b.directory / r.checkpoint).read_bytes()


def test_resume_skips_finished_specs(tmp_path, monkeypatch):
    specs = _specs(count=2)
    first = pipeline.run_population(specs, _config(), tmp_path)
    calls = []
    original = pipeline._train_member
    monkeypatch.setattr(pipeline, "_train_member", lambda job: calls.append(job) or original(job))
    again = pipeline.run_population(specs, _config(), tmp_path)
    assert calls == []
    assert [m.comparable() for m in again] == [m.comparable() for m in first]
    # a changed config is not a resume hit
    pipeline.run_population(specs, _config(episodes=1), tmp_path)
    assert len(calls) == sum(s.size for s in specs)


def test_single_member_best_matches_member(tmp_path):
    specs = _specs(count=2, size=1, rule="best")
    for m in pipeline.run_population(specs, _config(), tmp_path):
        assert m.weights.weights == (1.0,)
        assert m.validation.R == m.members[0].validation.R


def test_identical_members_match_member_score(tmp_path):
    spec = _specs(count=1, size=1)[0]
    cfg = _config()
    m = pipeline.run_population([spec], cfg, tmp_path)[0]
    # retrain the member by hand: same seeds, same score
    hp = spec.hyperparams(0)
    agent = agent_for_env(hp, cfg.env_config("train"), spec.member_seeds[0], cfg.training)
    agent, returns = run_training(agent, cfg.env_config("train"), cfg.episodes, spec.member_seeds[0])
    assert returns == m.members[0].train_returns


def test_select_prefers_highest_then_lowest_id():
    ms = [_fake("e-002", 5.0), _fake("e-001", 5.0), _fake("e-003", 7.0)]
    assert pipeline.select(ms).spec.spec_id == "e-003"
    assert pipeline.select(ms[:2]).spec.spec_id == "e-001"
    failed = _fake("e-000", 99.0)
    failed.status = "failed"
    assert pipeline.select([failed, ms[0]]).spec.spec_id == "e-002"
    with pytest.raises(ContractViolation):
        pipeline.select([failed])
    with pytest.raises(ContractViolation):
        pipeline.select_and_test([])


def test_select_and_test_touches_only_chosen(tmp_path):
    specs = _specs(count=3)
    with track_phase_access() as log:
        manifests = pipeline.run_population(specs, _config(), tmp_path)
        assert all(phase != "test" for _, phase, _ in log)
        chosen = pipeline.select_and_test(manifests)
    assert sum(1 for _, phase, _ in log if phase == "test") >= 1
    assert chosen.test is not None and chosen.test.phase == "test"
    _, _, reloaded = pipeline.load_population(tmp_path)
    assert sum(m.test is not None for m in reloaded) == 1
    summary = json.loads((tmp_path / "selected.json").read_text())
    assert summary["spec_id"] == chosen.spec.spec_id
    best = max(m.validation_R for m in manifests)
    assert chosen.validation_R == best


def test_failed_spec_is_isolated(tmp_path):
    good = _specs(count=2)
    bad = _specs(count=1, algo="ddpg", seed=5)[0].with_seeds([901, 902], "bad-ddpg")
    manifests = pipeline.run_population(good + [bad], _config(), tmp_path)
    assert [m.status for m in manifests] == ["ok", "ok", "failed"]
    assert "cannot drive" in manifests[2].members[0].error
    with pytest.raises(RunError):
        pipeline.run_population([bad], _config(), tmp_path / "all-bad")


def test_workers_validated(tmp_path):
    with pytest.raises(ConfigurationError):
        pipeline.run_population(_specs(1), _config(), tmp_path, workers=0)


def _greedy_actions(agent, states):
    policy = agent.policy()
    policy.reset()
    return [np.asarray(policy.act(s)).tolist() for s in states]


@pytest.mark.parametrize("algo,mode", [("dqn", "discrete"), ("ddpg", "continuous")])
def test_checkpoint_roundtrip(algo, mode):
    spec = _specs(1, 1, algo=algo)[0]
    cfg = _config(action_mode=mode, episodes=1)
    agent = agent_for_env(spec.hyperparams(0), cfg.env_config("train"), spec.member_seeds[0], cfg.training)
    agent, _ = run_training(agent, cfg.env_config("train"), 1, spec.member_seeds[0])
    doc = pipeline.save_checkpoint(agent)
    restored = pipeline.load_checkpoint(doc)
    assert pipeline.save_checkpoint(restored) == doc
    light = pipeline.load_checkpoint(pipeline.save_checkpoint(agent, full=False))
    states = np.random.default_rng(0).normal(size=(100, agent.obs_dim))
    assert _greedy_actions(agent, states) == _greedy_actions(restored, states) == _greedy_actions(light, states)


def test_checkpoint_corruption_detected():
    spec = _specs(1, 1)[0]
    cfg = _config()
    agent = agent_for_env(spec.hyperparams(0), cfg.env_config("train"), 1, cfg.training)
    doc = pipeline.save_checkpoint(agent)
    with pytest.raises(CheckpointIntegrityError):
        pipeline.load_checkpoint(doc[: len(doc) // 2])
    with pytest.raises(CheckpointIntegrityError):
        pipeline.load_checkpoint("garbage")
    lines = doc.split("\n")
    flipped = lines[2][:10] + ("A" if lines[2][10] != "A" else "B") + lines[2][11:]
    with pytest.raises(CheckpointIntegrityError):
        pipeline.load_checkpoint("\n".join([lines[0], lines[1], flipped, lines[3], ""]))
    header = json.loads(lines[1])
    header["format_version"] += 1
    bumped = "\n".join([lines[0], json.dumps(header), *lines[2:]])
    with pytest.raises(CheckpointVersionError):
        pipeline.load_checkpoint(bumped)


def test_infer_bench(tmp_path):
    m = pipeline.run_population(_specs(1, size=3), _config(), tmp_path)[0]
    empty = pipeline.infer_bench(m, 0)
    assert empty.n == 0 and empty.mean is None and empty.actions == []
    a = pipeline.infer_bench(m, 200, seed=4)
    b = pipeline.infer_bench(m, 200, seed=4)
    c = pipeline.infer_bench(m, 200, parallel_members=True, seed=4)
    assert a.actions == b.actions == c.actions
    assert a.members == 3 and 0 < a.min <= a.p50 <= a.p99 <= a.max
    assert set(a.to_dict()) == {"n", "members", "parallel_members", "min", "mean", "p50", "p99", "max"}


def test_spec_file_roundtrip(tmp_path):
    specs = _specs(2)
    path = tmp_path / "specs.json"
    pipeline.write_specs(path, specs, "microgrid", "discrete", {"count": 2})
    again, doc = pipeline.read_specs(path)
    assert again == specs and doc["sample_config"] == {"count": 2}
    with pytest.raises(ParseError):
        pipeline.read_specs(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ParseError):
        pipeline.read_specs(tmp_path / "bad.json")
