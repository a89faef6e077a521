import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ensemblerl.agents import HP_RANGES
from ensemblerl.errors import ConfigurationError
from ensemblerl.search import (DDPG_SPACE, DQN_SPACE, EnsembleSpec, Param, build_ensemble_specs,
                               sample_hyperparams, space_for)

DQN_FIELDS = ["width", "depth", "reward_power", "reward_scale", "nb_previous_states", "batch_size", "lr",
               "gamma", "explor_rate_start", "explor_rate_end", "dueling"]
DDPG_FIELDS = ["width", "depth", "reward_power", "reward_scale", "nb_previous_states", "batch_size",
                "actor_lr", "critic_lr", "gamma", "explor_rate_start", "explor_rate_end", "tau"]


def test_spaces_cover_all_fields():
    assert DQN_SPACE.names() == DQN_FIELDS
    assert DDPG_SPACE.names() == DDPG_FIELDS
    scales = {p.name: p.scale for p in DQN_SPACE}
    assert (scales["width"], scales["reward_scale"], scales["lr"]) == ("log2", "log10", "log3")


def test_declared_ranges():
    lo_hi = {p.name: (p.lo, p.hi) for p in DQN_SPACE if p.kind in ("int", "real")}
    assert lo_hi["width"] == (32, 1024)
    assert lo_hi["depth"] == (2, 8)
    assert lo_hi["gamma"] == (0.2, 1.0)
    assert lo_hi["reward_scale"] == (0.01, 100.0)
    assert lo_hi["lr"] == (1e-4, 0.1)


@pytest.mark.parametrize("space", [DQN_SPACE, DDPG_SPACE])
def test_thousand_draws_in_range(space):
    for seed in range(1000):
        hp = sample_hyperparams(space, seed)  # HyperParams validates every range itself
        assert 32 <= hp.width <= 1024 and 2 <= hp.depth <= 8 and 0.2 <= hp.gamma <= 1.0
        for p in space:
            assert p.contains(getattr(hp, p.name))


def test_log10_exponent_uniform():
    param = Param("reward_scale", "real", 0.01, 100.0, "log10")
    rng = np.random.default_rng(123)
    exps = np.log10([param.sample(rng) for _ in range(10_000)])
    counts, _ = np.histogram(exps, bins=20, range=(-2, 2))
    _, pvalue = stats.chisquare(counts)
    assert pvalue > 0.01


def test_log2_integer_rounding():
    param = Param("width", "int", 32, 1024, "log2")
    rng = np.random.default_rng(0)
    values = [param.sample(rng) for _ in range(5000)]
    assert min(values) >= 32 and max(values) <= 1024
    assert all(isinstance(v, int) for v in values)
    # exponent-uniform: about half the draws fall below the geometric midpoint sqrt(32*1024) = 181
    frac = np.mean(np.array(values) < 181)
    assert 0.45 < frac < 0.55


def test_sampling_deterministic():
    assert sample_hyperparams(DQN_SPACE, 5) == sample_hyperparams(DQN_SPACE, 5)
    assert sample_hyperparams(DQN_SPACE, 5) != sample_hyperparams(DQN_SPACE, 6)


def test_space_lookup():
    assert space_for("ddpg") is DDPG_SPACE
    with pytest.raises(ConfigurationError):
        space_for("a2c")


def test_population_shape_homogeneous():
    specs = build_ensemble_specs("dqn", "homo", 4, 100, 0.0, "avg", master_seed=7)
    assert len(specs) == 100
    assert all(len(s.member_hyperparams) == 1 and len(s.member_seeds) == 4 for s in specs)
    assert all(s.hyperparams(0) is s.hyperparams(3) for s in specs)
    seeds = [x for s in specs for x in s.member_seeds]
    assert len(set(seeds)) == len(seeds)
    assert len({s.spec_id for s in specs}) == 100


def test_population_shape_heterogeneous():
    specs = build_ensemble_specs("ddpg", "heterogeneous", 4, 5, "inf", "closest", master_seed=1)
    assert all(len(s.member_hyperparams) == 4 for s in specs)
    assert all(len(set(s.member_hyperparams)) == 4 for s in specs)
    assert specs[0].beta == math.inf


def test_single_member_modes_agree():
    homo = build_ensemble_specs("dqn", "homo", 1, 3, 0.0, "avg", master_seed=2)
    hetero = build_ensemble_specs("dqn", "hetero", 1, 3, 0.0, "avg", master_seed=2)
    for a, b in zip(homo, hetero):
        assert a.member_hyperparams == b.member_hyperparams
        assert a.member_seeds == b.member_seeds


def test_population_reproducible():
    a = build_ensemble_specs("dqn", "hetero", 3, 10, 1.0, "wavg", master_seed=99)
    b = build_ensemble_specs("dqn", "hetero", 3, 10, 1.0, "wavg", master_seed=99)
    assert a == b


@pytest.mark.parametrize("kw", [{"size": 0}, {"count": 0}, {"rule": "vote"}, {"beta": -1}, {"mode": "mixed"}])
def test_build_validation(kw):
    args = dict(algo="dqn", mode="homo", size=2, count=2, beta=0.0, rule="avg", master_seed=0)
    args.update(kw)
    with pytest.raises(ConfigurationError):
        build_ensemble_specs(**args)


def test_spec_validation_and_roundtrip():
    spec = build_ensemble_specs("dqn", "homo", 2, 1, 2.5, "wavg", master_seed=0)[0]
    assert EnsembleSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigurationError):
        spec.with_seeds([1, 1])
    moved = spec.with_seeds([5, 6], "copy")
    assert moved.spec_id == "copy" and moved.member_hyperparams == spec.member_hyperparams


@settings(max_examples=200)
@given(st.integers(0, 2**64 - 1))
def test_fuzz_ranges(seed):
    for space in (DQN_SPACE, DDPG_SPACE):
        hp = sample_hyperparams(space, seed)
        for name, (lo, hi) in HP_RANGES.items():
            value = getattr(hp, name)
            if value is not None:
                assert lo <= value <= hi
