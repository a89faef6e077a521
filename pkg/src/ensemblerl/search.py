"""Random search over agent hyperparameters and ensemble population building."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .agents import HyperParams
from .ensemble import RULES, format_beta, parse_beta
from .errors import ConfigurationError
from .seeding import derive_seed

SCALE_BASES = {"log2": 2.0, "log3": 3.0, "log10": 10.0}
MODES = ("homogeneous", "heterogeneous")
MODE_ALIASES = {"homo": "homogeneous", "hetero": "heterogeneous",
                "homogeneous": "homogeneous", "heterogeneous": "heterogeneous"}


@dataclass(frozen=True)
class Param:
    name: str
    kind: str  # int | real | bool | choice
    lo: float = 0.0
    hi: float = 0.0
    scale: str = "linear"
    choices: tuple = ()

    def sample(self, rng: np.random.Generator):
        if self.kind == "bool":
            return bool(rng.integers(2))
        if self.kind == "choice":
            return self.choices[int(rng.integers(len(self.choices)))]
        if self.scale == "linear":
            if self.kind == "int":
                return int(rng.integers(int(self.lo), int(self.hi) + 1))
            return float(rng.uniform(self.lo, self.hi))
        base = SCALE_BASES[self.scale]
        exponent = rng.uniform(math.log(self.lo, base), math.log(self.hi, base))
        value = base ** exponent
        if self.kind == "int":
            return int(min(max(round(value), self.lo), self.hi))
        return float(min(max(value, self.lo), self.hi))

    def contains(self, value) -> bool:
        if self.kind == "bool":
            return isinstance(value, bool)
        if self.kind == "choice":
            return value in self.choices
        return self.lo <= value <= self.hi


_SHARED_HEAD = (
    Param("width", "int", 32, 1024, "log2"),
    Param("depth", "int", 2, 8),
    Param("reward_power", "real", 0.5, 2.0),
    Param("reward_scale", "real", 0.01, 100.0, "log10"),
    Param("nb_previous_states", "choice", choices=(1, 2, 4)),
    Param("batch_size", "int", 16, 256),
)
_EXPLORATION = (
    Param("gamma", "real", 0.2, 1.0),
    Param("explor_rate_start", "real", 0.06, 1.0),
    Param("explor_rate_end", "real", 0.0, 0.05),
)


@dataclass(frozen=True)
class ParamSpace:
    algo: str
    params: tuple[Param, ...]

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list[str]:
        return [p.name for p in self.params]


DQN_SPACE = ParamSpace("dqn", _SHARED_HEAD + (Param("lr", "real", 1e-4, 0.1, "log3"),)
                       + _EXPLORATION + (Param("dueling", "bool"),))
DDPG_SPACE = ParamSpace("ddpg", _SHARED_HEAD + (Param("actor_lr", "real", 1e-4, 0.1, "log3"),
                                                Param("critic_lr", "real", 1e-4, 0.1, "log3"))
                        + _EXPLORATION + (Param("tau", "real", 3e-4, 1e-2),))
SPACES = {"dqn": DQN_SPACE, "ddpg": DDPG_SPACE}


def space_for(algo: str) -> ParamSpace:
    try:
        return SPACES[algo]
    except KeyError:
        raise ConfigurationError(f"unknown algo {algo!r}") from None


def sample_hyperparams(space: ParamSpace, seed: int) -> HyperParams:
    """Draw every field independently, in declaration order, from one seeded generator."""
    rng = np.random.default_rng(int(seed))
    values = {p.name: p.sample(rng) for p in space}
    return HyperParams(algo=space.algo, **values)


@dataclass(frozen=True)
class EnsembleSpec:
    spec_id: str
    algo: str
    mode: str
    size: int
    member_hyperparams: tuple[HyperParams, ...]
    member_seeds: tuple[int, ...]
    beta: float
    rule: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown ensemble mode {self.mode!r}")
        if self.size < 1:
            raise ConfigurationError("ensemble size must be >= 1")
        expected = 1 if self.mode == "homogeneous" else self.size
        if len(self.member_hyperparams) != expected:
            raise ConfigurationError(f"{self.mode} spec needs {expected} hyperparameter set(s)")
        if len(self.member_seeds) != self.size or len(set(self.member_seeds)) != self.size:
            raise ConfigurationError("member seeds must be pairwise distinct, one per member")
        if self.rule not in RULES:
            raise ConfigurationError(f"unknown rule {self.rule!r}")
        parse_beta(self.beta)

    def hyperparams(self, member: int) -> HyperParams:
        if self.mode == "homogeneous":
            return self.member_hyperparams[0]
        return self.member_hyperparams[member]

    def with_seeds(self, seeds: Sequence[int], spec_id: str | None = None) -> "EnsembleSpec":
        return EnsembleSpec(spec_id or self.spec_id, self.algo, self.mode, self.size,
                            self.member_hyperparams, tuple(int(s) for s in seeds), self.beta, self.rule)

    def to_dict(self) -> dict:
        return {
            "spec_id": self.spec_id,
            "algo": self.algo,
            "mode": self.mode,
            "size": self.size,
            "member_hyperparams": [hp.to_dict() for hp in self.member_hyperparams],
            "member_seeds": [int(s) for s in self.member_seeds],
            "beta": format_beta(self.beta),
            "rule": self.rule,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnsembleSpec":
        return cls(
            spec_id=str(d["spec_id"]),
            algo=d["algo"],
            mode=d["mode"],
            size=int(d["size"]),
            member_hyperparams=tuple(HyperParams.from_dict(h) for h in d["member_hyperparams"]),
            member_seeds=tuple(int(s) for s in d["member_seeds"]),
            beta=parse_beta(d["beta"]),
            rule=d["rule"],
        )


def build_ensemble_specs(algo: str, mode: str, size: int, count: int, beta, rule: str,
                         master_seed: int, space: ParamSpace | None = None) -> list[EnsembleSpec]:
    """``count`` ensemble specs with seeds derived from ``master_seed``.

    Spec ``i``, member ``j``: hyperparameters are sampled with
    ``derive_seed(master, i, 0, j)`` (``j = 0`` only when homogeneous) and the
    member's own seed is ``derive_seed(master, i, 1, j)``.
    """
    mode = MODE_ALIASES.get(mode, mode)
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    if size < 1:
        raise ConfigurationError("size must be >= 1")
    space = space or space_for(algo)
    beta = parse_beta(beta)
    n_sets = 1 if mode == "homogeneous" else size
    specs, seen = [], set()
    for i in range(count):
        hps = tuple(sample_hyperparams(space, derive_seed(master_seed, i, 0, j)) for j in range(n_sets))
        seeds = tuple(derive_seed(master_seed, i, 1, j) for j in range(size))
        if seen.intersection(seeds):
            raise ConfigurationError("seed derivation collided; choose another master seed")
        seen.update(seeds)
        specs.append(EnsembleSpec(f"spec-{i:04d}", space.algo, mode, size, hps, seeds, beta, rule))
    return specs
