"""Combining base-agent predictions.

Weights follow the soft gating form ``w_j ∝ 1 / (e_j**beta + eps)`` where
``e_j`` is a positive "badness" (lower is better) computed from validation
scores. ``beta = 0`` gives plain averaging, ``beta = inf`` picks the best
agent, anything in between grades the members.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation

INFINITY = math.inf
DEFAULT_EPSILON = 1e-7
RULES = ("avg", "wavg", "best", "closest")


@dataclass(frozen=True)
class CombinerWeights:
    weights: tuple[float, ...]
    beta: float
    epsilon: float = DEFAULT_EPSILON
    source_scores: tuple[float, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "beta": format_beta(self.beta),
            "epsilon": self.epsilon,
            "source_scores": list(self.source_scores),
        }

    @classmethod
    def from_dict(cls, d) -> "CombinerWeights":
        return cls(tuple(d["weights"]), parse_beta(d["beta"]), d["epsilon"], tuple(d["source_scores"]))


def parse_beta(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "+inf", "infinity"):
            return INFINITY
        value = float(value)
    beta = float(value)
    if math.isnan(beta) or beta < 0:
        raise ConfigurationError(f"beta must be >= 0 or inf, got {value!r}")
    return beta


def format_beta(beta: float):
    return "inf" if math.isinf(beta) else float(beta)


def score_to_badness(scores: Sequence[float]) -> np.ndarray:
    """Map validation scores (higher is better) affinely onto [1, 2], best -> 1."""
    r = np.asarray(scores, dtype=float)
    if r.size == 0:
        raise ContractViolation("need at least one score")
    if not np.all(np.isfinite(r)):
        raise ContractViolation("scores must be finite")
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.ones_like(r)
    return 2.0 - (r - lo) / (hi - lo)


def _one_hot_best(badness: np.ndarray) -> np.ndarray:
    w = np.zeros(badness.size)
    w[int(np.argmin(badness))] = 1.0
    return w


def compute_weights(badness: Sequence[float], beta: float, epsilon: float = DEFAULT_EPSILON,
                    source_scores: Sequence[float] = ()) -> CombinerWeights:
    e = np.asarray(badness, dtype=float)
    beta = parse_beta(beta)
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    if e.size == 0:
        raise ContractViolation("empty ensemble")
    if beta != 0 and np.any(e <= 0):
        raise ContractViolation("badness values must be positive unless beta = 0")
    if beta == 0:
        w = np.full(e.size, 1.0 / e.size)
    elif math.isinf(beta):
        w = _one_hot_best(e)
    else:
        with np.errstate(over="ignore"):
            raw = 1.0 / (np.power(e, beta) + epsilon)
        total = raw.sum()
        # every e_j > 1 with a huge beta underflows to zero: the limit is selection
        w = raw / total if total > 0 and np.isfinite(total) else _one_hot_best(e)
    return CombinerWeights(tuple(float(x) for x in w), beta, float(epsilon),
                           tuple(float(s) for s in source_scores))


def weights_from_scores(scores: Sequence[float], beta: float, epsilon: float = DEFAULT_EPSILON) -> CombinerWeights:
    return compute_weights(score_to_badness(scores), beta, epsilon, source_scores=scores)


def _check_sizes(predictions, weights) -> np.ndarray:
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    if len(predictions) == 0:
        raise ContractViolation("empty ensemble")
    if len(predictions) != w.size:
        raise ContractViolation(f"{len(predictions)} predictions but {w.size} weights")
    return w


def combine_discrete(actions: Sequence[int], weights) -> int:
    """Weighted plurality vote; ties go to the lowest action index."""
    w = _check_sizes(actions, weights)
    votes: dict[int, float] = {}
    for a, wj in zip(actions, w):
        a = int(a)
        votes[a] = votes.get(a, 0.0) + float(wj)
    best = max(votes.values())
    return min(a for a, v in votes.items() if v == best)


def _stack(predictions) -> np.ndarray:
    if isinstance(predictions, np.ndarray) and predictions.ndim == 2:
        return predictions.astype(float, copy=False)
    p = [np.asarray(a, dtype=float).reshape(-1) for a in predictions]
    if len({a.shape for a in p}) != 1:
        raise ContractViolation("predictions must share one dimensionality")
    return np.array(p)


def _wavg(p: np.ndarray, w: np.ndarray) -> np.ndarray:
    acc = np.zeros(p.shape[1])
    for wj, a in zip(w, p):  # member order, so results do not depend on BLAS summation
        acc = acc + wj * a
    return acc


def combine_continuous_wavg(predictions, weights) -> np.ndarray:
    """``sum_j w_j a_j``, accumulated in member order."""
    w = _check_sizes(predictions, weights)
    return _wavg(_stack(predictions), w)


def combine_continuous_closest(predictions, weights) -> np.ndarray:
    """The member prediction nearest (Euclidean) to the weighted average; lowest index on ties."""
    w = _check_sizes(predictions, weights)
    p = _stack(predictions)
    d2 = np.sum((p - _wavg(p, w)) ** 2, axis=1)
    return p[int(np.argmin(d2))].copy()


def rule_weights(rule: str, weights, n: int) -> np.ndarray:
    """Weights actually used by ``rule``: avg forces uniform, best forces selection."""
    if rule not in RULES:
        raise ConfigurationError(f"unknown rule {rule!r}; expected one of {RULES}")
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    if rule == "avg":
        return np.full(n, 1.0 / n)
    if rule == "best":
        if w.size != n:
            raise ContractViolation(f"{n} predictions but {w.size} weights")
        if isinstance(weights, CombinerWeights) and weights.source_scores:
            return _one_hot_best(score_to_badness(weights.source_scores))
        return _one_hot_best(-w)
    return w


def ensemble_act(predictions, weights, rule: str, action_mode: str):
    """Combine one state's member predictions under ``rule``."""
    if action_mode not in ("discrete", "continuous"):
        raise ConfigurationError(f"unknown action mode {action_mode!r}")
    if rule == "closest" and action_mode == "discrete":
        raise ConfigurationError("the closest-member rule needs a continuous action space")
    if len(predictions) == 0:
        raise ContractViolation("empty ensemble")
    w = rule_weights(rule, weights, len(predictions))
    if action_mode == "discrete":
        return combine_discrete(predictions, w)
    if rule == "closest":
        return combine_continuous_closest(predictions, w)
    return combine_continuous_wavg(predictions, w)


class EnsemblePolicy:
    """Greedy controller that queries every member and combines their actions.

    Members are policy objects (``reset()``, ``observe(obs)``, plus an agent
    with ``greedy(state)``); each keeps its own observation window.
    """

    def __init__(self, members: Sequence, weights, rule: str, action_mode: str, executor=None):
        if len(members) == 0:
            raise ContractViolation("empty ensemble")
        if rule == "closest" and action_mode == "discrete":
            raise ConfigurationError("the closest-member rule needs a continuous action space")
        self.members = list(members)
        self.weights = weights
        self.rule = rule
        self.action_mode = action_mode
        self.executor = executor

    def reset(self) -> None:
        for m in self.members:
            m.reset()

    def predictions(self, obs) -> list:
        if self.executor is None:
            return [m.act(obs) for m in self.members]
        return list(self.executor.map(lambda m: m.act(obs), self.members))

    def act(self, obs):
        return ensemble_act(self.predictions(obs), self.weights, self.rule, self.action_mode)
