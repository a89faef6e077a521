"""Oracle environments and reference implementations used only by the tests.

Nothing here imports the combiner or the agents' internals: the oracles are
independent code paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from ensemblerl.envs import ActionSpace, Env, StepOutcome
from ensemblerl.errors import ConfigurationError

LEFT, RIGHT = 0, 1


@dataclass(frozen=True)
class ChainMdp:
    """States 0..n-1, start at 0, the right end is terminal.

    Moving right from state n-2 enters the terminal state with reward 1;
    every other move pays 0. Moving left from 0 stays at 0. With the goal
    at distance ``d = n-1-s`` the optimal value is ``Q*(s, right) = gamma**(d-1)``.
    A non-episodic variant teleports back to 0 instead of terminating.
    """

    n_states: int = 5
    terminal_reward: float = 1.0
    episodic: bool = True

    @property
    def goal(self) -> int:
        return self.n_states - 1

    def transition(self, s: int, a: int) -> tuple[int, float, bool]:
        nxt = min(s + 1, self.goal) if a == RIGHT else max(s - 1, 0)
        if nxt == self.goal:
            return (nxt if self.episodic else 0), self.terminal_reward, self.episodic
        return nxt, 0.0, False


def value_iteration(mdp: ChainMdp, gamma: float, tolerance: float = 1e-10,
                    max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q table of shape (n_states, 2); the terminal row stays 0."""
    if gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    if gamma >= 1 and not mdp.episodic:
        raise ConfigurationError("gamma >= 1 diverges on a non-episodic chain")
    q = np.zeros((mdp.n_states, 2))
    live = range(mdp.goal) if mdp.episodic else range(mdp.n_states)
    for _ in range(max_iter):
        new = np.zeros_like(q)
        for s in live:
            for a in (LEFT, RIGHT):
                nxt, r, done = mdp.transition(s, a)
                new[s, a] = r + (0.0 if done else gamma * q[nxt].max())
        delta = np.abs(new - q).max()
        q = new
        if delta < tolerance:
            return q
    raise RuntimeError("value iteration did not converge")


def _config(seed: int, horizon: int, phase: str = "train"):
    return SimpleNamespace(seed=seed, horizon=horizon, phase=phase)


class ChainEnv(Env):
    """The chain as an environment with one-hot observations."""

    env_id = "chain"

    def __init__(self, mdp: ChainMdp = ChainMdp(), horizon: int = 20, seed: int = 0, phase: str = "train"):
        super().__init__(_config(seed, horizon, phase))
        self.mdp = mdp
        self.observation_dim = mdp.n_states
        self.action_space = ActionSpace.discrete(2)
        self.s = 0

    def _obs(self) -> np.ndarray:
        o = np.zeros(self.mdp.n_states)
        o[self.s] = 1.0
        return o

    def reset(self, seed=None) -> np.ndarray:
        self._rng_for(seed)
        self.s, self.t, self._done = 0, 0, False
        return self._obs()

    def step(self, action) -> StepOutcome:
        action = self._begin_step(action)
        self.s, r, terminal = self.mdp.transition(self.s, action)
        self.t += 1
        truncated = not terminal and self.t >= self.horizon
        self._done = terminal or truncated
        return StepOutcome(self._obs(), r, terminal, truncated, {})


class LinePlantEnv(Env):
    """1-D plant: the action sets the next position directly, reward ``1 - x**2``.

    The optimum is to always act 0 for a per-step reward of 1.
    """

    env_id = "line_plant"
    observation_dim = 1

    def __init__(self, horizon: int = 20, seed: int = 0, phase: str = "train"):
        super().__init__(_config(seed, horizon, phase))
        self.action_space = ActionSpace.box([-1.0], [1.0])
        self.x = 0.0

    def reset(self, seed=None) -> np.ndarray:
        rng = self._rng_for(seed)
        self.x = float(rng.uniform(-1.0, 1.0))
        self.t, self._done = 0, False
        return np.array([self.x])

    def step(self, action) -> StepOutcome:
        action = self._begin_step(action)
        self.x = float(np.clip(action[0], -1.0, 1.0))
        self.t += 1
        self._done = self.t >= self.horizon
        return StepOutcome(np.array([self.x]), 1.0 - self.x**2, False, self._done, {})


class ConstantRewardEnv(Env):
    """Emits the same raw reward every step; one-dimensional zero observation."""

    env_id = "constant"
    observation_dim = 1

    def __init__(self, reward: float = -1.0, horizon: int = 100, n_actions: int = 2, seed: int = 0,
                 phase: str = "train"):
        super().__init__(_config(seed, horizon, phase))
        self.reward = reward
        self.action_space = ActionSpace.discrete(n_actions)

    def reset(self, seed=None) -> np.ndarray:
        self._rng_for(seed)
        self.t, self._done = 0, False
        return np.zeros(1)

    def step(self, action) -> StepOutcome:
        self._begin_step(action)
        self.t += 1
        self._done = self.t >= self.horizon
        return StepOutcome(np.zeros(1), self.reward, False, self._done, {})


def brute_force_combine(predictions, weights, rule: str):
    """Reference combiner by direct enumeration (J <= 8).

    Discrete predictions are ints, continuous ones are sequences of floats.
    Sums accumulate left to right in member order.
    """
    preds = list(predictions)
    w = [float(x) for x in weights]
    n = len(preds)
    if rule == "avg":
        w = [1.0 / n] * n
    elif rule == "best":
        best = 0
        for j in range(1, n):
            if w[j] > w[best]:
                best = j
        w = [1.0 if j == best else 0.0 for j in range(n)]

    if isinstance(preds[0], (int, np.integer)):
        best_action, best_total = None, None
        for cand in sorted({int(p) for p in preds}):
            total = 0.0
            for p, wj in zip(preds, w):
                if int(p) == cand:
                    total += wj
            if best_total is None or total > best_total:
                best_action, best_total = cand, total
        return best_action

    vecs = [[float(v) for v in np.atleast_1d(p)] for p in preds]
    dim = len(vecs[0])
    avg = []
    for d in range(dim):
        acc = 0.0
        for j in range(n):
            acc = acc + w[j] * vecs[j][d]
        avg.append(acc)
    if rule != "closest":
        return np.array(avg)
    best_j, best_d2 = 0, None
    for j in range(n):
        d2 = 0.0
        for d in range(dim):
            d2 += (vecs[j][d] - avg[d]) ** 2
        if best_d2 is None or d2 < best_d2:
            best_j, best_d2 = j, d2
    return np.array(vecs[best_j])
