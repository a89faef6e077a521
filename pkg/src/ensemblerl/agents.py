"""Off-policy base agents: DQN (optionally dueling) and DDPG.

Each agent owns its networks, optimizers, replay buffer and random
generators; nothing is shared between agents. Training sees the processed
reward ``sign(r) * s * |r|**p``; evaluation only ever sums raw rewards.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import neural
from .envs import ActionSpace, Env, EnvConfig, make_env
from .errors import ConfigurationError, NumericError
from .seeding import derive_seed

# Table-I ranges; (lo, hi) inclusive
HP_RANGES = {
    "width": (32, 1024),
    "depth": (2, 8),
    "reward_power": (0.5, 2.0),
    "reward_scale": (0.01, 100.0),
    "batch_size": (16, 256),
    "lr": (1e-4, 0.1),
    "actor_lr": (1e-4, 0.1),
    "critic_lr": (1e-4, 0.1),
    "gamma": (0.2, 1.0),
    "explor_rate_start": (0.06, 1.0),
    "explor_rate_end": (0.0, 0.05),
    "tau": (3e-4, 1e-2),
}
WINDOW_SIZES = (1, 2, 4)


@dataclass(frozen=True)
class HyperParams:
    algo: str
    width: int
    depth: int
    reward_power: float
    reward_scale: float
    nb_previous_states: int
    batch_size: int
    gamma: float
    explor_rate_start: float
    explor_rate_end: float
    lr: float | None = None
    dueling: bool = False
    actor_lr: float | None = None
    critic_lr: float | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.algo == "dqn":
            needed = ("lr",)
        elif self.algo == "ddpg":
            needed = ("actor_lr", "critic_lr", "tau")
            if self.dueling:
                raise ConfigurationError("dueling heads are a DQN option")
        else:
            raise ConfigurationError(f"unknown algo {self.algo!r}")
        for name in needed:
            if getattr(self, name) is None:
                raise ConfigurationError(f"{self.algo} hyperparameters need {name}")
        for name, (lo, hi) in HP_RANGES.items():
            value = getattr(self, name)
            if value is None:
                continue
            if not lo <= value <= hi:
                raise ConfigurationError(f"{name}={value} outside [{lo}, {hi}]")
        if self.nb_previous_states not in WINDOW_SIZES:
            raise ConfigurationError(f"nb_previous_states must be one of {WINDOW_SIZES}")
        if self.explor_rate_end > self.explor_rate_start:
            raise ConfigurationError("explor_rate_end must not exceed explor_rate_start")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: Mapping) -> "HyperParams":
        return cls(**dict(d))


@dataclass(frozen=True)
class TrainingConfig:
    """Settings outside the sampled hyperparameter space."""

    replay_capacity: int = 50_000
    learning_starts: int = 1_000
    target_update_interval: int = 200  # DQN hard copy, in gradient steps
    optimizer: str = "adam"
    clip_norm: float = neural.CLIP_NORM

    def to_dict(self) -> dict:
        return asdict(self)


def transform_reward(r: float, s: float, p: float) -> float:
    """``sign(r) * s * |r|**p``; zero stays zero."""
    if r == 0:
        return 0.0
    return math.copysign(s * abs(r) ** p, r)


@dataclass(frozen=True)
class ExplorationSchedule:
    start: float
    end: float
    total_training_steps: int

    def rate(self, t: int) -> float:
        frac = min(1.0, t / self.total_training_steps) if self.total_training_steps > 0 else 1.0
        return self.start + (self.end - self.start) * frac


class StateWindow:
    """Stacks the last ``k`` observations, oldest first, zero-padded at episode start."""

    def __init__(self, obs_dim: int, k: int):
        self.obs_dim, self.k = obs_dim, k
        self._frames: deque = deque(maxlen=k)

    def reset(self, obs) -> np.ndarray:
        self._frames.clear()
        for _ in range(self.k - 1):
            self._frames.append(np.zeros(self.obs_dim))
        self._frames.append(np.asarray(obs, dtype=float))
        return self.state

    def push(self, obs) -> np.ndarray:
        self._frames.append(np.asarray(obs, dtype=float))
        return self.state

    @property
    def state(self) -> np.ndarray:
        return np.concatenate(self._frames)


@dataclass
class Transition:
    state: np.ndarray
    action: object
    reward: float  # processed reward
    next_state: np.ndarray
    terminal: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            np.array([t.state for t in transitions], dtype=float),
            np.array([t.action for t in transitions]),
            np.array([t.reward for t in transitions], dtype=float),
            np.array([t.next_state for t in transitions], dtype=float),
            np.array([t.terminal for t in transitions], dtype=float),
        )


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, state_dim: int, action_shape: tuple, action_dtype, seed: int):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity,) + action_shape, dtype=action_dtype)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity)
        self.size = 0
        self.cursor = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        i = self.cursor
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.terminals[i] = float(t.terminal)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        idx = self.rng.integers(0, self.size, batch_size)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminals[idx])

    def contents(self) -> tuple[np.ndarray, ...]:
        n = self.size
        return (self.states[:n], self.actions[:n], self.rewards[:n], self.next_states[:n], self.terminals[:n])


class Agent:
    algo: str

    def __init__(self, hp: HyperParams, obs_dim: int, action_space: ActionSpace, seed: int,
                 config: TrainingConfig | None = None):
        self.hp = hp
        self.obs_dim = int(obs_dim)
        self.action_space = action_space
        self.seed = int(seed)
        self.config = config or TrainingConfig()
        self.state_dim = self.obs_dim * hp.nb_previous_states
        self.rng = np.random.default_rng(derive_seed(self.seed, 1))
        self.buffer = self._new_buffer(derive_seed(self.seed, 2))
        self.train_steps = 0
        self.skipped_updates = 0
        self.rejected_updates = 0

    def _new_buffer(self, seed: int) -> ReplayBuffer:
        if self.action_space.is_discrete:
            return ReplayBuffer(self.config.replay_capacity, self.state_dim, (), np.int64, seed)
        return ReplayBuffer(self.config.replay_capacity, self.state_dim, (self.action_space.dim,), float, seed)

    def reseed(self, seed: int) -> None:
        """Re-key exploration and replay sampling (fresh, empty buffer)."""
        self.rng = np.random.default_rng(derive_seed(seed, 1))
        self.buffer = self._new_buffer(derive_seed(seed, 2))

    def remember(self, t: Transition) -> None:
        self.buffer.add(t)

    @property
    def ready(self) -> bool:
        return len(self.buffer) >= max(self.config.learning_starts, self.hp.batch_size)

    def learn(self):
        """One gradient step on a replay sample, or None if the buffer is too small."""
        if not self.ready:
            self.skipped_updates += 1
            return None
        return self.train_step(self.buffer.sample(self.hp.batch_size))

    def _update(self, params, grads, opt):
        try:
            return neural.apply_update(params, grads, opt, self.config.clip_norm)
        except NumericError:
            self.rejected_updates += 1
            return params, opt

    def policy(self) -> "GreedyPolicy":
        return GreedyPolicy(self)

    # subclass API
    def greedy(self, state: np.ndarray):
        raise NotImplementedError

    def act(self, state: np.ndarray, rate: float):
        raise NotImplementedError

    def train_step(self, batch: Batch):
        raise NotImplementedError

    def networks(self) -> dict[str, neural.ParamSet]:
        raise NotImplementedError

    def optimizers(self) -> dict[str, neural.OptimizerState]:
        raise NotImplementedError

    def set_networks(self, nets: Mapping[str, neural.ParamSet]) -> None:
        for name, params in nets.items():
            setattr(self, name, params)

    def set_optimizers(self, opts: Mapping[str, neural.OptimizerState]) -> None:
        for name, opt in opts.items():
            setattr(self, name, opt)


class DQNAgent(Agent):
    """Q-learning over an MLP; dueling heads output ``[V, A_1..A_n]``.

    The target network is a hard copy refreshed every
    ``TrainingConfig.target_update_interval`` gradient steps.
    """

    algo = "dqn"

    def __init__(self, hp, obs_dim, action_space, seed, config=None):
        if hp.algo != "dqn" or not action_space.is_discrete:
            raise ConfigurationError("DQN needs dqn hyperparameters and a discrete action space")
        super().__init__(hp, obs_dim, action_space, seed, config)
        n = action_space.n
        self.spec = neural.MlpSpec(self.state_dim, hp.width, hp.depth, n + 1 if hp.dueling else n,
                                   "relu", "identity", derive_seed(self.seed, 10))
        self.q_net = neural.init(self.spec)
        self.q_target = self.q_net.copy()
        self.q_opt = neural.make_optimizer(self.config.optimizer, hp.lr, self.q_net)

    def q_values(self, params: neural.ParamSet, states) -> np.ndarray:
        return self._aggregate(neural.forward(params, states))

    def _aggregate(self, out: np.ndarray) -> np.ndarray:
        if not self.hp.dueling:
            return out
        value, adv = out[:, :1], out[:, 1:]
        return value + adv - adv.mean(axis=1, keepdims=True)

    def _aggregate_grad(self, dq: np.ndarray) -> np.ndarray:
        if not self.hp.dueling:
            return dq
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        return np.hstack([dv, da])

    def greedy(self, state) -> int:
        q = self.q_values(self.q_net, state)[0]
        return int(np.argmax(q))  # first maximum, i.e. lowest index on ties

    def act(self, state, rate: float) -> int:
        if self.rng.random() < rate:
            return int(self.rng.integers(self.action_space.n))
        return self.greedy(state)

    def td_targets(self, batch: Batch) -> np.ndarray:
        q_next = self.q_values(self.q_target, batch.next_states)
        return batch.rewards + self.hp.gamma * (1.0 - batch.terminals) * q_next.max(axis=1)

    def train_step(self, batch: Batch) -> float:
        y = self.td_targets(batch)
        out, trace = neural.forward_trace(self.q_net, batch.states)
        q = self._aggregate(out)
        rows = np.arange(len(batch))
        actions = batch.actions.astype(int)
        td = q[rows, actions] - y
        dq = np.zeros_like(q)
        dq[rows, actions] = 2.0 * td / len(batch)
        grads = neural.backward(self.q_net, batch.states, self._aggregate_grad(dq), trace)
        self.q_net, self.q_opt = self._update(self.q_net, grads, self.q_opt)
        self.train_steps += 1
        if self.train_steps % self.config.target_update_interval == 0:
            self.q_target = self.q_net.copy()
        return float(np.mean(td * td))

    def networks(self):
        return {"q_net": self.q_net, "q_target": self.q_target}

    def optimizers(self):
        return {"q_opt": self.q_opt}


class DDPGAgent(Agent):
    """Deterministic actor with tanh output scaled to the action box.

    The critic sees the action in normalized form ``(a - mid) / half_width``.
    Exploration adds Gaussian noise of std ``rate * half_width`` and clamps.
    """

    algo = "ddpg"

    def __init__(self, hp, obs_dim, action_space, seed, config=None):
        if hp.algo != "ddpg" or action_space.is_discrete:
            raise ConfigurationError("DDPG needs ddpg hyperparameters and a continuous action space")
        super().__init__(hp, obs_dim, action_space, seed, config)
        d = action_space.dim
        self.mid, self.half = action_space.midpoint, action_space.half_width
        self.low, self.high = action_space.low_array, action_space.high_array
        self.actor_spec = neural.MlpSpec(self.state_dim, hp.width, hp.depth, d, "relu", "tanh",
                                         derive_seed(self.seed, 20))
        self.critic_spec = neural.MlpSpec(self.state_dim + d, hp.width, hp.depth, 1, "relu", "identity",
                                          derive_seed(self.seed, 21))
        self.actor = neural.init(self.actor_spec)
        self.critic = neural.init(self.critic_spec)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = neural.make_optimizer(self.config.optimizer, hp.actor_lr, self.actor)
        self.critic_opt = neural.make_optimizer(self.config.optimizer, hp.critic_lr, self.critic)

    def greedy(self, state) -> np.ndarray:
        u = neural.forward(self.actor, state)[0]
        return np.clip(self.mid + self.half * u, self.low, self.high)

    def act(self, state, rate: float) -> np.ndarray:
        a = self.mid + self.half * neural.forward(self.actor, state)[0]
        if rate > 0:
            a = a + self.rng.normal(0.0, 1.0, a.shape) * (rate * self.half)
        return np.clip(a, self.low, self.high)

    def _critic_input(self, states, normalized_actions) -> np.ndarray:
        return np.hstack([states, normalized_actions])

    def td_targets(self, batch: Batch) -> np.ndarray:
        u_next = neural.forward(self.actor_target, batch.next_states)
        q_next = neural.forward(self.critic_target, self._critic_input(batch.next_states, u_next))[:, 0]
        return batch.rewards + self.hp.gamma * (1.0 - batch.terminals) * q_next

    def train_step(self, batch: Batch) -> tuple[float, float]:
        n = len(batch)
        y = self.td_targets(batch)
        u_batch = (batch.actions.reshape(n, -1) - self.mid) / self.half
        x_c = self._critic_input(batch.states, u_batch)
        q, trace = neural.forward_trace(self.critic, x_c)
        td = q[:, 0] - y
        grads = neural.backward(self.critic, x_c, (2.0 * td / n)[:, None], trace)
        self.critic, self.critic_opt = self._update(self.critic, grads, self.critic_opt)

        u, trace_a = neural.forward_trace(self.actor, batch.states)
        x_a = self._critic_input(batch.states, u)
        q_pi, trace_c = neural.forward_trace(self.critic, x_a)
        dq_dx = neural.backward(self.critic, x_a, np.full((n, 1), 1.0 / n), trace_c).inputs
        dq_du = dq_dx[:, self.state_dim:]
        grads_a = neural.backward(self.actor, batch.states, -dq_du, trace_a)
        self.actor, self.actor_opt = self._update(self.actor, grads_a, self.actor_opt)

        self.actor_target = neural.soft_update(self.actor_target, self.actor, self.hp.tau)
        self.critic_target = neural.soft_update(self.critic_target, self.critic, self.hp.tau)
        self.train_steps += 1
        return float(np.mean(td * td)), float(np.mean(q_pi))

    def networks(self):
        return {"actor": self.actor, "critic": self.critic,
                "actor_target": self.actor_target, "critic_target": self.critic_target}

    def optimizers(self):
        return {"actor_opt": self.actor_opt, "critic_opt": self.critic_opt}


AGENT_CLASSES = {"dqn": DQNAgent, "ddpg": DDPGAgent}


def make_agent(hp: HyperParams, obs_dim: int, action_space: ActionSpace, seed: int,
               config: TrainingConfig | None = None) -> Agent:
    return AGENT_CLASSES[hp.algo](hp, obs_dim, action_space, seed, config)


def agent_for_env(hp: HyperParams, env_config: EnvConfig, seed: int,
                  config: TrainingConfig | None = None) -> Agent:
    env = make_env(env_config)
    _check_compatible(hp.algo, env)
    return make_agent(hp, env.observation_dim, env.action_space, seed, config)


def _check_compatible(algo: str, env) -> None:
    discrete = env.action_space.is_discrete
    if (algo == "dqn") != discrete:
        mode = "discrete" if discrete else "continuous"
        raise ConfigurationError(f"{algo} agent cannot drive a {mode} action space")


class GreedyPolicy:
    """Exploitation-only controller that keeps its own observation window."""

    def __init__(self, agent: Agent):
        self.agent = agent
        self.window = StateWindow(agent.obs_dim, agent.hp.nb_previous_states)
        self._fresh = True

    def reset(self) -> None:
        self._fresh = True

    def observe(self, obs) -> np.ndarray:
        if self._fresh:
            self._fresh = False
            return self.window.reset(obs)
        return self.window.push(obs)

    def act(self, obs):
        return self.agent.greedy(self.observe(obs))


def _resolve_env(env) -> Env:
    return make_env(env) if isinstance(env, EnvConfig) else env


class Trainer:
    """Episode-by-episode training loop (one gradient step per env step once ready)."""

    def __init__(self, agent: Agent, env, episodes: int, seed: int):
        self.agent = agent
        self.env = _resolve_env(env)
        _check_compatible(agent.algo, self.env)
        if self.env.observation_dim != agent.obs_dim or (
                self.env.action_space != agent.action_space):
            raise ConfigurationError("agent was built for a different observation or action space")
        self.episodes = int(episodes)
        self.seed = int(seed)
        agent.reseed(derive_seed(self.seed, 3))
        self.schedule = ExplorationSchedule(agent.hp.explor_rate_start, agent.hp.explor_rate_end,
                                            max(1, self.episodes * self.env.horizon))
        self.window = StateWindow(agent.obs_dim, agent.hp.nb_previous_states)
        self.steps = 0
        self.episode = 0
        self.returns: list[float] = []

    def run_episode(self) -> float:
        agent, env, hp = self.agent, self.env, self.agent.hp
        obs = env.reset(seed=derive_seed(self.seed, 4, self.episode))
        state = self.window.reset(obs)
        total = 0.0
        while True:
            action = agent.act(state, self.schedule.rate(self.steps))
            out = env.step(action)
            total += out.raw_reward
            next_state = self.window.push(out.next_observation)
            r = transform_reward(out.raw_reward, hp.reward_scale, hp.reward_power)
            agent.remember(Transition(state, action, r, next_state, out.terminal))
            agent.learn()
            self.steps += 1
            state = next_state
            if out.done:
                break
        self.episode += 1
        self.returns.append(total)
        return total


def run_training(agent: Agent, env, episodes: int, seed: int) -> tuple[Agent, list[float]]:
    """Train ``agent`` in place for ``episodes`` episodes; returns it with raw episode returns."""
    trainer = Trainer(agent, env, episodes, seed)
    for _ in range(trainer.episodes):
        trainer.run_episode()
    return agent, trainer.returns


@dataclass
class EvalResult:
    phase: str
    R: float
    values: list[float]
    seeds: list[int]
    horizon: int
    env_id: str
    steps: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalResult":
        return cls(**dict(d))


def rollout(policy, env: Env, seed: int | None) -> tuple[float, int]:
    """Run one exploitation episode and return (sum of raw rewards, steps)."""
    obs = env.reset(seed=seed)
    policy.reset()
    total, steps = 0.0, 0
    while True:
        out = env.step(policy.act(obs))
        total += out.raw_reward
        steps += 1
        obs = out.next_observation
        if out.done:
            return total, steps


def evaluation_seeds(base_seed: int, repeats: int) -> list[int]:
    """First repeat uses ``base_seed`` itself; later ones derive from it."""
    return [int(base_seed)] + [derive_seed(base_seed, 5, k) for k in range(1, repeats)]


def evaluate(agent_or_policy, env, phase: str | None = None, repeats: int = 1,
             seeds: Sequence[int] | None = None) -> EvalResult:
    """Greedy rollout(s); ``R`` is the mean over repeats of the summed raw rewards."""
    if isinstance(env, EnvConfig) and phase is not None and env.phase != phase:
        env = env.replace(phase=phase)
    env = _resolve_env(env)
    policy = agent_or_policy.policy() if isinstance(agent_or_policy, Agent) else agent_or_policy
    if isinstance(agent_or_policy, Agent):
        _check_compatible(agent_or_policy.algo, env)
    if seeds is None:
        if repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        seeds = evaluation_seeds(env.config.seed, repeats)
    values, steps = [], []
    for s in seeds:
        total, n = rollout(policy, env, s)
        values.append(total)
        steps.append(n)
    return EvalResult(env.config.phase, float(np.mean(values)), values, [int(s) for s in seeds],
                      env.horizon, env.env_id, steps)
