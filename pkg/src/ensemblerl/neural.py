"""Feed-forward networks in plain numpy.

Layers are stored as ``(fan_in, fan_out)`` weight matrices so a batch of row
vectors goes through as ``x @ W + b``. Initialization is uniform in
``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases alike, drawn from
``numpy.random.default_rng(init_seed)`` layer by layer (weights then bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericError

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 10.0


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    width: int
    depth: int
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    init_seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "width", "depth", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"MlpSpec.{name} must be >= 1")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigurationError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.width] * self.depth + [self.output_dim]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes, sizes[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim, "width": self.width, "depth": self.depth,
            "output_dim": self.output_dim, "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation, "init_seed": int(self.init_seed),
        }


@dataclass
class ParamSet:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, spec: MlpSpec, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=float)
        if flat.size != spec.n_params:
            raise ContractViolation(f"expected {spec.n_params} values, got {flat.size}")
        sizes = spec.layer_sizes
        weights, biases, i = [], [], 0
        for a, b in zip(sizes, sizes[1:]):
            weights.append(flat[i:i + a * b].reshape(a, b).copy())
            i += a * b
            biases.append(flat[i:i + b].copy())
            i += b
        return cls(spec, weights, biases)

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.spec, [np.zeros_like(w) for w in self.weights],
                        [np.zeros_like(b) for b in self.biases])


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray | None = None  # d(loss)/d(input), used by the DDPG actor step

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps_hat: float = ADAM_EPS
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init(spec: MlpSpec) -> ParamSet:
    rng = np.random.default_rng(int(spec.init_seed))
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, fan_out))
    return ParamSet(spec, weights, biases)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _as_batch(params: ParamSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ContractViolation(f"input of shape {x.shape} does not match input_dim {params.spec.input_dim}")
    return x


def forward_trace(params: ParamSet, x) -> tuple[np.ndarray, list]:
    """Forward pass keeping pre- and post-activations for ``backward``."""
    a = _as_batch(params, x)
    trace = [(None, a)]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        kind = params.spec.output_activation if i == last else params.spec.hidden_activation
        a = _activate(z, kind)
        trace.append((z, a))
    return a, trace


def forward(params: ParamSet, x) -> np.ndarray:
    a = _as_batch(params, x)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        kind = params.spec.output_activation if i == last else params.spec.hidden_activation
        a = _activate(a @ w + b, kind)
    return a


def backward(params: ParamSet, x, loss_grad, trace: list | None = None) -> Gradients:
    """Reverse-mode gradients of ``sum(loss_grad * forward(params, x))``.

    Pass the ``trace`` from :func:`forward_trace` to skip recomputing the
    forward pass.
    """
    if trace is None:
        _, trace = forward_trace(params, x)
    g = np.asarray(loss_grad, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    out = trace[-1][1]
    if g.shape != out.shape:
        raise ContractViolation(f"loss_grad shape {g.shape} != output shape {out.shape}")
    n = len(params.weights)
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        z, a = trace[i + 1]
        kind = params.spec.output_activation if i == n - 1 else params.spec.hidden_activation
        g = g * _activation_grad(z, a, kind)
        a_prev = trace[i][1]
        dws[i] = a_prev.T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return Gradients(dws, dbs, g)


def make_optimizer(kind: str, learning_rate: float, params: ParamSet) -> OptimizerState:
    if learning_rate <= 0:
        raise ConfigurationError("learning_rate must be positive")
    if kind == "sgd":
        return OptimizerState("sgd", float(learning_rate))
    if kind == "adam":
        arrays = params.arrays()
        return OptimizerState("adam", float(learning_rate),
                              m=[np.zeros_like(a) for a in arrays],
                              v=[np.zeros_like(a) for a in arrays])
    raise ConfigurationError(f"unknown optimizer {kind!r}")


def clip_by_global_norm(arrays: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(a * a)) for a in arrays))
    if norm <= max_norm or norm == 0.0:
        return arrays
    scale = max_norm / norm
    return [a * scale for a in arrays]


def apply_update(params: ParamSet, grads, opt: OptimizerState,
                 clip_norm: float | None = CLIP_NORM) -> tuple[ParamSet, OptimizerState]:
    """One optimizer step. Returns new parameters and state; inputs are untouched.

    Raises NumericError (and changes nothing) if any gradient is non-finite.
    """
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if len(g_arrays) != len(p_arrays) or any(g.shape != p.shape for g, p in zip(g_arrays, p_arrays)):
        raise ContractViolation("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in g_arrays):
        raise NumericError("non-finite gradient; update rejected")
    if clip_norm is not None:
        g_arrays = clip_by_global_norm(g_arrays, clip_norm)

    if opt.kind == "sgd":
        new = [p - opt.learning_rate * g for p, g in zip(p_arrays, g_arrays)]
        new_opt = replace(opt, t=opt.t + 1)
    else:
        t = opt.t + 1
        b1, b2 = opt.beta1, opt.beta2
        ms = [b1 * m + (1 - b1) * g for m, g in zip(opt.m, g_arrays)]
        vs = [b2 * v + (1 - b2) * g * g for v, g in zip(opt.v, g_arrays)]
        c1, c2 = 1 - b1**t, 1 - b2**t
        new = [p - opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps_hat)
               for p, m, v in zip(p_arrays, ms, vs)]
        new_opt = replace(opt, t=t, m=ms, v=vs)
    if not all(np.all(np.isfinite(a)) for a in new):
        raise NumericError("update produced non-finite parameters; update rejected")
    return ParamSet(params.spec, new[0::2], new[1::2]), new_opt


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """``(1 - tau) * target + tau * online`` for every parameter."""
    if not 0 < tau <= 1:
        raise ConfigurationError(f"tau must lie in (0, 1], got {tau}")
    if [a.shape for a in target.arrays()] != [a.shape for a in online.arrays()]:
        raise ContractViolation("target and online shapes differ")
    if tau == 1:
        return online.copy()
    mix = [(1 - tau) * t + tau * o for t, o in zip(target.arrays(), online.arrays())]
    return ParamSet(target.spec, mix[0::2], mix[1::2])
