"""Built-in electricity-control simulators.

Two environments share one small interface (``reset`` / ``step``):

* ``microgrid``: hourly dispatch of a site with demand, PV, a battery, a
  diesel genset and an unreliable link to the main grid. Rewards are negative
  dollars, ``-(operating_cost + penalty_rate * unmet_kwh)``.
* ``safety_plant``: a discretized double integrator tracking a piecewise
  constant reference. Leaving the safety box ends the episode with the
  minimum reward.

Both come in a discrete and a continuous action variant. All randomness is
drawn from a generator seeded by ``derive_seed(seed, phase_code)`` so the
phases never share random streams.
"""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

import numpy as np

from .errors import ConfigurationError, ContractViolation, ParseError
from .seeding import derive_seed

ENV_IDS = ("microgrid", "safety_plant")
ACTION_MODES = ("discrete", "continuous")
PHASES = ("train", "validation", "test")
PHASE_CODES = {"train": 1, "validation": 2, "test": 3}

BUNDLED_SERIES = "microgrid_synthetic.csv"
CSV_HEADER = ["step", "demand_kw", "solar_kw"]

# half-open [start, stop) row ranges into the bundled 960-row series
DEFAULT_PHASE_SPLIT = {"train": (0, 672), "validation": (672, 816), "test": (816, 960)}


# --------------------------------------------------------------------------
# phase access log (used to audit that test data is not touched too early)

_access_listeners: list[Callable[[str, str, int], None]] = []


@contextlib.contextmanager
def track_phase_access() -> Iterator[list[tuple[str, str, int]]]:
    """Record every ``(env_id, phase, seed)`` an environment is built or reset with."""
    log: list[tuple[str, str, int]] = []
    listener = lambda env_id, phase, seed: log.append((env_id, phase, seed))  # noqa: E731
    _access_listeners.append(listener)
    try:
        yield log
    finally:
        _access_listeners.remove(listener)


def _record_access(env_id: str, phase: str, seed: int) -> None:
    for listener in _access_listeners:
        listener(env_id, phase, seed)


# --------------------------------------------------------------------------
# core types


@dataclass(frozen=True)
class ActionSpace:
    kind: str
    n: int = 0
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "discrete":
            if self.n < 2:
                raise ConfigurationError("discrete action space needs n >= 2")
        elif self.kind == "continuous":
            if len(self.low) == 0 or len(self.low) != len(self.high):
                raise ConfigurationError("continuous bounds must be non-empty and equal length")
            if any(lo >= hi for lo, hi in zip(self.low, self.high)):
                raise ConfigurationError("continuous bounds need low < high elementwise")
        else:
            raise ConfigurationError(f"unknown action space kind {self.kind!r}")

    @classmethod
    def discrete(cls, n: int) -> "ActionSpace":
        return cls("discrete", n=int(n))

    @classmethod
    def box(cls, low, high) -> "ActionSpace":
        return cls("continuous", low=tuple(float(v) for v in low), high=tuple(float(v) for v in high))

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def dim(self) -> int:
        return 1 if self.is_discrete else len(self.low)

    @property
    def low_array(self) -> np.ndarray:
        return np.asarray(self.low, dtype=float)

    @property
    def high_array(self) -> np.ndarray:
        return np.asarray(self.high, dtype=float)

    @property
    def midpoint(self) -> np.ndarray:
        return (self.low_array + self.high_array) / 2.0

    @property
    def half_width(self) -> np.ndarray:
        return (self.high_array - self.low_array) / 2.0

    def check(self, action):
        """Return the action in canonical form, raising on anything out of range."""
        if self.is_discrete:
            if isinstance(action, (bool, np.bool_)):
                raise ContractViolation(f"discrete action must be an integer, got {action!r}")
            try:
                index = int(action)
            except (TypeError, ValueError):
                raise ContractViolation(f"discrete action must be an integer, got {action!r}") from None
            if index != action or not 0 <= index < self.n:
                raise ContractViolation(f"action {action!r} outside 0..{self.n - 1}")
            return index
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (self.dim,):
            raise ContractViolation(f"continuous action must have shape ({self.dim},), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ContractViolation("continuous action must be finite")
        if np.any(a < self.low_array) or np.any(a > self.high_array):
            raise ContractViolation(f"action {a.tolist()} outside box")
        return a

    def to_dict(self) -> dict:
        if self.is_discrete:
            return {"kind": "discrete", "n": self.n}
        return {"kind": "continuous", "low": list(self.low), "high": list(self.high)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActionSpace":
        if d["kind"] == "discrete":
            return cls.discrete(d["n"])
        return cls.box(d["low"], d["high"])


@dataclass
class StepOutcome:
    next_observation: np.ndarray
    raw_reward: float
    terminal: bool
    truncated: bool = False
    info: dict = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.terminal or self.truncated


@dataclass(frozen=True)
class EnvConfig:
    env_id: str = "microgrid"
    action_mode: str = "discrete"
    horizon: int = 96
    phase: str = "train"
    seed: int = 0
    timeseries_path: str | None = None
    phase_split: Mapping[str, tuple[int, int]] | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ConfigurationError(f"unknown env_id {self.env_id!r}; expected one of {ENV_IDS}")
        if self.action_mode not in ACTION_MODES:
            raise ConfigurationError(f"unknown action_mode {self.action_mode!r}")
        if self.phase not in PHASES:
            raise ConfigurationError(f"unknown phase {self.phase!r}")
        if int(self.horizon) < 1:
            raise ConfigurationError("horizon must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    def replace(self, **changes) -> "EnvConfig":
        d = self.to_dict()
        d.update(changes)
        return EnvConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "action_mode": self.action_mode,
            "horizon": int(self.horizon),
            "phase": self.phase,
            "seed": int(self.seed),
            "timeseries_path": self.timeseries_path,
            "phase_split": None if self.phase_split is None
            else {k: list(v) for k, v in self.phase_split.items()},
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnvConfig":
        d = dict(d)
        split = d.get("phase_split")
        if split is not None:
            d["phase_split"] = {k: tuple(int(x) for x in v) for k, v in split.items()}
        d["params"] = dict(d.get("params") or {})
        return cls(**d)


# --------------------------------------------------------------------------
# time series ingestion


@dataclass(frozen=True)
class PhaseSeries:
    phase: str
    start: int
    demand_kw: np.ndarray
    solar_kw: np.ndarray

    def __len__(self) -> int:
        return len(self.demand_kw)


def _validate_split(split: Mapping[str, tuple[int, int]], length: int) -> dict[str, tuple[int, int]]:
    missing = set(PHASES) - set(split)
    if missing:
        raise ConfigurationError(f"phase_split missing phases {sorted(missing)}")
    ranges = {}
    for phase in PHASES:
        start, stop = (int(v) for v in split[phase])
        if stop <= start:
            raise ConfigurationError(f"empty phase slice for {phase}: [{start}, {stop})")
        if start < 0 or stop > length:
            raise ConfigurationError(f"{phase} slice [{start}, {stop}) outside series of length {length}")
        ranges[phase] = (start, stop)
    ordered = sorted(ranges.items(), key=lambda kv: kv[1])
    for (pa, (_, stop_a)), (pb, (start_b, _)) in zip(ordered, ordered[1:]):
        if start_b < stop_a:
            raise ConfigurationError(f"phase slices {pa} and {pb} overlap")
    return ranges


def read_timeseries(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a ``step,demand_kw,solar_kw`` CSV into (demand, solar) arrays."""
    demand, solar = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", lineno)
            try:
                d, s = float(row[1]), float(row[2])
                int(row[0])
            except ValueError:
                raise ParseError(f"non-numeric value in {row!r}", lineno) from None
            if not (math.isfinite(d) and math.isfinite(s)):
                raise ParseError("non-finite value", lineno)
            if d < 0 or s < 0:
                raise ParseError("negative value", lineno)
            demand.append(d)
            solar.append(s)
    return np.asarray(demand, dtype=float), np.asarray(solar, dtype=float)


def ingest_timeseries(path, phase_split: Mapping[str, tuple[int, int]]) -> dict[str, PhaseSeries]:
    """Read a series file and slice it into disjoint train/validation/test parts."""
    demand, solar = read_timeseries(path)
    ranges = _validate_split(phase_split, len(demand))
    return {
        phase: PhaseSeries(phase, a, demand[a:b].copy(), solar[a:b].copy())
        for phase, (a, b) in ranges.items()
    }


def bundled_series_path() -> Path:
    return Path(str(resources.files("ensemblerl") / "data" / BUNDLED_SERIES))


def synthetic_timeseries(days: int = 10, steps_per_day: int = 96, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sinusoidal demand and clear-sky-shaped PV with seeded noise.

    This is how the bundled CSV was produced.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(days * steps_per_day)
    day_frac = (t % steps_per_day) / steps_per_day
    demand = 8.0 + 3.0 * np.sin(2 * np.pi * (day_frac - 0.3)) + rng.normal(0.0, 0.8, t.size)
    sun = np.clip(np.sin(np.pi * (day_frac - 0.25) / 0.5), 0.0, None)
    cloud = np.clip(rng.normal(0.85, 0.15, days).repeat(steps_per_day), 0.2, 1.0)
    solar = 14.0 * sun * cloud * np.clip(rng.normal(1.0, 0.05, t.size), 0.5, 1.2)
    return np.clip(demand, 0.0, None).round(4), np.clip(solar, 0.0, None).round(4)


def write_timeseries(path, demand, solar) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i, (d, s) in enumerate(zip(demand, solar)):
            w.writerow([i, repr(float(d)), repr(float(s))])


# --------------------------------------------------------------------------
# environments


class Env:
    """Single-threaded episodic state machine."""

    env_id: str
    action_space: ActionSpace
    observation_dim: int

    def __init__(self, config: EnvConfig):
        self.config = config
        self.horizon = int(config.horizon)
        self.t = 0
        self._done = True

    def _rng_for(self, seed: int | None) -> np.random.Generator:
        base = self.config.seed if seed is None else seed
        seed = int(base)
        _record_access(self.env_id, self.config.phase, seed)
        return np.random.default_rng(derive_seed(seed, PHASE_CODES[self.config.phase]))

    def reset(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> StepOutcome:
        raise NotImplementedError

    def _begin_step(self, action):
        if self._done:
            raise ContractViolation("episode is over; call reset() first")
        return self.action_space.check(action)


@dataclass(frozen=True)
class MicrogridParams:
    battery_capacity_kwh: float = 50.0
    battery_max_charge_kw: float = 10.0
    battery_max_discharge_kw: float = 10.0
    battery_efficiency: float = 0.9  # round trip, split evenly between legs
    initial_soc_frac: float = 0.5
    genset_capacity_kw: float = 20.0
    genset_cost_per_kwh: float = 0.5
    grid_max_kw: float = 30.0
    buy_price: float = 0.2
    sell_price: float = 0.05
    outage_prob: float = 0.05
    penalty_rate: float = 2.0  # $/kWh of unmet demand
    power_scale_kw: float = 20.0  # observation normalizer
    steps_per_day: int = 96
    dt_h: float = 1.0

    def __post_init__(self):
        if not 0 < self.battery_efficiency <= 1:
            raise ConfigurationError("battery_efficiency must lie in (0, 1]")
        if not 0 <= self.outage_prob <= 1:
            raise ConfigurationError("outage_prob must lie in [0, 1]")
        if not 0 <= self.initial_soc_frac <= 1:
            raise ConfigurationError("initial_soc_frac must lie in [0, 1]")
        for name in ("battery_capacity_kwh", "battery_max_charge_kw", "battery_max_discharge_kw",
                     "genset_capacity_kw", "genset_cost_per_kwh", "grid_max_kw", "buy_price",
                     "sell_price", "penalty_rate", "power_scale_kw", "dt_h"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")


@dataclass
class MicrogridState:
    soc_kwh: float
    demand_kw: float
    solar_kw: float
    grid_up: bool


# (use_pv, battery, genset, grid) per discrete action; battery/grid are signed
# fractions of their limits (+ discharge/import), genset a fraction of capacity.
MICROGRID_ACTIONS = (
    ("idle", False, 0.0, 0.0, 0.0),
    ("pv_to_load", True, 0.0, 0.0, 0.0),
    ("pv_battery_to_load", True, 1.0, 0.0, 0.0),
    ("pv_grid_to_load", True, 0.0, 0.0, 1.0),
    ("pv_genset_to_load", True, 0.0, 1.0, 0.0),
    ("charge_battery", True, -1.0, 0.0, 1.0),
)


class MicrogridEnv(Env):
    """Hourly microgrid dispatch.

    Observation (6 entries):
        0  battery state of charge / capacity            [0, 1]
        1  demand kW / power_scale_kw
        2  PV output kW / power_scale_kw
        3  main-grid link available this step            {0, 1}
        4  sin(2*pi*row/steps_per_day)                    time of day
        5  cos(2*pi*row/steps_per_day)

    Discrete actions follow ``MICROGRID_ACTIONS``. The continuous action is a
    3-vector in [-1, 1]: battery power (+ discharge), genset loading (mapped
    from [-1, 1] to [0, 1] of capacity) and grid exchange (+ import). PV always
    serves the load first in continuous mode. Requests are clamped to what is
    feasible in the order battery, genset, grid; discharge and genset output
    never exceed the remaining load, charging draws on PV surplus and then on
    grid import, and exports are limited to PV surplus.

    Operating cost is ``import*buy + genset*fuel - export*sell`` floored at 0,
    so rewards are never positive.
    """

    env_id = "microgrid"
    observation_dim = 6

    def __init__(self, config: EnvConfig, series: PhaseSeries | None = None):
        super().__init__(config)
        self.params = MicrogridParams(**config.params)
        if series is None:
            path = config.timeseries_path or bundled_series_path()
            split = config.phase_split or DEFAULT_PHASE_SPLIT
            series = ingest_timeseries(path, split)[config.phase]
        elif series.phase != config.phase:
            raise ConfigurationError(f"series is for phase {series.phase}, config wants {config.phase}")
        _record_access(self.env_id, config.phase, int(config.seed))
        if self.horizon > len(series):
            raise ConfigurationError(
                f"horizon {self.horizon} exceeds {config.phase} series length {len(series)}")
        self.series = series
        if config.action_mode == "discrete":
            self.action_space = ActionSpace.discrete(len(MICROGRID_ACTIONS))
        else:
            self.action_space = ActionSpace.box([-1.0] * 3, [1.0] * 3)
        p = self.params
        self._eta = math.sqrt(p.battery_efficiency)
        self.state = MicrogridState(p.initial_soc_frac * p.battery_capacity_kwh, 0.0, 0.0, True)

    def _observe(self) -> np.ndarray:
        p, s = self.params, self.state
        angle = 2 * math.pi * ((self.series.start + self.t) % p.steps_per_day) / p.steps_per_day
        return np.array([
            s.soc_kwh / p.battery_capacity_kwh if p.battery_capacity_kwh > 0 else 0.0,
            s.demand_kw / p.power_scale_kw,
            s.solar_kw / p.power_scale_kw,
            1.0 if s.grid_up else 0.0,
            math.sin(angle),
            math.cos(angle),
        ])

    def _load_row(self) -> None:
        self.state.demand_kw = float(self.series.demand_kw[self.t])
        self.state.solar_kw = float(self.series.solar_kw[self.t])
        self.state.grid_up = bool(self._rng.random() >= self.params.outage_prob)

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._rng = self._rng_for(seed)
        p = self.params
        self.t = 0
        self.state = MicrogridState(p.initial_soc_frac * p.battery_capacity_kwh, 0.0, 0.0, True)
        self._load_row()
        self._done = False
        return self._observe()

    def _decode(self, action) -> tuple[bool, float, float, float]:
        p = self.params
        if self.action_space.is_discrete:
            _, use_pv, batt, gen, grid = MICROGRID_ACTIONS[action]
        else:
            use_pv = True
            batt, gen, grid = float(action[0]), (float(action[1]) + 1.0) / 2.0, float(action[2])
        batt_kw = batt * (p.battery_max_discharge_kw if batt > 0 else p.battery_max_charge_kw)
        return use_pv, batt_kw, gen * p.genset_capacity_kw, grid * p.grid_max_kw

    def dispatch(self, use_pv: bool, battery_kw: float, genset_kw: float, grid_kw: float) -> dict:
        """Resolve one step of energy flows (kWh) and the updated state of charge."""
        p, s, dt = self.params, self.state, self.params.dt_h
        demand = s.demand_kw * dt
        solar = s.solar_kw * dt if use_pv else 0.0
        pv_to_load = min(solar, demand)
        surplus = solar - pv_to_load
        residual = demand - pv_to_load
        import_cap = max(grid_kw, 0.0) * dt if s.grid_up else 0.0

        soc = s.soc_kwh
        charge = discharge = charge_from_pv = charge_from_grid = 0.0
        if battery_kw > 0:
            discharge = min(battery_kw * dt, p.battery_max_discharge_kw * dt, soc * self._eta, residual)
            discharge = max(discharge, 0.0)
            residual -= discharge
            soc = max(soc - discharge / self._eta, 0.0)
        elif battery_kw < 0:
            headroom = (p.battery_capacity_kwh - soc) / self._eta
            charge = min(-battery_kw * dt, p.battery_max_charge_kw * dt, headroom, surplus + import_cap)
            charge = max(charge, 0.0)
            charge_from_pv = min(charge, surplus)
            charge_from_grid = charge - charge_from_pv
            surplus -= charge_from_pv
            import_cap -= charge_from_grid
            soc = min(soc + charge * self._eta, p.battery_capacity_kwh)

        genset = min(genset_kw * dt, p.genset_capacity_kw * dt, residual)
        genset = max(genset, 0.0)
        residual -= genset

        import_load = min(import_cap, residual)
        residual -= import_load
        export = 0.0
        if grid_kw < 0 and s.grid_up:
            export = min(-grid_kw * dt, p.grid_max_kw * dt, surplus)
            surplus -= export

        unmet = max(residual, 0.0)
        grid_import = charge_from_grid + import_load
        pv_used = pv_to_load + charge_from_pv + export
        supply = pv_used + discharge + genset + grid_import
        balance = supply - ((demand - unmet) + charge + export)
        return {
            "pv_used_kwh": pv_used,
            "pv_curtailed_kwh": solar - pv_used,
            "battery_charge_kwh": charge,
            "battery_discharge_kwh": discharge,
            "genset_kwh": genset,
            "grid_import_kwh": grid_import,
            "grid_export_kwh": export,
            "unmet_demand_kwh": unmet,
            "demand_kwh": demand,
            "balance_residual_kwh": balance,
            "soc_kwh": soc,
        }

    def step(self, action) -> StepOutcome:
        action = self._begin_step(action)
        p = self.params
        flows = self.dispatch(*self._decode(action))
        gross = flows["grid_import_kwh"] * p.buy_price + flows["genset_kwh"] * p.genset_cost_per_kwh
        cost = max(gross - flows["grid_export_kwh"] * p.sell_price, 0.0)
        penalty = p.penalty_rate * flows["unmet_demand_kwh"]
        reward = -(cost + penalty)
        info = dict(flows, cost=cost, penalty=penalty, grid_up=self.state.grid_up)
        self.state.soc_kwh = flows["soc_kwh"]
        self.t += 1
        truncated = self.t >= self.horizon
        if truncated:
            self._done = True
        else:
            self._load_row()
        return StepOutcome(self._observe(), float(reward), False, truncated, info)


@dataclass(frozen=True)
class PlantParams:
    dt: float = 0.1
    limit: float = 1.0  # |position| and |velocity| safety box
    u_max: float = 1.0
    disturbance: float = 0.01  # uniform bound added to velocity each step
    min_reward: float = 0.0
    ref_amplitude: float = 0.5
    ref_period: int = 50
    n_discrete: int = 5

    def __post_init__(self):
        if self.limit <= 0 or self.dt <= 0 or self.u_max <= 0:
            raise ConfigurationError("dt, limit and u_max must be positive")
        if self.disturbance < 0:
            raise ConfigurationError("disturbance must be nonnegative")
        if self.ref_amplitude >= self.limit:
            raise ConfigurationError("ref_amplitude must stay inside the safety limit")
        if self.ref_period < 1 or self.n_discrete < 2:
            raise ConfigurationError("ref_period >= 1 and n_discrete >= 2 required")


class SafetyPlantEnv(Env):
    """Double integrator ``x' = A x + B u + w`` with a hard safety box.

    ``A = [[1, dt], [0, 1]]``, ``B = [dt^2/2, dt]``, ``w = (0, U(-d, d))``.
    Reward on a safe step is ``max(0, 1 - ((pos - ref) / limit)^2)``; any
    ``|x_i| > limit`` terminates with ``min_reward``.

    Observation: ``[position, velocity, reference]``. Discrete actions are
    ``n_discrete`` evenly spaced accelerations in ``[-u_max, u_max]``; the
    continuous action is a 1-vector in [-1, 1] scaled by ``u_max``.
    """

    env_id = "safety_plant"
    observation_dim = 3

    def __init__(self, config: EnvConfig):
        super().__init__(config)
        self.params = PlantParams(**config.params)
        p = self.params
        self.A = np.array([[1.0, p.dt], [0.0, 1.0]])
        self.B = np.array([0.5 * p.dt**2, p.dt])
        if config.action_mode == "discrete":
            self.action_space = ActionSpace.discrete(p.n_discrete)
            self._levels = np.linspace(-1.0, 1.0, p.n_discrete)
        else:
            self.action_space = ActionSpace.box([-1.0], [1.0])
        self.state = np.zeros(2)
        self.references = np.zeros(self.horizon + 1)

    @property
    def reference(self) -> float:
        return float(self.references[min(self.t, self.horizon)])

    def _observe(self) -> np.ndarray:
        return np.array([self.state[0], self.state[1], self.reference])

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._rng = self._rng_for(seed)
        p = self.params
        n_seg = self.horizon // p.ref_period + 1
        levels = self._rng.uniform(-p.ref_amplitude, p.ref_amplitude, n_seg)
        self.references = levels.repeat(p.ref_period)[: self.horizon + 1]
        self.state = np.zeros(2)
        self.t = 0
        self._done = False
        return self._observe()

    def step(self, action) -> StepOutcome:
        action = self._begin_step(action)
        p = self.params
        frac = self._levels[action] if self.action_space.is_discrete else float(action[0])
        u = frac * p.u_max
        w = self._rng.uniform(-p.disturbance, p.disturbance) if p.disturbance > 0 else 0.0
        self.state = self.A @ self.state + self.B * u + np.array([0.0, w])
        self.t += 1
        violation = bool(np.any(np.abs(self.state) > p.limit))
        if violation:
            reward, terminal = p.min_reward, True
        else:
            err = (self.state[0] - self.references[self.t - 1]) / p.limit
            reward, terminal = max(0.0, 1.0 - err * err), False
        truncated = not terminal and self.t >= self.horizon
        self._done = terminal or truncated
        info = {"limit_violation": violation, "tracking_error": float(self.state[0] - self.references[self.t - 1])}
        return StepOutcome(self._observe(), float(reward), terminal, truncated, info)


def make_env(config: EnvConfig) -> Env:
    if config.env_id == "microgrid":
        return MicrogridEnv(config)
    if config.env_id == "safety_plant":
        return SafetyPlantEnv(config)
    raise ConfigurationError(f"unknown env_id {config.env_id!r}")


def reset(config: EnvConfig) -> np.ndarray:
    """Initial observation for ``config`` (builds a throwaway environment)."""
    return make_env(config).reset()
