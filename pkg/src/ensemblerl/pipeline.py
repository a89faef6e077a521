"""Population runs: train members in a worker pool, validate, select, test.

On-disk layout::

    runs/<population-id>/population.json      run config + spec list
    runs/<population-id>/<spec-id>/manifest.json
    runs/<population-id>/<spec-id>/member_00.ckpt ...
    runs/<population-id>/selected.json         written by select_and_test

Checkpoint documents are text::

    ENSEMBLERL-CHECKPOINT
    {header as one line of JSON, keys sorted}
    {base64 of the float64 little-endian payload}
    CRC32 {8 hex digits over header line + raw payload}

The payload is every stored network (row-major, layer by layer, weights then
bias) followed by optimizer moment arrays when present.
"""

from __future__ import annotations

import base64
import concurrent.futures as cf
import json
import math
import os
import time
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__, neural
from .agents import (Agent, EvalResult, HyperParams, TrainingConfig, agent_for_env, evaluate,
                     make_agent, run_training)
from .ensemble import CombinerWeights, EnsemblePolicy, weights_from_scores
from .envs import DEFAULT_PHASE_SPLIT, ActionSpace, EnvConfig
from .errors import (CheckpointIntegrityError, CheckpointVersionError, ConfigurationError,
                     ContractViolation, RunError)
from .search import EnsembleSpec
from .seeding import derive_seed

CHECKPOINT_MAGIC = "ENSEMBLERL-CHECKPOINT"
CHECKPOINT_VERSION = 1
MANIFEST_FORMAT = "ensemblerl-manifest/1"
SPECS_FORMAT = "ensemblerl-specs/1"

DEFAULT_HORIZONS = {
    "microgrid": {"train": 96, "validation": 144, "test": 144},
    "safety_plant": {"train": 200, "validation": 200, "test": 200},
}


def default_workers() -> int:
    env = os.environ.get("ENSEMBLERL_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    env_id: str = "microgrid"
    action_mode: str = "discrete"
    episodes: int = 10
    train_horizon: int | None = None
    validation_horizon: int | None = None
    test_horizon: int | None = None
    eval_repeats: int = 1
    seed: int = 0
    timeseries_path: str | None = None
    phase_split: Mapping[str, tuple[int, int]] | None = None
    env_params: Mapping = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    full_checkpoints: bool = False

    def __post_init__(self):
        if self.episodes < 0:
            raise ConfigurationError("episodes must be >= 0")
        if self.eval_repeats < 1:
            raise ConfigurationError("eval_repeats must be >= 1")

    def horizon(self, phase: str) -> int:
        explicit = {"train": self.train_horizon, "validation": self.validation_horizon,
                    "test": self.test_horizon}[phase]
        if explicit is not None:
            return int(explicit)
        return DEFAULT_HORIZONS[self.env_id][phase]

    def phase_seed(self, phase: str) -> int:
        """Base environment seed per phase; members and ensembles share the validation seed."""
        return derive_seed(self.seed, {"train": 100, "validation": 200, "test": 300}[phase])

    def env_config(self, phase: str, seed: int | None = None) -> EnvConfig:
        split = self.phase_split
        if split is None and self.env_id == "microgrid" and self.timeseries_path is None:
            split = DEFAULT_PHASE_SPLIT
        return EnvConfig(self.env_id, self.action_mode, self.horizon(phase), phase,
                         self.phase_seed(phase) if seed is None else seed,
                         self.timeseries_path, split, dict(self.env_params))

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "action_mode": self.action_mode,
            "episodes": self.episodes,
            "train_horizon": self.horizon("train"),
            "validation_horizon": self.horizon("validation"),
            "test_horizon": self.horizon("test"),
            "eval_repeats": self.eval_repeats,
            "seed": int(self.seed),
            "timeseries_path": self.timeseries_path,
            "phase_split": None if self.phase_split is None
            else {k: list(v) for k, v in self.phase_split.items()},
            "env_params": dict(self.env_params),
            "training": self.training.to_dict(),
            "full_checkpoints": self.full_checkpoints,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d)
        d["training"] = TrainingConfig(**d.get("training", {}))
        if d.get("phase_split") is not None:
            d["phase_split"] = {k: tuple(v) for k, v in d["phase_split"].items()}
        d["env_params"] = dict(d.get("env_params") or {})
        return cls(**d)


# --------------------------------------------------------------------------
# checkpoints


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _set_rng_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state


def save_checkpoint(agent: Agent, full: bool = True) -> str:
    """Serialize an agent. ``full=False`` keeps only the acting network(s)."""
    nets = agent.networks()
    if not full:
        keep = ("q_net",) if agent.algo == "dqn" else ("actor",)
        nets = {k: v for k, v in nets.items() if k in keep}
    opts = agent.optimizers() if full else {}
    arrays: list[np.ndarray] = []
    net_meta = []
    for name, params in nets.items():
        net_meta.append({"name": name, "spec": params.spec.to_dict(), "count": params.spec.n_params})
        arrays.extend(params.arrays())
    opt_meta = []
    for name, opt in opts.items():
        opt_meta.append({"name": name, "kind": opt.kind, "learning_rate": opt.learning_rate,
                         "beta1": opt.beta1, "beta2": opt.beta2, "eps_hat": opt.eps_hat, "t": opt.t,
                         "moments": len(opt.m)})
        arrays.extend(opt.m)
        arrays.extend(opt.v)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "algo": agent.algo,
        "full": bool(full),
        "hyperparams": agent.hp.to_dict(),
        "obs_dim": agent.obs_dim,
        "action_space": agent.action_space.to_dict(),
        "seed": agent.seed,
        "training_config": agent.config.to_dict(),
        "networks": net_meta,
        "optimizers": opt_meta,
        "rng": {"exploration": _rng_state(agent.rng), "replay": _rng_state(agent.buffer.rng)},
        "counters": {"train_steps": agent.train_steps, "skipped_updates": agent.skipped_updates,
                     "rejected_updates": agent.rejected_updates},
        "payload_bytes": len(payload),
    }
    header_line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    crc = zlib.crc32(payload, zlib.crc32(header_line.encode()))
    return "\n".join([CHECKPOINT_MAGIC, header_line, base64.b64encode(payload).decode("ascii"),
                      f"CRC32 {crc:08x}"]) + "\n"


def load_checkpoint(document: str) -> Agent:
    lines = document.split("\n")
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError("not a checkpoint document")
    if len(lines) < 4:
        raise CheckpointIntegrityError("checkpoint truncated")
    try:
        header = json.loads(lines[1])
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"unreadable header: {exc}") from None
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version!r}, this build reads {CHECKPOINT_VERSION}")
    if not lines[3].startswith("CRC32 "):
        raise CheckpointIntegrityError("checkpoint truncated (missing checksum)")
    try:
        payload = base64.b64decode(lines[2], validate=True)
        expected = int(lines[3][6:], 16)
    except ValueError as exc:
        raise CheckpointIntegrityError(f"corrupted payload: {exc}") from None
    if len(payload) != header["payload_bytes"]:
        raise CheckpointIntegrityError(f"payload has {len(payload)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(payload, zlib.crc32(lines[1].encode())) != expected:
        raise CheckpointIntegrityError("checksum mismatch")

    values = np.frombuffer(payload, dtype="<f8").astype(float)
    hp = HyperParams.from_dict(header["hyperparams"])
    agent = make_agent(hp, header["obs_dim"], ActionSpace.from_dict(header["action_space"]),
                       header["seed"], TrainingConfig(**header["training_config"]))
    offset = 0
    nets = {}
    for meta in header["networks"]:
        spec = neural.MlpSpec(**meta["spec"])
        nets[meta["name"]] = neural.ParamSet.from_flat(spec, values[offset:offset + meta["count"]])
        offset += meta["count"]
    if not header["full"]:
        for online, target in (("q_net", "q_target"), ("actor", "actor_target"), ("critic", "critic_target")):
            if online in nets:
                nets[target] = nets[online].copy()
    agent.set_networks(nets)
    opts = {}
    for meta in header["optimizers"]:
        base = agent.optimizers()[meta["name"]]
        shapes = [a.shape for a in base.m]
        ms, vs = [], []
        for bucket in (ms, vs):
            for shape in shapes:
                n = int(np.prod(shape))
                bucket.append(values[offset:offset + n].reshape(shape).copy())
                offset += n
        opts[meta["name"]] = neural.OptimizerState(meta["kind"], meta["learning_rate"], meta["beta1"],
                                                   meta["beta2"], meta["eps_hat"], meta["t"], ms, vs)
    agent.set_optimizers(opts)
    _set_rng_state(agent.rng, header["rng"]["exploration"])
    _set_rng_state(agent.buffer.rng, header["rng"]["replay"])
    for key, value in header["counters"].items():
        setattr(agent, key, value)
    return agent


# --------------------------------------------------------------------------
# manifests


@dataclass
class MemberRecord:
    index: int
    seed: int
    status: str
    train_returns: list[float] = field(default_factory=list)
    validation: EvalResult | None = None
    checkpoint: str | None = None
    error: str | None = None
    rejected_updates: int = 0

    def to_dict(self) -> dict:
        return {
            "index": self.index, "seed": int(self.seed), "status": self.status, "error": self.error,
            "train_returns": list(self.train_returns),
            "validation": self.validation.to_dict() if self.validation else None,
            "checkpoint": self.checkpoint, "rejected_updates": self.rejected_updates,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MemberRecord":
        d = dict(d)
        if d.get("validation") is not None:
            d["validation"] = EvalResult.from_dict(d["validation"])
        return cls(**d)


@dataclass
class RunManifest:
    spec: EnsembleSpec
    run_config: dict
    members: list[MemberRecord]
    status: str = "pending"
    weights: CombinerWeights | None = None
    validation: EvalResult | None = None
    test: EvalResult | None = None
    timestamps: dict = field(default_factory=dict)
    version: str = __version__
    directory: Path | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok" and self.validation is not None

    @property
    def validation_R(self) -> float:
        return self.validation.R if self.validation else -math.inf

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": self.version,
            "status": self.status,
            "spec": self.spec.to_dict(),
            "run_config": self.run_config,
            "members": [m.to_dict() for m in self.members],
            "weights": self.weights.to_dict() if self.weights else None,
            "validation": self.validation.to_dict() if self.validation else None,
            "test": self.test.to_dict() if self.test else None,
            "timestamps": dict(self.timestamps),
        }

    @classmethod
    def from_dict(cls, d: Mapping, directory: Path | None = None) -> "RunManifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise ConfigurationError(f"unknown manifest format {d.get('format')!r}")
        return cls(
            spec=EnsembleSpec.from_dict(d["spec"]),
            run_config=d["run_config"],
            members=[MemberRecord.from_dict(m) for m in d["members"]],
            status=d["status"],
            weights=CombinerWeights.from_dict(d["weights"]) if d.get("weights") else None,
            validation=EvalResult.from_dict(d["validation"]) if d.get("validation") else None,
            test=EvalResult.from_dict(d["test"]) if d.get("test") else None,
            timestamps=dict(d.get("timestamps", {})),
            version=d.get("version", __version__),
            directory=directory,
        )

    def save(self) -> Path:
        if self.directory is None:
            raise ContractViolation("manifest has no directory")
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / "manifest.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, directory) -> "RunManifest":
        directory = Path(directory)
        return cls.from_dict(json.loads((directory / "manifest.json").read_text()), directory)

    def comparable(self) -> dict:
        """Manifest content minus timestamps (for reproducibility checks)."""
        d = self.to_dict()
        d.pop("timestamps")
        return d


def write_specs(path, specs: Sequence[EnsembleSpec], env_id: str, action_mode: str, extra: Mapping | None = None) -> None:
    doc = {"format": SPECS_FORMAT, "env_id": env_id, "action_mode": action_mode,
           "specs": [s.to_dict() for s in specs]}
    if extra:
        doc["sample_config"] = dict(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_specs(path) -> tuple[list[EnsembleSpec], dict]:
    from .errors import ParseError

    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ParseError(f"spec file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"spec file is not valid JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(doc, dict) or doc.get("format") != SPECS_FORMAT:
        raise ParseError(f"{path} is not a {SPECS_FORMAT} document")
    try:
        specs = [EnsembleSpec.from_dict(s) for s in doc["specs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad spec entry: {exc}") from None
    return specs, doc


# --------------------------------------------------------------------------
# population runs


@dataclass
class _MemberJob:
    spec: EnsembleSpec
    member: int
    config: RunConfig


@dataclass
class _MemberOutcome:
    spec_id: str
    member: int
    status: str
    train_returns: list = field(default_factory=list)
    validation: EvalResult | None = None
    document: str | None = None
    error: str | None = None
    rejected_updates: int = 0


def _train_member(job: _MemberJob) -> _MemberOutcome:
    spec, j, cfg = job.spec, job.member, job.config
    try:
        hp = spec.hyperparams(j)
        seed = spec.member_seeds[j]
        train_cfg = cfg.env_config("train")
        agent = agent_for_env(hp, train_cfg, seed, cfg.training)
        agent, returns = run_training(agent, train_cfg, cfg.episodes, seed)
        val = evaluate(agent, cfg.env_config("validation"), repeats=cfg.eval_repeats)
        doc = save_checkpoint(agent, full=cfg.full_checkpoints)
        return _MemberOutcome(spec.spec_id, j, "ok", returns, val, doc, None, agent.rejected_updates)
    except Exception as exc:  # a member failure must not take the population down
        return _MemberOutcome(spec.spec_id, j, "failed", error=f"{type(exc).__name__}: {exc}")


def ensemble_policy(agents: Sequence[Agent], weights: CombinerWeights, rule: str, executor=None) -> EnsemblePolicy:
    mode = "discrete" if agents[0].action_space.is_discrete else "continuous"
    return EnsemblePolicy([a.policy() for a in agents], weights, rule, mode, executor)


def _validate_ensemble(args) -> tuple[str, EvalResult | None, str | None]:
    spec, cfg, documents, weights = args
    try:
        agents = [load_checkpoint(d) for d in documents]
        policy = ensemble_policy(agents, weights, spec.rule)
        return spec.spec_id, evaluate(policy, cfg.env_config("validation"), repeats=cfg.eval_repeats), None
    except Exception as exc:
        return spec.spec_id, None, f"{type(exc).__name__}: {exc}"


def _map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    results = []
    with cf.ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        futures = [pool.submit(fn, x) for x in items]
        for item, fut in zip(items, futures):
            try:
                results.append(fut.result())
            except Exception as exc:  # worker process died
                results.append(exc)
    return results


def _crashed(fn, item, exc) -> object:
    msg = f"worker crashed: {type(exc).__name__}: {exc}"
    if fn is _train_member:
        return _MemberOutcome(item.spec.spec_id, item.member, "failed", error=msg)
    return item[0].spec_id, None, msg


def _map_jobs(fn, items: list, workers: int) -> list:
    return [_crashed(fn, item, r) if isinstance(r, BaseException) else r
            for item, r in zip(items, _map(fn, items, workers))]


def write_population(out_dir, specs: Sequence[EnsembleSpec], config: RunConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"format": "ensemblerl-population/1", "run_config": config.to_dict(),
           "specs": [s.to_dict() for s in specs], "created": _now()}
    (out / "population.json").write_text(json.dumps(doc, indent=2) + "\n")


def run_population(specs: Sequence[EnsembleSpec], config: RunConfig, out_dir,
                   workers: int = 1, resume: bool = True) -> list[RunManifest]:
    """Train and validate every spec; returns manifests in spec order.

    Results depend only on (specs, config): each job derives all its
    randomness from its own seeds, so worker count and completion order do not
    matter. Spec directories holding a finished manifest are reused when
    ``resume`` is set.
    """
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not (out / "population.json").exists():
        write_population(out, specs, config)
    cfg_dict = config.to_dict()

    done: dict[str, RunManifest] = {}
    todo: list[EnsembleSpec] = []
    for spec in specs:
        mdir = out / spec.spec_id
        if resume and (mdir / "manifest.json").exists():
            m = RunManifest.load(mdir)
            if m.status in ("ok", "failed") and m.spec == spec and m.run_config == cfg_dict:
                done[spec.spec_id] = m
                continue
        todo.append(spec)

    jobs = [_MemberJob(s, j, config) for s in todo for j in range(s.size)]
    outcomes = _map_jobs(_train_member, jobs, workers)
    by_spec: dict[str, list[_MemberOutcome]] = {}
    for o in outcomes:
        by_spec.setdefault(o.spec_id, []).append(o)

    manifests: dict[str, RunManifest] = {}
    pending = []
    for spec in todo:
        outs = sorted(by_spec[spec.spec_id], key=lambda o: o.member)
        mdir = out / spec.spec_id
        mdir.mkdir(parents=True, exist_ok=True)
        records = []
        for o in outs:
            ckpt = None
            if o.document is not None:
                ckpt = f"member_{o.member:02d}.ckpt"
                (mdir / ckpt).write_text(o.document)
            records.append(MemberRecord(o.member, spec.member_seeds[o.member], o.status, o.train_returns,
                                        o.validation, ckpt, o.error, o.rejected_updates))
        m = RunManifest(spec, cfg_dict, records, timestamps={"created": _now()}, directory=mdir)
        if all(r.status == "ok" for r in records):
            m.weights = weights_from_scores([r.validation.R for r in records], spec.beta)
            pending.append((spec, config, [o.document for o in outs], m.weights))
        else:
            m.status = "failed"
        manifests[spec.spec_id] = m

    for spec_id, result, error in _map_jobs(_validate_ensemble, pending, workers):
        m = manifests[spec_id]
        if result is None:
            m.status = "failed"
            m.members[0].error = m.members[0].error or error
        else:
            m.validation = result
            m.status = "ok"
            m.timestamps["validated"] = _now()

    for m in manifests.values():
        m.save()
    manifests.update(done)
    ordered = [manifests[s.spec_id] for s in specs]
    if ordered and not any(m.status == "ok" for m in ordered):
        raise RunError("every spec in the population failed")
    return ordered


def load_population(out_dir) -> tuple[list[EnsembleSpec], RunConfig, list[RunManifest]]:
    out = Path(out_dir)
    try:
        doc = json.loads((out / "population.json").read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"{out} holds no population.json") from None
    specs = [EnsembleSpec.from_dict(s) for s in doc["specs"]]
    manifests = [RunManifest.load(out / s.spec_id) for s in specs if (out / s.spec_id / "manifest.json").exists()]
    return specs, RunConfig.from_dict(doc["run_config"]), manifests


def load_members(manifest: RunManifest) -> list[Agent]:
    if manifest.directory is None:
        raise ContractViolation("manifest has no directory to load checkpoints from")
    return [load_checkpoint((manifest.directory / r.checkpoint).read_text()) for r in manifest.members]


def evaluate_test_phase(manifest: RunManifest, config: RunConfig | None = None) -> EvalResult:
    """Run the test-phase rollout(s) for one manifest (no bookkeeping)."""
    config = config or RunConfig.from_dict(manifest.run_config)
    policy = ensemble_policy(load_members(manifest), manifest.weights, manifest.spec.rule)
    return evaluate(policy, config.env_config("test"), repeats=config.eval_repeats)



def select(manifests: Sequence[RunManifest]) -> RunManifest:
    ok = [m for m in manifests if m.ok]
    if not ok:
        raise ContractViolation("no successful manifest to select from")
    return min(ok, key=lambda m: (-m.validation_R, m.spec.spec_id))


def select_and_test(manifests: Sequence[RunManifest]) -> RunManifest:
    """Pick the best ensemble on validation R (ties: lowest spec_id) and test it once."""
    if len(manifests) == 0:
        raise ContractViolation("no manifests given")
    chosen = select(manifests)
    chosen.test = evaluate_test_phase(chosen)
    chosen.timestamps["tested"] = _now()
    if chosen.directory is not None:
        chosen.save()
        summary = {"spec_id": chosen.spec.spec_id, "validation_R": chosen.validation_R,
                   "test_R": chosen.test.R, "test": chosen.test.to_dict(), "selected": _now()}
        (chosen.directory.parent / "selected.json").write_text(json.dumps(summary, indent=2) + "\n")
    return chosen


# --------------------------------------------------------------------------
# inference latency


@dataclass
class LatencyStats:
    n: int
    members: int
    parallel_members: bool
    min: float | None = None
    mean: float | None = None
    p50: float | None = None
    p99: float | None = None
    max: float | None = None
    actions: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("n", "members", "parallel_members", "min", "mean", "p50", "p99", "max")}
        return d


def infer_bench(manifest: RunManifest, n_states: int, parallel_members: bool = False,
                seed: int = 0) -> LatencyStats:
    """Per-state latency (seconds) of the ensemble mapping one state to one action.

    States are drawn from a standard normal of the observation size and fed
    sequentially, exactly as a deployed controller would receive them.
    """
    agents = load_members(manifest)
    stats = LatencyStats(n_states, len(agents), parallel_members)
    if n_states <= 0:
        return stats
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(n_states, agents[0].obs_dim))
    executor = cf.ThreadPoolExecutor(max_workers=len(agents)) if parallel_members else None
    try:
        policy = ensemble_policy(agents, manifest.weights, manifest.spec.rule, executor)
        policy.reset()
        times = np.empty(n_states)
        actions = []
        for i, s in enumerate(states):
            t0 = time.perf_counter()
            a = policy.act(s)
            times[i] = time.perf_counter() - t0
            actions.append(a.tolist() if isinstance(a, np.ndarray) else int(a))
    finally:
        if executor is not None:
            executor.shutdown()
    return replace(stats, min=float(times.min()), mean=float(times.mean()),
                   p50=float(np.percentile(times, 50)), p99=float(np.percentile(times, 99)),
                   max=float(times.max()), actions=actions)
