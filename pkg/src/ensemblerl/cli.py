"""Command-line entry point: ``ensemblerl <command> [flags]``.

Flags can also come from ``--config FILE`` (YAML or JSON, flat mapping of
option names with underscores). Precedence is flags > file > defaults.

Exit codes: 0 ok, 1 partial job failures, 2 usage or configuration error
(also used when every job of a population failed), 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import yaml

from . import analysis
from .agents import TrainingConfig
from .ensemble import RULES, format_beta, parse_beta
from .envs import ENV_IDS
from .errors import ConfigurationError, ContractViolation, EnsembleRLError, ParseError, RunError
from .pipeline import (RunConfig, RunManifest, default_workers, infer_bench, load_population, read_specs,
                       run_population, select, select_and_test, write_specs)
from .search import MODE_ALIASES, build_ensemble_specs

log = logging.getLogger("ensemblerl")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3
EXIT_TOTAL = EXIT_USAGE
ALGO_FOR_MODE = {"discrete": "dqn", "continuous": "ddpg"}


class UsageError(EnsembleRLError):
    pass


@dataclass(frozen=True)
class Opt:
    flags: tuple[str, ...]
    key: str
    help: str
    default: Any = None
    type: Callable | None = None
    choices: Sequence | None = None
    flag: bool = False  # store_true switch


def _beta(text: str) -> float:
    try:
        return parse_beta(text)
    except (ValueError, ConfigurationError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


SAMPLE_OPTS = [
    Opt(("--env",), "env", "environment id", "microgrid", str, ENV_IDS),
    Opt(("--action-mode",), "action_mode", "discrete or continuous action space", "discrete", str,
        ("discrete", "continuous")),
    Opt(("--algo",), "algo", "base-agent algorithm (default: dqn for discrete, ddpg for continuous)",
        None, str, ("dqn", "ddpg")),
    Opt(("--mode",), "mode", "homo: members share one hyperparameter set; hetero: one set per member",
        "homo", str, tuple(MODE_ALIASES)),
    Opt(("--size",), "size", "number of base agents per ensemble (J)", 4, int),
    Opt(("--count",), "count", "number of ensembles to sample (N)", 100, int),
    Opt(("--beta",), "beta", "soft-gating exponent, a number >= 0 or 'inf'", 0.0, _beta),
    Opt(("--rule",), "rule", "combination rule", "avg", str, RULES),
    Opt(("--seed",), "seed", "master seed for hyperparameters and member seeds", 0, int),
]
TRAIN_OPTS = [
    Opt(("--workers",), "workers", "worker processes (default: $ENSEMBLERL_WORKERS or CPU count)", None, int),
    Opt(("--episodes",), "episodes", "training episodes per base agent", 10, int),
    Opt(("--train-horizon",), "train_horizon", "steps per training episode (default: per environment)", None, int),
    Opt(("--validation-horizon",), "validation_horizon", "steps per validation rollout", None, int),
    Opt(("--test-horizon",), "test_horizon", "steps per test rollout", None, int),
    Opt(("--eval-repeats",), "eval_repeats", "rollouts averaged per evaluation", 1, int),
    Opt(("--env-seed",), "env_seed", "seed for environment phases", 0, int),
    Opt(("--learning-starts",), "learning_starts", "transitions collected before the first update", 1000, int),
    Opt(("--replay-capacity",), "replay_capacity", "replay buffer capacity per agent", 50000, int),
    Opt(("--target-update",), "target_update_interval", "DQN hard target copy interval (steps)", 200, int),
    Opt(("--timeseries",), "timeseries_path", "microgrid demand/solar CSV (default: bundled series)", None, str),
    Opt(("--full-checkpoints",), "full_checkpoints",
        "store optimizer state, targets and RNG state (resumable training) instead of inference weights",
        False, flag=True),
]
ALL_KEYS = {o.key for o in SAMPLE_OPTS + TRAIN_OPTS} | {"specs", "out", "population_id"}


def load_config_file(path) -> dict:
    """Read a flat YAML/JSON mapping; unknown keys are a configuration error."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ParseError(f"config file {path}: {exc}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    data = {str(k).replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - ALL_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return data


def _add(parser: argparse.ArgumentParser, opts: Sequence[Opt]) -> None:
    for o in opts:
        shown = "" if o.default is None else f" (default: {o.default})"
        if o.flag:
            parser.add_argument(*o.flags, dest=o.key, action="store_true", default=None, help=o.help)
        else:
            parser.add_argument(*o.flags, dest=o.key, type=o.type, choices=o.choices, default=None,
                                help=o.help + shown)


def resolve(args: argparse.Namespace, opts: Sequence[Opt]) -> dict:
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for o in opts:
        value = getattr(args, o.key, None)
        if value is None:
            value = file_cfg.get(o.key, o.default)
            if o.key == "beta" and value is not None:
                value = parse_beta(value)
        out[o.key] = value
    out["_file"] = file_cfg
    return out


# --------------------------------------------------------------------------
# commands


def _sample_specs(cfg: dict):
    if cfg["size"] is None or int(cfg["size"]) < 1:
        raise UsageError("--size must be >= 1")
    if int(cfg["count"]) < 1:
        raise UsageError("--count must be >= 1")
    if cfg["rule"] == "closest" and cfg["action_mode"] == "discrete":
        raise UsageError("--rule closest needs --action-mode continuous")
    algo = cfg["algo"] or ALGO_FOR_MODE[cfg["action_mode"]]
    if algo != ALGO_FOR_MODE[cfg["action_mode"]]:
        raise UsageError(f"--algo {algo} does not support --action-mode {cfg['action_mode']}")
    specs = build_ensemble_specs(algo, cfg["mode"], int(cfg["size"]), int(cfg["count"]), cfg["beta"],
                                 cfg["rule"], int(cfg["seed"]))
    return specs


def cmd_sample(args) -> int:
    cfg = resolve(args, SAMPLE_OPTS)
    out = args.out or cfg["_file"].get("specs") or "specs.json"
    specs = _sample_specs(cfg)
    write_specs(out, specs, cfg["env"], cfg["action_mode"],
                {"command": "sample", "seed": int(cfg["seed"]), "beta": format_beta(cfg["beta"])})
    print(f"wrote {len(specs)} specs to {out}")
    return EXIT_OK


def _run_config(cfg: dict, env_id: str, action_mode: str) -> RunConfig:
    training = TrainingConfig(replay_capacity=int(cfg["replay_capacity"]),
                              learning_starts=int(cfg["learning_starts"]),
                              target_update_interval=int(cfg["target_update_interval"]))
    return RunConfig(env_id=env_id, action_mode=action_mode, episodes=int(cfg["episodes"]),
                     train_horizon=cfg["train_horizon"], validation_horizon=cfg["validation_horizon"],
                     test_horizon=cfg["test_horizon"], eval_repeats=int(cfg["eval_repeats"]),
                     seed=int(cfg["env_seed"]), timeseries_path=cfg["timeseries_path"],
                     training=training, full_checkpoints=bool(cfg["full_checkpoints"]))


def _workers(cfg: dict) -> int:
    w = cfg["workers"] if cfg["workers"] is not None else default_workers()
    if int(w) < 1:
        raise UsageError("--workers must be >= 1")
    return int(w)


def _train(specs, doc: dict, cfg: dict, out: str) -> tuple[int, list[RunManifest]]:
    config = _run_config(cfg, doc["env_id"], doc["action_mode"])
    try:
        manifests = run_population(specs, config, out, _workers(cfg))
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOTAL, []
    failed = [m.spec.spec_id for m in manifests if not m.ok]
    print(f"trained {len(manifests) - len(failed)}/{len(manifests)} ensembles into {out}")
    if failed:
        print(f"failed specs: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PARTIAL, manifests
    return EXIT_OK, manifests


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_OPTS)
    specs_path = args.specs or cfg["_file"].get("specs")
    if not specs_path:
        raise UsageError("--specs is required")
    population_id = args.population_id or cfg["_file"].get("population_id") or Path(specs_path).stem
    out = args.out or cfg["_file"].get("out") or str(Path("runs") / population_id)
    specs, doc = read_specs(specs_path)
    code, _ = _train(specs, doc, cfg, out)
    return code


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_select_test(args) -> int:
    _, _, manifests = load_population(args.run)
    chosen = select_and_test(manifests)
    _print_json({"spec_id": chosen.spec.spec_id, "validation_R": chosen.validation_R, "test_R": chosen.test.R})
    return EXIT_OK


def _arm_report(run_dir, phase: str) -> analysis.PopulationReport:
    _, _, manifests = load_population(run_dir)
    return analysis.population_report(manifests, phase)


RANK_KEYS = {
    "decile": lambda r: r.best_decile if r.best_decile is not None else float("-inf"),
    "max": lambda r: r.max,
    "median": lambda r: r.median,
}


def _sibling(path: Path, tag: str) -> Path:
    return path.with_name(f"{path.stem}.{tag}{path.suffix}")


def cmd_analyze(args) -> int:
    """Population statistics per run directory, ranked by the chosen metric on the test phase."""
    out = Path(args.out or Path(args.run[0]) / f"analysis.{args.format}")
    phases = ["test", "validation"] if args.phase == "both" else [args.phase]
    for phase in phases:
        reports = [_arm_report(r, phase) for r in args.run]
        ranked = sorted(reports, key=lambda r: (-RANK_KEYS[args.metric](r), r.arm))
        target = out if phase == phases[0] else _sibling(out, phase)
        analysis.emit_report(ranked, target, args.format, kind="population")
        print(f"{phase} ranking ({args.metric}) -> {target}")
        for i, r in enumerate(ranked, 1):
            print(f"  {i}. {r.arm}: n={r.n} max={r.max:.6g} median={r.median:.6g} "
                  f"best_decile={'n/a' if r.best_decile is None else f'{r.best_decile:.6g}'}")
    return EXIT_OK


def cmd_stability(args) -> int:
    _, config, manifests = load_population(args.run)
    workers = args.workers if args.workers is not None else default_workers()
    report = analysis.stability_protocol(args.top, args.repeats, manifests, config,
                                         Path(args.run) / "stability", workers, args.identical_seeds)
    out = Path(args.out or Path(args.run) / f"stability.{args.format}")
    analysis.emit_report([report], out, args.format, meta={"env": config.env_id})
    print(f"stability ({report.k} x {report.m}) -> {out}")
    print(f"  mean={report.mean_of_means:.6g} std={report.mean_of_stds:.6g} rsd={report.rsd_abs:.4g}"
          + (" (negative mean; rsd uses |mean|)" if report.negative_mean else ""))
    for spec_id, row in zip(report.spec_ids, report.grid):
        print(f"  {spec_id}: " + " ".join(f"{x:.6g}" for x in row))
    return EXIT_OK


def cmd_compare(args) -> int:
    arms = []
    for path in args.stability:
        _, rows, meta = analysis.load_report_with_meta(path)
        env = meta.get("env", "env")
        arms.extend(analysis.ArmSummary.from_reports(env, r) for r in rows)
    deciles = {}
    for path in args.population or ():
        _, rows, meta = analysis.load_report_with_meta(path)
        for r in rows:
            deciles[(r.arm, meta.get("env", "env"))] = r.best_decile
    arms = [analysis.ArmSummary(a.arm, a.env, a.mean, a.rsd, deciles.get((a.arm, a.env))) for a in arms]
    result = analysis.compare_strategies(arms)
    doc = {"ranking": result.ranking, "factors": result.rows()}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    _print_json(doc)
    return EXIT_OK


def _manifest_for(run_dir, spec_id: str | None) -> RunManifest:
    _, _, manifests = load_population(run_dir)
    if spec_id is None:
        selected = Path(run_dir) / "selected.json"
        if selected.exists():
            spec_id = json.loads(selected.read_text())["spec_id"]
        else:
            return select(manifests)
    for m in manifests:
        if m.spec.spec_id == spec_id:
            return m
    raise UsageError(f"no spec {spec_id!r} in {run_dir}")


def cmd_infer_bench(args) -> int:
    manifest = _manifest_for(args.run, args.spec_id)
    stats = infer_bench(manifest, args.states, args.parallel_members, args.seed)
    doc = {"spec_id": manifest.spec.spec_id, **stats.to_dict()}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    _print_json(doc)
    return EXIT_OK


def cmd_curves(args) -> int:
    cfg = resolve(args, TRAIN_OPTS)
    specs, doc = read_specs(args.specs)
    spec = specs[0] if args.spec_id is None else next((s for s in specs if s.spec_id == args.spec_id), None)
    if spec is None:
        raise UsageError(f"no spec {args.spec_id!r} in {args.specs}")
    config = _run_config(cfg, doc["env_id"], doc["action_mode"])
    rows = analysis.learning_curves(spec, config, args.phase, args.every)
    analysis.emit_report(rows, args.out, "csv", kind="curves")
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    """sample -> train -> select-test -> analyze for one strategy arm."""
    cfg = resolve(args, SAMPLE_OPTS + TRAIN_OPTS)
    out = Path(args.out or cfg["_file"].get("out") or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    specs = _sample_specs(cfg)
    write_specs(out / "specs.json", specs, cfg["env"], cfg["action_mode"],
                {"command": "sweep", "seed": int(cfg["seed"]), "beta": format_beta(cfg["beta"])})
    specs, doc = read_specs(out / "specs.json")
    code, manifests = _train(specs, doc, cfg, str(out / "run"))
    if not any(m.ok for m in manifests):
        return code
    chosen = select_and_test(manifests)
    print(f"selected {chosen.spec.spec_id}: validation R={chosen.validation_R:.6g} test R={chosen.test.R:.6g}")
    report = analysis.population_report(manifests, "test")
    analysis.emit_report([report], out / "analysis.csv", "csv")
    print(f"population report -> {out / 'analysis.csv'}")
    return code


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensemblerl", description="Train, select and analyse ensembles of RL agents.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def config_flag(p):
        p.add_argument("--config", help="YAML or JSON file with default option values (flags override it)")

    p = sub.add_parser("sample", help="sample a population of ensemble specs")
    config_flag(p)
    _add(p, SAMPLE_OPTS)
    p.add_argument("-o", "--out", help="output spec file (default: specs.json)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train and validate every spec (resumable)")
    config_flag(p)
    p.add_argument("--specs", help="spec file written by 'sample'")
    p.add_argument("--out", help="run directory (default: runs/<population-id>)")
    p.add_argument("--population-id", help="population name used for the default run directory "
                   "(default: the spec file name without extension)")
    _add(p, TRAIN_OPTS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select-test", help="select the best ensemble on validation and test it once")
    p.add_argument("--run", required=True, help="run directory written by 'train'")
    p.set_defaults(func=cmd_select_test)

    p = sub.add_parser("analyze", help="population statistics and best-decile ranking")
    p.add_argument("--run", required=True, nargs="+", help="one run directory per strategy arm")
    p.add_argument("--metric", choices=tuple(RANK_KEYS), default="decile", help="ranking key (default: decile)")
    p.add_argument("--phase", choices=("test", "validation", "both"), default="both",
                   help="scores to summarise; 'both' ranks on test and also writes the validation table")
    p.add_argument("--out", help="report path (default: <run>/analysis.<format>)")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format (default: csv)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("stability", help="re-run the top specs with fresh seeds and report mean/std/RSD")
    p.add_argument("--run", required=True, help="run directory written by 'train'")
    p.add_argument("--top", type=int, default=3, help="number of best specs by validation R (default: 3)")
    p.add_argument("--repeats", type=int, default=4, help="fresh-seed re-runs per spec (default: 4)")
    p.add_argument("--workers", type=int, help="worker processes (default: $ENSEMBLERL_WORKERS or CPU count)")
    p.add_argument("--identical-seeds", action="store_true", help="debug: reuse the original member seeds")
    p.add_argument("--out", help="report path (default: <run>/stability.<format>)")
    p.add_argument("--format", choices=("csv", "json"), default="json", help="report format (default: json)")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("compare", help="rank strategy arms and compute score/stability factors")
    p.add_argument("--stability", required=True, nargs="+", help="JSON stability reports, one per arm and env")
    p.add_argument("--population", nargs="*", help="JSON population reports supplying best deciles")
    p.add_argument("--out", help="write the comparison as JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("infer-bench", help="per-state inference latency of one ensemble")
    p.add_argument("--run", required=True, help="run directory written by 'train'")
    p.add_argument("--spec-id", help="ensemble to benchmark (default: the selected one)")
    p.add_argument("--states", type=int, default=10000, help="number of sequential states (default: 10000)")
    p.add_argument("--parallel-members", action="store_true", help="query members on a thread pool")
    p.add_argument("--seed", type=int, default=0, help="seed for the random states (default: 0)")
    p.add_argument("--out", help="write the latency report as JSON")
    p.set_defaults(func=cmd_infer_bench)

    p = sub.add_parser("curves", help="per-episode scores of each member and the ensemble (long-form CSV)")
    config_flag(p)
    p.add_argument("--specs", required=True, help="spec file written by 'sample'")
    p.add_argument("--spec-id", help="spec to trace (default: the first)")
    p.add_argument("--phase", choices=("train", "validation"), default="validation",
                   help="phase used for the per-episode scores (default: validation)")
    p.add_argument("--every", type=int, default=1, help="score every N episodes (default: 1)")
    p.add_argument("--out", required=True, help="output CSV path")
    _add(p, TRAIN_OPTS)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("sweep", help="sample, train, select-test and analyze one strategy arm")
    config_flag(p)
    _add(p, SAMPLE_OPTS)
    _add(p, TRAIN_OPTS)
    p.add_argument("--out", help="output directory (default: sweep)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EnsembleRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
