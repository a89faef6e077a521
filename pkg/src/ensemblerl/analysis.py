"""Population statistics, the top-k stability protocol and report files.

Report schemas (CSV column order is fixed; JSON carries the same fields):

* population: ``arm,beta,mode,rule,n,max,q1,median,q3,best_decile``
* stability:  ``arm,beta,mode,rule,k,m,mean_of_means,mean_of_stds,rsd,rsd_abs,negative_mean``
* curves:     ``episode,agent_id,R``
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agents import Trainer, agent_for_env, evaluate
from .ensemble import format_beta, parse_beta, weights_from_scores
from .errors import (ComparabilityError, ConfigurationError, ContractViolation,
                     InsufficientDataError, UndefinedMetricError)
from .pipeline import RunConfig, RunManifest, ensemble_policy, evaluate_test_phase, run_population
from .search import EnsembleSpec
from .seeding import derive_seed

POPULATION_COLUMNS = ["arm", "beta", "mode", "rule", "n", "max", "q1", "median", "q3", "best_decile"]
STABILITY_COLUMNS = ["arm", "beta", "mode", "rule", "k", "m", "mean_of_means", "mean_of_stds",
                     "rsd", "rsd_abs", "negative_mean"]
CURVE_COLUMNS = ["episode", "agent_id", "R"]


def best_decile(scores: Sequence[float]) -> float:
    """The ceil(0.1 * N)-th largest score (nearest-rank 90th percentile)."""
    if len(scores) < 10:
        raise InsufficientDataError(f"best decile needs >= 10 scores, got {len(scores)}")
    ordered = sorted((float(s) for s in scores), reverse=True)
    return ordered[math.ceil(0.1 * len(ordered)) - 1]


def sample_std(values: Sequence[float]) -> float:
    if len(values) < 2:
        raise InsufficientDataError("std needs >= 2 values")
    return statistics.stdev(float(v) for v in values)


def rsd(values: Sequence[float]) -> float:
    """Sample standard deviation (n - 1) over the mean, sign kept."""
    if len(values) < 2:
        raise InsufficientDataError("rsd needs >= 2 values")
    mean = statistics.fmean(values)
    if mean == 0:
        raise UndefinedMetricError("rsd is undefined for a zero mean")
    return sample_std(values) / mean


def _label(mode: str, beta: float, rule: str) -> str:
    short = {"homogeneous": "homo", "heterogeneous": "hetero"}.get(mode, mode)
    return f"{short}-b{format_beta(beta)}-{rule}"


@dataclass(frozen=True)
class PopulationReport:
    arm: str
    beta: float
    mode: str
    rule: str
    n: int
    max: float
    q1: float
    median: float
    q3: float
    best_decile: float | None
    values: tuple[float, ...] = field(default=(), compare=False)

    @classmethod
    def from_values(cls, values: Sequence[float], mode: str, beta, rule: str,
                    arm: str | None = None) -> "PopulationReport":
        v = [float(x) for x in values]
        if not v:
            raise InsufficientDataError("population report needs at least one value")
        beta = parse_beta(beta)
        q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
        decile = best_decile(v) if len(v) >= 10 else None
        return cls(arm or _label(mode, beta, rule), beta, mode, rule, len(v), max(v), q1, med, q3,
                   decile, tuple(v))


@dataclass(frozen=True)
class StabilityReport:
    arm: str
    beta: float
    mode: str
    rule: str
    k: int
    m: int
    mean_of_means: float
    mean_of_stds: float
    rsd: float
    rsd_abs: float
    negative_mean: bool
    grid: tuple[tuple[float, ...], ...] = field(default=(), compare=False)
    spec_ids: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def from_grid(cls, grid: Sequence[Sequence[float]], mode: str = "", beta=0.0, rule: str = "",
                  arm: str | None = None, spec_ids: Sequence[str] = ()) -> "StabilityReport":
        """``grid[i][j]`` is the test score of the i-th best spec on its j-th re-run."""
        rows = [tuple(float(x) for x in row) for row in grid]
        if not rows:
            raise InsufficientDataError("empty stability grid")
        m = len(rows[0])
        if m < 2 or any(len(r) != m for r in rows):
            raise InsufficientDataError("every spec needs the same number (>= 2) of repeats")
        mean_of_means = statistics.fmean(statistics.fmean(r) for r in rows)
        mean_of_stds = statistics.fmean(sample_std(r) for r in rows)
        if mean_of_means == 0:
            raise UndefinedMetricError("rsd is undefined for a zero mean")
        beta = parse_beta(beta)
        signed = mean_of_stds / mean_of_means
        return cls(arm or _label(mode, beta, rule), beta, mode, rule, len(rows), m, mean_of_means,
                   mean_of_stds, signed, abs(signed), mean_of_means < 0, tuple(rows), tuple(spec_ids))


# --------------------------------------------------------------------------
# population scores and the stability protocol


def population_scores(manifests: Sequence[RunManifest], phase: str = "test") -> list[float]:
    """Ensemble scores of every successful manifest.

    ``phase="test"`` re-runs each ensemble on the test phase for analysis
    only: the scores are returned, not written into the manifests.
    """
    ok = [m for m in manifests if m.ok]
    if phase == "validation":
        return [m.validation_R for m in ok]
    if phase == "test":
        return [evaluate_test_phase(m).R for m in ok]
    raise ConfigurationError(f"unknown phase {phase!r}")


def population_report(manifests: Sequence[RunManifest], phase: str = "test",
                      arm: str | None = None) -> PopulationReport:
    ok = [m for m in manifests if m.ok]
    if not ok:
        raise InsufficientDataError("no successful manifests")
    spec = ok[0].spec
    return PopulationReport.from_values(population_scores(ok, phase), spec.mode, spec.beta, spec.rule, arm)


def rerun_specs(spec: EnsembleSpec, repeats: int, identical_seeds: bool = False) -> list[EnsembleSpec]:
    """Copies of ``spec`` with fresh member seeds ``derive_seed(seed, 1000 + r)``."""
    out = []
    for r in range(repeats):
        seeds = spec.member_seeds if identical_seeds else [derive_seed(s, 1000 + r) for s in spec.member_seeds]
        out.append(spec.with_seeds(seeds, f"{spec.spec_id}-r{r}"))
    return out


def stability_protocol(top_k: int, repeats: int, manifests: Sequence[RunManifest], config: RunConfig,
                       out_dir, workers: int = 1, identical_seeds: bool = False) -> StabilityReport:
    """Re-train the top-k specs (by ensemble validation R) ``repeats`` times and test each run."""
    if repeats < 2:
        raise ConfigurationError("repeats must be >= 2")
    ok = sorted((m for m in manifests if m.ok), key=lambda m: (-m.validation_R, m.spec.spec_id))
    if len(ok) < top_k:
        raise InsufficientDataError(f"need {top_k} successful manifests, have {len(ok)}")
    top = ok[:top_k]
    reruns = [rerun_specs(m.spec, repeats, identical_seeds) for m in top]
    flat = [s for group in reruns for s in group]
    results = {m.spec.spec_id: m for m in run_population(flat, config, out_dir, workers)}
    grid = []
    for group in reruns:
        row = []
        for s in group:
            m = results[s.spec_id]
            if not m.ok:
                raise ContractViolation(f"stability re-run {s.spec_id} failed")
            if m.test is None:
                m.test = evaluate_test_phase(m, config)
                m.save()
            row.append(m.test.R)
        grid.append(row)
    spec = top[0].spec
    return StabilityReport.from_grid(grid, spec.mode, spec.beta, spec.rule,
                                     spec_ids=[m.spec.spec_id for m in top])


# --------------------------------------------------------------------------
# comparing strategy arms


@dataclass(frozen=True)
class ArmSummary:
    arm: str
    env: str
    mean: float
    rsd: float  # magnitude
    best_decile: float | None = None

    @classmethod
    def from_reports(cls, env: str, stability: StabilityReport,
                     population: PopulationReport | None = None) -> "ArmSummary":
        return cls(stability.arm, env, stability.mean_of_means, stability.rsd_abs,
                   population.best_decile if population else None)


def score_factor(mean_a: float, mean_b: float) -> float:
    """How many times better A's mean is than B's (ratio inverted for negative rewards)."""
    if mean_a < 0 and mean_b < 0:
        return mean_b / mean_a
    if mean_b == 0:
        raise UndefinedMetricError("score factor undefined for a zero baseline mean")
    return mean_a / mean_b


def stability_factor(rsd_a: float, rsd_b: float) -> float:
    if rsd_a == 0:
        raise UndefinedMetricError("stability factor undefined for a zero RSD")
    return abs(rsd_b) / abs(rsd_a)


@dataclass
class Comparison:
    ranking: dict[str, list[str]]  # env -> arms, best first
    factors: dict[tuple[str, str], dict[str, dict[str, float]]]  # (A, B) -> env -> factors
    medians: dict[tuple[str, str], dict[str, float]]

    def rows(self) -> list[dict]:
        out = []
        for (a, b), per_env in self.factors.items():
            for env, f in per_env.items():
                out.append({"arm_a": a, "arm_b": b, "env": env, **f})
            out.append({"arm_a": a, "arm_b": b, "env": "median", **self.medians[(a, b)]})
        return out


def compare_strategies(arms: Sequence[ArmSummary]) -> Comparison:
    """Rank arms per environment and compute pairwise score/stability factors.

    Ranking uses the best decile when every arm has one, else the mean. With
    several environments the per-pair factors are summarised by their median.
    """
    labels = sorted({a.arm for a in arms})
    if len(labels) < 2:
        raise ComparabilityError("need at least two strategy arms")
    envs_of = {lab: {a.env for a in arms if a.arm == lab} for lab in labels}
    env_sets = {frozenset(v) for v in envs_of.values()}
    if len(env_sets) != 1:
        raise ComparabilityError("strategy arms were not run on the same environments")
    envs = sorted(next(iter(env_sets)))
    table = {(a.arm, a.env): a for a in arms}
    if len(table) != len(arms):
        raise ComparabilityError("duplicate (arm, env) entries")

    ranking = {}
    for env in envs:
        entries = [table[(lab, env)] for lab in labels]
        use_decile = all(e.best_decile is not None for e in entries)
        key = (lambda e: -e.best_decile) if use_decile else (lambda e: -e.mean)
        ranking[env] = [e.arm for e in sorted(entries, key=lambda e: (key(e), e.arm))]

    factors, medians = {}, {}
    for a, b in permutations(labels, 2):
        per_env = {}
        for env in envs:
            ea, eb = table[(a, env)], table[(b, env)]
            per_env[env] = {"score_factor": score_factor(ea.mean, eb.mean),
                            "stability_factor": stability_factor(ea.rsd, eb.rsd)}
        factors[(a, b)] = per_env
        medians[(a, b)] = {k: statistics.median(f[k] for f in per_env.values())
                           for k in ("score_factor", "stability_factor")}
    return Comparison(ranking, factors, medians)


# --------------------------------------------------------------------------
# learning curves


def learning_curves(spec: EnsembleSpec, config: RunConfig, phase: str = "validation",
                    eval_every: int = 1) -> list[tuple[int, str, float]]:
    """Train the members in lockstep and score each member and the ensemble after every episode.

    Rows are ``(episode, agent_id, R)`` with agent ids ``member-<j>`` and
    ``ensemble``; the ensemble weights are recomputed from the members'
    current scores each time.
    """
    env_cfg = config.env_config(phase)
    trainers = []
    for j in range(spec.size):
        agent = agent_for_env(spec.hyperparams(j), config.env_config("train"), spec.member_seeds[j],
                              config.training)
        trainers.append(Trainer(agent, config.env_config("train"), config.episodes, spec.member_seeds[j]))
    rows = []
    for ep in range(1, config.episodes + 1):
        for tr in trainers:
            tr.run_episode()
        if ep % eval_every and ep != config.episodes:
            continue
        scores = [evaluate(tr.agent, env_cfg, repeats=config.eval_repeats).R for tr in trainers]
        rows.extend((ep, f"member-{j}", r) for j, r in enumerate(scores))
        policy = ensemble_policy([tr.agent for tr in trainers], weights_from_scores(scores, spec.beta), spec.rule)
        rows.append((ep, "ensemble", evaluate(policy, env_cfg, repeats=config.eval_repeats).R))
    return rows


# --------------------------------------------------------------------------
# report files


def _kind_of(rows: Sequence) -> str:
    if not rows:
        raise ContractViolation("cannot infer the kind of an empty report")
    first = rows[0]
    if isinstance(first, PopulationReport):
        return "population"
    if isinstance(first, StabilityReport):
        return "stability"
    return "curves"


COLUMNS = {"population": POPULATION_COLUMNS, "stability": STABILITY_COLUMNS, "curves": CURVE_COLUMNS}
ROW_TYPES = {"population": PopulationReport, "stability": StabilityReport}


def _row_dict(row, kind: str) -> dict:
    if kind == "curves":
        return dict(zip(CURVE_COLUMNS, row))
    d = {c: getattr(row, c) for c in COLUMNS[kind]}
    d["beta"] = format_beta(d["beta"])
    return d


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(rows: Sequence, path, fmt: str = "csv", kind: str | None = None,
                meta: dict | None = None) -> Path:
    """Write report rows as CSV or JSON. ``kind`` is required only for empty reports.

    ``meta`` (JSON only) is stored next to the rows, e.g. the environment id.
    """
    kind = kind or _kind_of(rows)
    if kind not in COLUMNS:
        raise ConfigurationError(f"unknown report kind {kind!r}")
    path = Path(path)
    dicts = [_row_dict(r, kind) for r in rows]
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(COLUMNS[kind])
                for d in dicts:
                    w.writerow([_cell(d[c]) for c in COLUMNS[kind]])
        elif fmt == "json":
            for d, r in zip(dicts, rows):
                if kind == "population":
                    d["values"] = list(r.values)
                elif kind == "stability":
                    d["grid"] = [list(g) for g in r.grid]
                    d["spec_ids"] = list(r.spec_ids)
            doc = {"kind": kind, "columns": COLUMNS[kind], "rows": dicts, "meta": dict(meta or {})}
            path.write_text(json.dumps(doc, indent=2) + "\n")
        else:
            raise ConfigurationError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


_INT_FIELDS = {"n", "k", "m", "episode"}
_FLOAT_FIELDS = {"max", "q1", "median", "q3", "best_decile", "mean_of_means", "mean_of_stds",
                 "rsd", "rsd_abs", "R"}


def _parse_cell(col: str, text):
    if col == "beta":
        return parse_beta(text)
    if col == "negative_mean":
        return text if isinstance(text, bool) else text == "True"
    if text == "" or text is None:
        return None
    if col in _INT_FIELDS:
        return int(text)
    if col in _FLOAT_FIELDS:
        return float(text)
    return text


def load_report(path, fmt: str | None = None) -> tuple[str, list]:
    """Inverse of :func:`emit_report`; returns ``(kind, rows)``."""
    kind, rows, _ = load_report_with_meta(path, fmt)
    return kind, rows


def load_report_with_meta(path, fmt: str | None = None) -> tuple[str, list, dict]:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    meta: dict = {}
    if fmt == "json":
        doc = json.loads(path.read_text())
        kind, columns, raw = doc["kind"], doc["columns"], doc["rows"]
        meta = doc.get("meta", {})
    elif fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            columns = next(reader)
            raw = [dict(zip(columns, r)) for r in reader]
        kind = next((k for k, cols in COLUMNS.items() if cols == columns), None)
        if kind is None:
            raise ConfigurationError(f"unrecognised report columns {columns}")
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")
    rows = []
    for d in raw:
        values = {c: _parse_cell(c, d[c]) for c in columns}
        if kind == "curves":
            rows.append((values["episode"], values["agent_id"], values["R"]))
            continue
        if kind == "population" and "values" in d:
            values["values"] = tuple(d["values"])
        if kind == "stability" and "grid" in d:
            values["grid"] = tuple(tuple(g) for g in d["grid"])
            values["spec_ids"] = tuple(d["spec_ids"])
        rows.append(ROW_TYPES[kind](**values))
    return kind, rows, meta


def ranking_table(reports: Iterable[PopulationReport]) -> list[PopulationReport]:
    """Population reports sorted by best decile (then max), best first."""
    return sorted(reports, key=lambda r: (-(r.best_decile if r.best_decile is not None else -math.inf),
                                          -r.max, r.arm))
