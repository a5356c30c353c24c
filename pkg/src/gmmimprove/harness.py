"""Experiment orchestration: demos, fitting, optimization runs, the online baseline and reports.

Every artifact is plain JSON, JSON-lines or CSV.  Runs are deterministic given
the config: the demo seed, the fit seed, the degrade seed and the run seeds
fully determine the observation logs.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np

from .engine import STREAM_REPORT, STREAM_TRAIN, RolloutConfig, episode_seed, evaluate_h, run_episodes
from .errors import ConfigError, GmmImproveError
from .gmm import EmConfig, GmmPolicy, fit_em, load_model, read_trajectories, save_model, write_trajectories
from .surrogate import OptimizerConfig, optimize
from .tasks import DEGRADE_SEED, TaskSpec, degrade, generate_demos, load_task, reset
from .updates import MODALITY_ALIASES, UpdateSpec, integrate, parse_modalities

log = logging.getLogger(__name__)

PRODUCER = "gmmimprove 0.1.0"
SUCCESS_TARGET = 0.8


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``task`` is a preset name or a path to a task JSON file.  ``model`` and
    ``demos`` are optional inputs; when neither is given the demonstrations
    are generated from ``demo_seed`` and fitted in memory.
    """

    task: str = "slide"
    k: int = 5
    modality: str = "eig"
    weight_bound: float = 0.1
    mean_bound: float = 0.05
    cov_bound: float = 0.1
    epsilon: float = 1e-3
    j: int = 8
    budget: int = 500
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval_episodes: int = 50
    n_demos: int = 10
    demo_seed: int = 3
    noise_std: float = 0.01
    fit_seed: int = 0
    degrade_severity: float = 0.3
    degrade_seed: int = DEGRADE_SEED
    online_max_iter: int = 20
    demos: str | None = None
    model: str | None = None
    out: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.j < 1 or self.budget < self.j:
            raise ConfigError(f"budget {self.budget} must be at least j={self.j}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.degrade_severity < 0:
            raise ConfigError("degrade_severity must be non-negative")
        try:
            self.update_spec(self.k)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "seeds" in data:
            data["seeds"] = [int(s) for s in data["seeds"]]
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def update_spec(self, k: int, dim_s: int = 3) -> UpdateSpec:
        return UpdateSpec(parse_modalities(self.modality), k=k, dim_s=dim_s,
                          weight_bound=self.weight_bound, mean_bound=self.mean_bound,
                          cov_bound=self.cov_bound, epsilon=self.epsilon)

    def task_spec(self) -> TaskSpec:
        try:
            return load_task(self.task)
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cannot load task {self.task!r}: {exc}") from exc

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(j=self.j)


# ---------------------------------------------------------------------------
# Demos and fitting


def cmd_gen_demos(task: str, n: int, seed: int, out, noise_std: float = 0.01) -> Path:
    """Write ``n`` scripted demonstrations; ``n = 0`` gives a header-only file."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    spec = load_task(task)
    demos = generate_demos(spec, n, seed, noise_std)
    header = {"task_id": spec.task_id, "n": n, "seed": seed, "noise_std": noise_std,
              "producer": PRODUCER}
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(out, demos, header)
    return out


def cmd_fit(demos, k: int, seed: int, out) -> GmmPolicy:
    header, trajs = read_trajectories(demos)
    if not trajs:
        raise ConfigError(f"no trajectories in {demos}")
    policy = fit_em(trajs, k, seed)
    policy = policy.replace(meta=dict(policy.meta, task_id=header.get("task_id"),
                                      created=PRODUCER))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(policy, out)
    return policy


def _demos_for(config: ExperimentConfig, spec: TaskSpec) -> list:
    if config.demos:
        return read_trajectories(config.demos)[1]
    return generate_demos(spec, config.n_demos, config.demo_seed, config.noise_std)


def initial_policy(config: ExperimentConfig, spec: TaskSpec, demos=None) -> GmmPolicy:
    """The (degraded) policy an experiment starts from."""
    if config.model:
        policy = load_model(config.model)
    else:
        demos = demos if demos is not None else _demos_for(config, spec)
        policy = fit_em(demos, config.k, config.fit_seed)
    return degrade(policy, config.degrade_severity, config.degrade_seed)


def reporting_seeds(seed: int, n: int) -> list:
    """Episode seeds of the reporting evaluation; shared by every evaluation of one run."""
    return [episode_seed(seed, STREAM_REPORT, i) for i in range(n)]


def reporting_success(policy: GmmPolicy, env_factory, seeds, rollout: RolloutConfig) -> float:
    results = run_episodes(policy, env_factory, seeds, rollout)
    return sum(r for _, r in results) / len(seeds)


def first_reaching(curve, target: float = SUCCESS_TARGET):
    """Episode index of the first curve point at or above ``target``."""
    for episode, rate in curve:
        if rate >= target:
            return episode
    return None


# ---------------------------------------------------------------------------
# Optimization runs


def _run_name(config: ExperimentConfig, spec: TaskSpec, kind: str) -> str:
    return f"{spec.task_id}_{config.modality}_{kind}"


def run_optimize_seed(config: ExperimentConfig, spec: TaskSpec, policy: GmmPolicy, seed: int,
                      log_path) -> dict:
    rollout = config.rollout_config()
    factory = functools.partial(reset, spec)
    upd_spec = config.update_spec(policy.k, policy.dim_s)
    report_seeds = reporting_seeds(seed, config.eval_episodes)
    initial = reporting_success(policy, factory, report_seeds, rollout)
    curve = [[0, initial]]
    changes = []

    def objective(update, idx):
        return evaluate_h(policy, update, factory, rollout, seed, idx)

    def on_incumbent(incumbent, episode):
        rate = reporting_success(integrate(policy, incumbent.update), factory, report_seeds, rollout)
        curve.append([episode, rate])
        changes.append({"episode": episode, "index": incumbent.found_at,
                        "train_return": incumbent.mean_return, "report_success": rate})
        log.info("seed %d: incumbent at episode %d, train %.3f, report %.3f",
                 seed, episode, incumbent.mean_return, rate)

    with open(log_path, "w") as fh:
        fh.write(json.dumps({"event": "run", "task": spec.task_id, "seed": seed,
                             "spec": upd_spec.to_dict(), "j": config.j,
                             "budget": config.budget}) + "\n")
        incumbent, history = optimize(upd_spec, objective, config.budget, config.j, seed=seed,
                                      config=OptimizerConfig(), on_incumbent=on_incumbent,
                                      log_file=fh)
    return {
        "seed": seed,
        "initial_success": initial,
        "final_success": curve[-1][1],
        "episodes_to_80": first_reaching(curve),
        "curve": curve,
        "n_observations": len(history.observations),
        "episodes": history.episodes,
        "incumbent_changes": changes,
        "final_update": incumbent.update.values.tolist(),
        "log": Path(log_path).name,
    }


def _aggregate(seed_results: list) -> dict:
    reached = [r["episodes_to_80"] for r in seed_results if r["episodes_to_80"] is not None]
    return {
        "initial_success": float(np.mean([r["initial_success"] for r in seed_results])),
        "final_success": float(np.mean([r["final_success"] for r in seed_results])),
        "episodes_to_80": float(np.mean(reached)) if reached else None,
        "achieved_fraction": len(reached) / len(seed_results),
    }


def _report(kind: str, config: ExperimentConfig, spec: TaskSpec, seed_results: list) -> dict:
    return {
        "kind": kind,
        "task": spec.task_id,
        "modality": config.modality if kind == "optimize" else "online",
        "k": config.k,
        "j": config.j,
        "budget": config.budget,
        "eval_episodes": config.eval_episodes,
        "config": config.to_dict(),
        "seeds": seed_results,
        "summary": _aggregate(seed_results),
    }


def cmd_optimize(config: ExperimentConfig) -> dict:
    spec = config.task_spec()
    policy = initial_policy(config, spec)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    name = _run_name(config, spec, "optimize")
    results = [run_optimize_seed(config, spec, policy, s, out / f"{name}_seed{s}.jsonl")
               for s in config.seeds]
    report = _report("optimize", config, spec, results)
    validate_report(report)
    (out / f"{name}.json").write_text(json.dumps(report, indent=1) + "\n")
    return report


# ---------------------------------------------------------------------------
# Online-GMM baseline


def run_online_seed(config: ExperimentConfig, spec: TaskSpec, demos: list, policy: GmmPolicy,
                    seed: int) -> dict:
    """Roll out j episodes, add the successes to the dataset, refit warm-started; repeat."""
    rollout = config.rollout_config()
    factory = functools.partial(reset, spec)
    report_seeds = reporting_seeds(seed, config.eval_episodes)
    em_config = EmConfig(max_iter=config.online_max_iter, n_restarts=1)
    initial = reporting_success(policy, factory, report_seeds, rollout)
    curve = [[0, initial]]
    collected = []
    failed_refits = 0
    for rnd in range(config.budget // config.j):
        seeds = [episode_seed(seed, STREAM_TRAIN, rnd, e) for e in range(config.j)]
        results = run_episodes(policy, factory, seeds, rollout, record=True)
        collected.extend(traj for traj, r in results if r == 1)
        try:
            policy = fit_em(list(demos) + collected, policy.k, seed, em_config, init=policy)
        except GmmImproveError as exc:
            failed_refits += 1
            log.warning("seed %d round %d: refit failed (%s); keeping the current policy", seed, rnd, exc)
        curve.append([(rnd + 1) * config.j, reporting_success(policy, factory, report_seeds, rollout)])
    return {
        "seed": seed,
        "initial_success": initial,
        "final_success": curve[-1][1],
        "episodes_to_80": first_reaching(curve),
        "curve": curve,
        "n_observations": config.budget // config.j,
        "episodes": (config.budget // config.j) * config.j,
        "collected_successes": len(collected),
        "failed_refits": failed_refits,
    }


def cmd_baseline_online(config: ExperimentConfig) -> dict:
    spec = config.task_spec()
    demos = _demos_for(config, spec)
    policy = initial_policy(config, spec, demos)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    results = [run_online_seed(config, spec, demos, policy, s) for s in config.seeds]
    report = _report("baseline-online", config, spec, results)
    validate_report(report)
    (out / f"{spec.task_id}_online.json").write_text(json.dumps(report, indent=1) + "\n")
    return report


# ---------------------------------------------------------------------------
# Report schema and merging

_CURVE = {"type": "array", "minItems": 1,
          "items": {"type": "array", "minItems": 2, "maxItems": 2,
                    "prefixItems": [{"type": "integer", "minimum": 0},
                                    {"type": "number", "minimum": 0, "maximum": 1}]}}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["kind", "task", "modality", "k", "j", "budget", "eval_episodes", "seeds", "summary"],
    "properties": {
        "kind": {"enum": ["optimize", "baseline-online"]},
        "task": {"type": "string"},
        "modality": {"type": "string"},
        "k": {"type": "integer", "minimum": 1},
        "j": {"type": "integer", "minimum": 1},
        "budget": {"type": "integer", "minimum": 1},
        "eval_episodes": {"type": "integer", "minimum": 1},
        "seeds": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "required": ["seed", "initial_success", "final_success", "episodes_to_80", "curve"],
                "properties": {
                    "seed": {"type": "integer"},
                    "initial_success": {"type": "number", "minimum": 0, "maximum": 1},
                    "final_success": {"type": "number", "minimum": 0, "maximum": 1},
                    "episodes_to_80": {"type": ["integer", "null"], "minimum": 0},
                    "curve": _CURVE,
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["initial_success", "final_success", "episodes_to_80", "achieved_fraction"],
            "properties": {
                "episodes_to_80": {"type": ["number", "null"]},
                "achieved_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
}

CSV_COLUMNS = ("kind", "task", "modality", "episode", "mean_success", "n_seeds")


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid run report: {exc.message}") from exc


def step_value(curve, episode: int) -> float:
    """Value of a step curve at ``episode`` (the last point at or before it)."""
    value = curve[0][1]
    for ep, rate in curve:
        if ep > episode:
            break
        value = rate
    return value


def mean_curve(curves: list) -> list:
    """Pointwise mean of step curves on the union of their change points."""
    grid = sorted({ep for c in curves for ep, _ in c})
    return [[ep, float(np.mean([step_value(c, ep) for c in curves]))] for ep in grid]


def merge_reports(reports: list) -> tuple[list, list]:
    """Group reports by (kind, task, modality); returns ``(csv_rows, summary_rows)``."""
    if not reports:
        raise ConfigError("report needs at least one run report")
    groups: dict = {}
    for rep in reports:
        validate_report(rep)
        groups.setdefault((rep["kind"], rep["task"], rep["modality"]), []).append(rep)
    rows, summary = [], []
    for (kind, task, modality), reps in sorted(groups.items()):
        seed_results = [s for rep in reps for s in rep["seeds"]]
        for ep, value in mean_curve([s["curve"] for s in seed_results]):
            rows.append({"kind": kind, "task": task, "modality": modality, "episode": ep,
                         "mean_success": value, "n_seeds": len(seed_results)})
        summary.append({"kind": kind, "task": task, "modality": modality, "k": reps[0]["k"],
                        "n_seeds": len(seed_results), **_aggregate(seed_results)})
    return rows, summary


def cmd_report(paths: list, out) -> dict:
    if not paths:
        raise ConfigError("usage: report needs at least one run report file")
    reports = []
    for p in paths:
        try:
            reports.append(json.loads(Path(p).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {p}: {exc}") from exc
    rows, summary = merge_reports(reports)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    from .plotting import plot_curves
    plot_curves(rows, out / "curves.png")
    return {"curves": rows, "summary": summary}


# Re-exported for the CLI's --modality choices.
MODALITY_CHOICES = tuple(MODALITY_ALIASES)
