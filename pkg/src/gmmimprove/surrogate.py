"""Random-forest Bayesian optimization over a bounded update space.

The optimizer minimizes the cost ``1 - mean_return``.  The surrogate is a
random forest whose per-tree predictions give a mean and a spread; candidates
are ranked by expected improvement, optionally computed on log-transformed
per-tree costs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc
from sklearn.ensemble import RandomForestRegressor

from .updates import UpdateSpec, UpdateVector

LOG_COST_FLOOR = 1e-3
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Stream tags for seed derivation; see ``derive_rng``.
_STREAM_INIT, _STREAM_PROPOSE, _STREAM_FOREST = 0, 1, 2


def derive_seed_sequence(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``, insensitive to call order."""
    return np.random.default_rng(derive_seed_sequence(seed, *key))


@dataclass
class Observation:
    """One evaluated update: the mean of ``episodes`` binary rewards."""

    update: UpdateVector
    mean_return: float
    episodes: int
    run_index: int
    rejected: bool = False

    def __post_init__(self):
        self.mean_return = float(self.mean_return)
        if not 0.0 <= self.mean_return <= 1.0:
            raise ValueError("mean_return must lie in [0, 1]")
        successes = self.mean_return * self.episodes
        if abs(successes - round(successes)) > 1e-9:
            raise ValueError("mean_return must average binary rewards over the episodes")

    @property
    def cost(self) -> float:
        return 1.0 - self.mean_return

    def to_dict(self) -> dict:
        return {"run_index": self.run_index, "update": self.update.to_dict(),
                "mean_return": self.mean_return, "episodes": self.episodes,
                "rejected": self.rejected}

    @classmethod
    def from_dict(cls, data: dict) -> "Observation":
        return cls(UpdateVector.from_dict(data["update"]), data["mean_return"], data["episodes"],
                   data["run_index"], data.get("rejected", False))


@dataclass(frozen=True)
class Incumbent:
    update: UpdateVector
    mean_return: float
    found_at: int


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 40
    min_samples_leaf: int = 1
    feature_subsample: float = 0.8
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 2:
            raise ValueError("the forest needs at least 2 trees to estimate spread")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")


class Surrogate:
    """Fitted forest over update values, predicting cost."""

    def __init__(self, forest: RandomForestRegressor, dim: int, costs: np.ndarray):
        self.forest = forest
        self.dim = dim
        self.costs = costs

    def tree_predictions(self, X) -> np.ndarray:
        """Per-tree cost predictions, shape ``(n_trees, n_points)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"query has dimension {X.shape[1]}, surrogate expects {self.dim}")
        X32 = np.ascontiguousarray(X, dtype=np.float32)
        return np.stack([t.predict(X32, check_input=False) for t in self.forest.estimators_])

    @property
    def best_cost(self) -> float:
        return float(self.costs.min())


def forest_fit(dataset: Sequence[Observation], config: ForestConfig = ForestConfig()) -> Surrogate:
    if not dataset:
        raise ValueError("cannot fit a surrogate to an empty dataset")
    X = np.stack([obs.update.values for obs in dataset])
    y = np.array([obs.cost for obs in dataset])
    forest = RandomForestRegressor(
        n_estimators=config.n_trees,
        min_samples_leaf=config.min_samples_leaf,
        max_features=config.feature_subsample,
        bootstrap=config.bootstrap,
        random_state=config.seed,
        n_jobs=1,
    )
    forest.fit(X, y)
    return Surrogate(forest, X.shape[1], y)


def predict(surrogate: Surrogate, x) -> tuple:
    """Mean and population standard deviation of the per-tree predictions."""
    preds = surrogate.tree_predictions(x)
    mean, std = preds.mean(axis=0), preds.std(axis=0)
    if np.ndim(x) == 1:
        return float(mean[0]), float(std[0])
    return mean, std


def expected_improvement(mean, std, best_cost):
    """Expected improvement below ``best_cost`` of a normal with ``mean`` and ``std``."""
    mean, std = np.asarray(mean, dtype=float), np.asarray(std, dtype=float)
    gap = best_cost - mean
    safe = np.where(std > 0, std, 1.0)
    z = gap / safe
    ei = np.where(std > 0, gap * ndtr(z) + safe * _INV_SQRT_2PI * np.exp(-0.5 * z * z),
                  np.maximum(gap, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def acquisition(surrogate: Surrogate, X, best_cost: float, log_variant: bool = True) -> np.ndarray:
    """Expected improvement of each row of ``X``.

    The log variant maps every per-tree cost through ``log(c + 1e-3)`` before
    taking the cross-tree mean and spread; ``best_cost`` is mapped the same way.
    """
    preds = surrogate.tree_predictions(X)
    if log_variant:
        preds = np.log(np.maximum(preds, 0.0) + LOG_COST_FLOOR)
        best_cost = float(np.log(max(best_cost, 0.0) + LOG_COST_FLOOR))
    return np.atleast_1d(expected_improvement(preds.mean(axis=0), preds.std(axis=0), best_cost))


@dataclass(frozen=True)
class OptimizerConfig:
    n_init: int = 8
    n_uniform: int = 512
    n_local: int = 512
    local_scale: float = 0.1
    log_ei: bool = True
    forest: ForestConfig = ForestConfig()


def initial_design(spec: UpdateSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Latin-hypercube points spread over the update bounds."""
    bounds = spec.bound_vector()
    unit = qmc.LatinHypercube(d=len(bounds), seed=rng).random(n)
    return (2.0 * unit - 1.0) * bounds


def propose(surrogate: Surrogate | None, spec: UpdateSpec, incumbent: Incumbent | None,
            rng: np.random.Generator, n_observed: int = 0,
            config: OptimizerConfig = OptimizerConfig(),
            init_design: np.ndarray | None = None) -> UpdateVector:
    """Next update to evaluate.

    During the first ``config.n_init`` observations this returns design points
    (or uniform draws); afterwards it maximizes the acquisition over uniform
    candidates plus Gaussian perturbations of the incumbent.
    """
    bounds = spec.bound_vector()
    if surrogate is None or n_observed < config.n_init:
        if init_design is not None and n_observed < len(init_design):
            return UpdateVector(spec, init_design[n_observed])
        return UpdateVector(spec, rng.uniform(-bounds, bounds))
    candidates = [rng.uniform(-bounds, bounds, size=(config.n_uniform, len(bounds)))]
    if incumbent is not None and config.n_local > 0:
        noise = rng.normal(0.0, config.local_scale * bounds, size=(config.n_local, len(bounds)))
        candidates.append(np.clip(incumbent.update.values + noise, -bounds, bounds))
    candidates = np.concatenate(candidates)
    best_cost = 1.0 - incumbent.mean_return if incumbent is not None else surrogate.best_cost
    scores = acquisition(surrogate, candidates, best_cost, config.log_ei)
    # argmax returns the first maximizer, i.e. ties go to the lowest index.
    return UpdateVector(spec, candidates[int(np.argmax(scores))])


def update_incumbent(dataset: Sequence[Observation], current: Incumbent | None = None) -> Incumbent | None:
    """Observation with the highest mean return; earlier observations win ties."""
    best = current
    start = 0 if current is None else current.found_at + 1
    for idx in range(start, len(dataset)):
        obs = dataset[idx]
        if best is None or obs.mean_return > best.mean_return:
            best = Incumbent(obs.update, obs.mean_return, idx)
    return best


@dataclass
class History:
    observations: list = field(default_factory=list)
    # Each entry: {"episode", "index", "mean_return"}; episode counts training episodes consumed.
    incumbent_changes: list = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return sum(obs.episodes for obs in self.observations)


def observation_record(obs: Observation) -> dict:
    return {"event": "observation", **obs.to_dict()}


def incumbent_record(change: dict) -> dict:
    return {"event": "incumbent", **change}


def read_log(path) -> History:
    """Rebuild a history from a JSON-lines observation log."""
    hist = History()
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            event = rec.get("event", "observation")
            if event == "observation":
                hist.observations.append(Observation.from_dict(rec))
            elif event == "incumbent":
                hist.incumbent_changes.append(
                    {k: rec[k] for k in ("episode", "index", "mean_return")})
    return hist


Objective = Callable[[UpdateVector, int], Observation]


def optimize(spec: UpdateSpec, objective: Objective, budget: int, j: int, seed: int = 0,
             config: OptimizerConfig = OptimizerConfig(),
             on_incumbent: Callable[[Incumbent, int], None] | None = None,
             log_file=None, resume: History | None = None) -> tuple:
    """Sequential propose/evaluate/refit loop until the episode budget is spent.

    ``objective(update, index)`` must return an Observation over ``j`` episodes.
    ``on_incumbent(incumbent, episode)`` is called on every incumbent change.
    Passing a ``resume`` history replays its observations without re-evaluating.
    Returns ``(incumbent, history)``.
    """
    if j < 1 or budget < j:
        raise ValueError(f"episode budget {budget} is smaller than j={j}")
    n_obs = budget // j
    design = initial_design(spec, config.n_init, derive_rng(seed, _STREAM_INIT))
    history = History()
    incumbent = None
    replay = list(resume.observations) if resume is not None else []

    for idx in range(n_obs):
        if idx < len(replay):
            obs = replay[idx]
        else:
            surrogate = None
            if idx >= config.n_init and history.observations:
                forest_cfg = ForestConfig(
                    n_trees=config.forest.n_trees,
                    min_samples_leaf=config.forest.min_samples_leaf,
                    feature_subsample=config.forest.feature_subsample,
                    bootstrap=config.forest.bootstrap,
                    seed=int(derive_seed_sequence(seed, _STREAM_FOREST, idx).generate_state(1)[0]),
                )
                surrogate = forest_fit(history.observations, forest_cfg)
            rng = derive_rng(seed, _STREAM_PROPOSE, idx)
            update = propose(surrogate, spec, incumbent, rng, idx, config, design)
            obs = objective(update, idx)
            if obs.episodes != j:
                raise ValueError(f"objective returned {obs.episodes} episodes, expected {j}")
        history.observations.append(obs)
        if log_file is not None and idx >= len(replay):
            log_file.write(json.dumps(observation_record(obs)) + "\n")
        new = update_incumbent(history.observations, incumbent)
        if new is not incumbent:
            incumbent = new
            change = {"episode": history.episodes, "index": idx, "mean_return": incumbent.mean_return}
            history.incumbent_changes.append(change)
            if log_file is not None and idx >= len(replay):
                log_file.write(json.dumps(incumbent_record(change)) + "\n")
            if on_incumbent is not None:
                on_incumbent(incumbent, history.episodes)
    return incumbent, history
