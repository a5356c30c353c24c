"""Policy rollouts and the sparse-reward evaluation function.

Episodes integrate ``s <- s + dt * clip(gmr(s))`` with explicit Euler until
the task reports success or ``max_steps`` is reached.  Several episodes are
stepped together so GMR runs on a batch of states; each episode's outcome is
identical to running it alone.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import Rank1RejectedError
from .gmm import GmmPolicy, Trajectory, gmr
from .surrogate import Observation, derive_seed_sequence
from .tasks import EnvInstance, step
from .updates import UpdateVector, integrate

# Stream tags for episode seeds; disjoint from the optimizer's streams.
STREAM_TRAIN, STREAM_REPORT = 10, 11

diagnostics: Counter = Counter()


@dataclass(frozen=True)
class RolloutConfig:
    dt: float = 0.05
    max_steps: int = 400
    v_max: float = 0.5
    j: int = 8
    action_noise: float = 0.0

    def __post_init__(self):
        if min(self.dt, self.v_max) <= 0 or self.max_steps < 1 or self.j < 1:
            raise ValueError("rollout settings must be positive")
        if self.action_noise < 0:
            raise ValueError("action_noise must be non-negative")


def episode_seed(seed: int, *key: int) -> int:
    return int(derive_seed_sequence(seed, *key).generate_state(1)[0])


def clip_speed(v: np.ndarray, v_max: float) -> np.ndarray:
    """Scale rows of ``v`` down so their 2-norm is at most ``v_max``."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.minimum(1.0, v_max / np.maximum(norm, 1e-300))
    return v * scale


def rollout_batch(policy: GmmPolicy, envs: Sequence[EnvInstance], config: RolloutConfig = RolloutConfig(),
                  rngs: Sequence[np.random.Generator] | None = None,
                  record: bool = True) -> list[tuple]:
    """Run one episode per env; returns ``(trajectory or None, reward)`` per env."""
    n, d = len(envs), policy.dim_s
    states = np.stack([np.asarray(env.s, dtype=float) for env in envs])
    rewards = np.array([1 if env.success else 0 for env in envs])
    active = rewards == 0
    length = np.zeros(n, dtype=int)
    if record:
        hist_s = np.zeros((config.max_steps, n, d))
        hist_v = np.zeros((config.max_steps, n, d))
    for t in range(config.max_steps):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        vel = clip_speed(gmr(policy, states[idx]), config.v_max)
        if config.action_noise > 0:
            noise = np.stack([rngs[i].normal(0.0, config.action_noise, d) for i in idx])
            vel = clip_speed(vel + noise, config.v_max)
        new = states[idx] + config.dt * vel
        if record:
            hist_s[t, idx] = states[idx]
            hist_v[t, idx] = vel
        length[idx] += 1
        for row, i in enumerate(idx):
            if not np.all(np.isfinite(new[row])):
                diagnostics["non_finite_abort"] += 1
                active[i] = False
                continue
            states[i] = new[row]
            if step(envs[i], new[row]) == "success":
                rewards[i] = 1
                active[i] = False
    out = []
    for i, env in enumerate(envs):
        traj = None
        if record:
            m = length[i]
            traj = Trajectory(env.spec.task_id, env.seed, config.dt * np.arange(m),
                              hist_s[:m, i], hist_v[:m, i], success=bool(rewards[i]))
        out.append((traj, int(rewards[i])))
    return out


def rollout(policy: GmmPolicy, env: EnvInstance, config: RolloutConfig = RolloutConfig(),
            rng: np.random.Generator | None = None) -> tuple:
    """Single episode; returns ``(trajectory, reward)``."""
    return rollout_batch(policy, [env], config, rngs=[rng] if rng is not None else None)[0]


def run_episodes(policy: GmmPolicy, env_factory: Callable[[int], EnvInstance], seeds: Sequence[int],
                 config: RolloutConfig = RolloutConfig(), record: bool = False) -> list[tuple]:
    envs = [env_factory(int(s)) for s in seeds]
    rngs = [np.random.default_rng([int(s), 2]) for s in seeds] if config.action_noise > 0 else None
    return rollout_batch(policy, envs, config, rngs=rngs, record=record)


def success_rate(policy: GmmPolicy, env_factory, seeds: Sequence[int],
                 config: RolloutConfig = RolloutConfig()) -> float:
    results = run_episodes(policy, env_factory, seeds, config)
    return sum(r for _, r in results) / len(seeds)


def evaluate_h(policy: GmmPolicy, update: UpdateVector, env_factory: Callable[[int], EnvInstance],
               config: RolloutConfig, seed: int, obs_index: int,
               dump: Callable[[Trajectory], None] | None = None) -> Observation:
    """Mean binary reward of ``policy (+) update`` over ``config.j`` seeded episodes.

    Episode ``e`` of observation ``obs_index`` uses an env seed derived from
    ``(seed, obs_index, e)``.  A rejected rank-1 update scores zero.
    """
    try:
        updated = integrate(policy, update)
    except Rank1RejectedError:
        return Observation(update, 0.0, config.j, obs_index, rejected=True)
    seeds = [episode_seed(seed, STREAM_TRAIN, obs_index, e) for e in range(config.j)]
    results = run_episodes(updated, env_factory, seeds, config, record=dump is not None)
    if dump is not None:
        for traj, _ in results:
            dump(traj)
    successes = sum(r for _, r in results)
    return Observation(update, successes / config.j, config.j, obs_index)
