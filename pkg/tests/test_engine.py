import functools

import numpy as np
import pytest

from gmmimprove import engine
from gmmimprove.engine import (
    RolloutConfig,
    clip_speed,
    evaluate_h,
    rollout,
    rollout_batch,
    run_episodes,
)
from gmmimprove.gmm import GmmPolicy
from gmmimprove.tasks import Box, TaskSpec, load_task, reset
from gmmimprove.updates import UpdateSpec, UpdateVector


def linear_policy(A, b, dim_s=3):
    """Single-component policy whose GMR is exactly ``A s + b``."""
    covs = np.eye(2 * dim_s)
    covs[dim_s:, :dim_s] = A
    covs[:dim_s, dim_s:] = np.asarray(A).T
    covs[dim_s:, dim_s:] = np.eye(dim_s) * 10.0
    means = np.concatenate([np.zeros(dim_s), b])[None]
    return GmmPolicy([1.0], means, covs[None], dim_s=dim_s)


def line_task():
    return TaskSpec(
        task_id="line",
        gates=(Box((0.0, 0.0, 0.1), (0.02, 0.02, 0.02)),),
        handle=(0.0, 0.0, 0.0),
        motion_axis=(0.0, 0.0, -1.0),
        tube_radius=0.05,
        success_threshold=0.2,
        start_region=Box((0.0, 0.0, 0.3), (0.0, 0.0, 0.0)),
    )


class TestRollout:
    def test_zero_policy_times_out(self):
        env = reset(line_task(), 0)
        traj, reward = rollout(linear_policy(np.zeros((3, 3)), np.zeros(3)), env,
                               RolloutConfig(max_steps=50))
        assert reward == 0 and len(traj) == 50
        np.testing.assert_array_equal(traj.s[-1], traj.s[0])

    def test_attractor_succeeds(self):
        goal = np.array([0.0, 0.0, -0.5])
        traj, reward = rollout(linear_policy(-np.eye(3), goal), reset(line_task(), 0))
        assert reward == 1 and traj.success
        # straight line towards the goal: x and y stay exactly zero
        assert np.all(traj.s[:, :2] == 0.0)

    def test_speed_clip(self):
        pol = linear_policy(np.zeros((3, 3)), np.array([6.0, 8.0, 0.0]))
        cfg = RolloutConfig(max_steps=5)
        traj, _ = rollout(pol, reset(line_task(), 0), cfg)
        steps = np.linalg.norm(np.diff(traj.s, axis=0), axis=1)
        np.testing.assert_allclose(steps, cfg.dt * cfg.v_max, rtol=1e-12)

    def test_clip_keeps_slow_rows(self):
        v = np.array([[0.1, 0.0, 0.0], [3.0, 4.0, 0.0]])
        np.testing.assert_allclose(clip_speed(v, 0.5), [[0.1, 0, 0], [0.3, 0.4, 0]])

    def test_records_every_step(self):
        goal = np.array([0.0, 0.0, -0.5])
        traj, _ = rollout(linear_policy(-np.eye(3), goal), reset(line_task(), 0))
        np.testing.assert_allclose(np.diff(traj.t), 0.05)
        np.testing.assert_allclose(traj.s[1:], traj.s[:-1] + 0.05 * traj.s_dot[:-1], atol=1e-15)

    def test_non_finite_aborts(self, monkeypatch):
        pol = linear_policy(np.zeros((3, 3)), np.zeros(3))
        monkeypatch.setattr(engine, "gmr", lambda policy, s: np.full_like(s, np.nan))
        before = engine.diagnostics["non_finite_abort"]
        traj, reward = rollout(pol, reset(line_task(), 0))
        assert reward == 0 and len(traj) == 1
        assert engine.diagnostics["non_finite_abort"] == before + 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RolloutConfig(dt=0.0)


class TestBatching:
    def test_batch_matches_individual(self, rng):
        from conftest import random_policy
        spec = load_task("slide")
        pol = random_policy(rng, k=3)
        envs = [reset(spec, s) for s in range(6)]
        batch = rollout_batch(pol, envs, RolloutConfig(max_steps=60))
        for seed, (traj, reward) in enumerate(batch):
            single, r = rollout(pol, reset(spec, seed), RolloutConfig(max_steps=60))
            assert r == reward
            np.testing.assert_array_equal(single.s, traj.s)

    def test_run_episodes_deterministic(self, rng):
        from conftest import random_policy
        spec = load_task("drawer")
        pol = random_policy(rng, k=2)
        fac = functools.partial(reset, spec)
        a = run_episodes(pol, fac, [1, 2, 3], record=True)
        b = run_episodes(pol, fac, [1, 2, 3], record=True)
        for (ta, ra), (tb, rb) in zip(a, b):
            assert ra == rb
            np.testing.assert_array_equal(ta.s, tb.s)


class TestEvaluate:
    def test_j_episodes_and_dump(self):
        goal = np.array([0.0, 0.0, -0.5])
        pol = linear_policy(-np.eye(3), goal)
        spec = UpdateSpec.for_policy(pol, "eig")
        dumped = []
        obs = evaluate_h(pol, UpdateVector.zeros(spec), functools.partial(reset, line_task()),
                         RolloutConfig(j=4), seed=0, obs_index=2, dump=dumped.append)
        assert obs.episodes == 4 and obs.mean_return == 1.0 and obs.run_index == 2
        assert len(dumped) == 4

    def test_rejected_rank1_scores_zero(self):
        c = 0.45
        covs = np.eye(6) * 2.0
        covs[:3, :3] = (1 + c) * np.eye(3) - c * np.ones((3, 3))
        pol = GmmPolicy([1.0], np.zeros((1, 6)), covs[None])
        spec = UpdateSpec.for_policy(pol, "rank1", cov_bound=0.95)
        obs = evaluate_h(pol, UpdateVector(spec, [0.9] * 3), functools.partial(reset, line_task()),
                         RolloutConfig(j=8), seed=0, obs_index=0)
        assert obs.rejected and obs.mean_return == 0.0 and obs.episodes == 8

    def test_episode_seeds_depend_on_index(self):
        from gmmimprove.engine import STREAM_TRAIN, episode_seed
        a = [episode_seed(0, STREAM_TRAIN, 0, e) for e in range(8)]
        b = [episode_seed(0, STREAM_TRAIN, 1, e) for e in range(8)]
        assert len(set(a) | set(b)) == 16
