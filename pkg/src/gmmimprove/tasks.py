"""Kinematic gate-sequence tasks standing in for articulated-object manipulation.

The end-effector must visit an ordered list of boxes (hooking the handle) and
then drag the handle along the mechanism: a straight line for the sliding
hatch and the drawer, an arc around a hinge for the door.  The handle only
moves while the end-effector stays inside a coupling tube around its current
position on the path.  All states are expressed in the object frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .gmm import GmmPolicy, Trajectory, finite_difference_velocities
from .updates import apply_cov_eig, apply_means

PRESET_NAMES = ("slide", "drawer", "door")
RUNNING, SUCCESS = "running", "success"

# Seed of the fixed perturbation used by ``degrade``.
DEGRADE_SEED = 24


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple

    def contains(self, p) -> bool:
        return bool(np.all(np.abs(np.asarray(p) - self.center) <= self.half))

    def overlaps(self, other: "Box") -> bool:
        gap = np.abs(np.subtract(self.center, other.center))
        return bool(np.all(gap < np.add(self.half, other.half)))

    @classmethod
    def from_dict(cls, data) -> "Box":
        return cls(tuple(map(float, data["center"])), tuple(map(float, data["half"])))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "half": list(self.half)}


@dataclass(frozen=True)
class TaskSpec:
    """Gate sequence, handle path and randomization ranges of one task.

    ``success_threshold`` is a displacement for linear paths and an angle in
    degrees for arc paths (accrued along a circle of radius ``hinge_radius``).
    """

    task_id: str
    gates: tuple
    handle: tuple
    motion_axis: tuple
    tube_radius: float
    success_threshold: float
    start_region: Box
    path: str = "linear"
    hinge_axis: tuple = (1.0, 0.0, 0.0)
    hinge_radius: float = 0.4
    translation_range: tuple = (0.0, 0.0, 0.0)
    yaw_range: float = 0.0
    expert_waypoints: tuple = ()
    expert_overshoot: float = 0.05
    expert_speed: float = 0.25
    expert_gain: float = 3.0
    expert_switch: float = 0.03

    def __post_init__(self):
        if not self.gates:
            raise ValueError("a task needs at least one gate")
        for i, a in enumerate(self.gates):
            for b in self.gates[i + 1:]:
                if a.overlaps(b):
                    raise ValueError("gates must be pairwise disjoint")
        if self.success_threshold <= 0 or self.tube_radius <= 0:
            raise ValueError("threshold and tube radius must be positive")
        if self.path not in ("linear", "arc"):
            raise ValueError(f"unknown path kind {self.path!r}")
        axis = np.asarray(self.motion_axis, dtype=float)
        object.__setattr__(self, "motion_axis", tuple(axis / np.linalg.norm(axis)))

    @property
    def threshold(self) -> float:
        """Success threshold in accrual units (length, or radians for arcs)."""
        if self.path == "arc":
            return float(np.radians(self.success_threshold))
        return float(self.success_threshold)

    def path_point(self, amount: float) -> np.ndarray:
        """Handle position after ``amount`` of accrual."""
        handle = np.asarray(self.handle)
        axis = np.asarray(self.motion_axis)
        if self.path == "linear":
            return handle + amount * axis
        inward = np.asarray(self.hinge_axis) / np.linalg.norm(self.hinge_axis)
        center = handle + self.hinge_radius * inward
        return center + self.hinge_radius * (-inward * np.cos(amount) + axis * np.sin(amount))

    def coupling(self, s) -> tuple:
        """``(along, off)``: path coordinate of ``s`` and its distance from the path."""
        rel = np.asarray(s) - np.asarray(self.handle)
        axis = np.asarray(self.motion_axis)
        if self.path == "linear":
            along = float(rel @ axis)
            return along, float(np.linalg.norm(rel - along * axis))
        inward = np.asarray(self.hinge_axis) / np.linalg.norm(self.hinge_axis)
        from_center = rel - self.hinge_radius * inward
        x, y = float(from_center @ -inward), float(from_center @ axis)
        normal = np.cross(axis, inward)
        radial = np.hypot(x, y)
        off = np.hypot(radial - self.hinge_radius, float(from_center @ normal))
        return float(np.arctan2(y, x)), float(off)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "gates": [g.to_dict() for g in self.gates],
            "handle": list(self.handle),
            "motion_axis": list(self.motion_axis),
            "tube_radius": self.tube_radius,
            "success_threshold": self.success_threshold,
            "start_region": self.start_region.to_dict(),
            "path": self.path,
            "hinge_axis": list(self.hinge_axis),
            "hinge_radius": self.hinge_radius,
            "translation_range": list(self.translation_range),
            "yaw_range": self.yaw_range,
            "expert_waypoints": [list(w) for w in self.expert_waypoints],
            "expert_overshoot": self.expert_overshoot,
            "expert_speed": self.expert_speed,
            "expert_gain": self.expert_gain,
            "expert_switch": self.expert_switch,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        data = dict(data)
        data.pop("comment", None)
        data["gates"] = tuple(Box.from_dict(g) for g in data["gates"])
        data["start_region"] = Box.from_dict(data["start_region"])
        for key in ("handle", "motion_axis", "hinge_axis", "translation_range"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        data["expert_waypoints"] = tuple(tuple(float(v) for v in w)
                                         for w in data.get("expert_waypoints", ()))
        return cls(**data)


def load_task(name_or_path) -> TaskSpec:
    """Load a shipped preset by name or a custom task from a JSON path."""
    if str(name_or_path) in PRESET_NAMES:
        text = resources.files("gmmimprove.presets").joinpath(f"{name_or_path}.json").read_text()
    else:
        text = Path(name_or_path).read_text()
    return TaskSpec.from_dict(json.loads(text))


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class EnvInstance:
    """One episode's mutable task state; ``s`` is relative to the object frame."""

    spec: TaskSpec
    seed: int
    translation: np.ndarray
    yaw: float
    start_world: np.ndarray
    s: np.ndarray
    gate_progress: int = 0
    accrued: float = 0.0
    success: bool = False

    @property
    def gates_done(self) -> bool:
        return self.gate_progress >= len(self.spec.gates)


def to_object_frame(world_point, translation, yaw) -> np.ndarray:
    return _yaw_matrix(yaw).T @ (np.asarray(world_point, dtype=float) - translation)


def reset(spec: TaskSpec, seed: int) -> EnvInstance:
    """Sample the object pose and start position for one episode."""
    rng = np.random.default_rng(int(seed))
    trans_range = np.asarray(spec.translation_range, dtype=float)
    translation = rng.uniform(-trans_range, trans_range)
    yaw = float(rng.uniform(-spec.yaw_range, spec.yaw_range))
    region = spec.start_region
    start = rng.uniform(np.subtract(region.center, region.half), np.add(region.center, region.half))
    s0 = to_object_frame(start, translation, yaw)
    env = EnvInstance(spec, int(seed), translation, yaw, start, s0)
    step(env, s0)
    return env


def step(env: EnvInstance, s_new) -> str:
    """Move the end-effector to ``s_new`` and update gate and handle progress."""
    spec = env.spec
    s_new = np.asarray(s_new, dtype=float)
    env.s = s_new
    if env.success:
        return SUCCESS
    if not env.gates_done:
        if spec.gates[env.gate_progress].contains(s_new):
            env.gate_progress += 1
        if not env.gates_done:
            return RUNNING
    along, off = spec.coupling(s_new)
    reach = spec.tube_radius / spec.hinge_radius if spec.path == "arc" else spec.tube_radius
    if off <= spec.tube_radius and env.accrued - reach <= along <= env.accrued + reach:
        env.accrued = max(env.accrued, along)
    if env.accrued >= spec.threshold:
        env.success = True
        return SUCCESS
    return RUNNING


# ---------------------------------------------------------------------------
# Scripted demonstrations


def _expert_waypoints(spec: TaskSpec, s0, rng, noise_std: float) -> tuple:
    """Waypoints and per-waypoint switching radii for the scripted expert."""
    def jitter(p, limit=np.inf):
        p = np.asarray(p, dtype=float)
        if noise_std <= 0:
            return p
        return p + np.clip(rng.normal(0.0, noise_std, 3), -limit, limit)

    points = [np.asarray(s0, dtype=float)]
    radii = [0.0]
    for w in spec.expert_waypoints:
        points.append(jitter(w))
        radii.append(spec.expert_switch)
    for g in spec.gates:
        half = np.asarray(g.half)
        # Keep the aim point and switching ball inside the gate.
        points.append(jitter(g.center, 0.4 * half))
        radii.append(min(spec.expert_switch, 0.6 * half.min()))
    end = spec.threshold + (spec.expert_overshoot / spec.hinge_radius if spec.path == "arc"
                            else spec.expert_overshoot)
    n_path = 2 if spec.path == "linear" else 9
    path = [spec.path_point(a) for a in np.linspace(0.0, end, n_path)]
    # The path start coincides with the hooking gate; only the end point is jittered.
    end_jitter = jitter(np.zeros(3))
    for i, p in enumerate(path[1:], start=1):
        points.append(p + end_jitter * (i / (n_path - 1)))
        radii.append(spec.expert_switch)
    return np.stack(points), np.array(radii)


def _attractor_path(points: np.ndarray, radii: np.ndarray, speed: float, gain: float,
                    dt: float, stop_radius: float = 0.02, max_steps: int = 2000) -> np.ndarray:
    """Track each waypoint as a saturated linear attractor, switching when close."""
    pos = [points[0]]
    s = points[0].copy()
    target = 1
    for _ in range(max_steps):
        gap = points[target] - s
        dist = np.linalg.norm(gap)
        if target < len(points) - 1 and dist < radii[target]:
            target += 1
            continue
        if target == len(points) - 1 and dist < stop_radius:
            break
        v = gain * gap
        norm = np.linalg.norm(v)
        if norm > speed:
            v *= speed / norm
        s = s + dt * v
        pos.append(s)
    return np.stack(pos)


def scripted_expert(spec: TaskSpec, seed: int, noise_std: float = 0.01, dt: float = 0.05,
                    v_max: float = 0.5, smoothing: float = 1.0, hold_steps: int = 0) -> Trajectory:
    """Successful demonstration from the episode ``seed``'s start state.

    Moves towards the (jittered) approach waypoints and gate centers in turn,
    then along the handle path past the threshold, and comes to rest.
    """
    env = reset(spec, seed)
    rng = np.random.default_rng([int(seed), 1])
    waypoints, radii = _expert_waypoints(spec, env.s, rng, noise_std)
    pos = _attractor_path(waypoints, radii, spec.expert_speed, spec.expert_gain, dt)
    if smoothing > 0:
        pos = gaussian_filter1d(pos, smoothing, axis=0, mode="nearest")
    pos = np.concatenate([pos, np.repeat(pos[-1:], hold_steps, axis=0)])
    t = dt * np.arange(len(pos))
    vel = finite_difference_velocities(t, pos)
    speed = np.linalg.norm(vel, axis=1)
    if speed.max() > v_max:
        raise RuntimeError(f"expert exceeds the speed cap ({speed.max():.3f} > {v_max})")
    for p in pos:
        step(env, p)
    if not env.success:
        raise RuntimeError(f"scripted expert failed on task {spec.task_id!r} (seed {seed})")
    return Trajectory(spec.task_id, seed, t, pos, vel, success=True)


def generate_demos(spec: TaskSpec, n: int, seed: int, noise_std: float = 0.01) -> list:
    """``n`` expert demonstrations from independent episode seeds."""
    seeds = np.random.SeedSequence(int(seed)).generate_state(max(n, 1), dtype=np.uint32)[:n]
    return [scripted_expert(spec, int(s), noise_std) for s in seeds]


def degrade(policy: GmmPolicy, severity: float, seed: int = DEGRADE_SEED) -> GmmPolicy:
    """Fixed perturbation of means and position-block eigenvalues.

    Each component mean moves a distance ``severity * 0.05`` in a random
    direction of the joint space; eigenvalues are scaled by
    factors in ``[1 - severity * 0.1, 1 + severity * 0.1]``.
    """
    if severity == 0:
        return policy
    rng = np.random.default_rng(seed)
    d = policy.dim_s
    direction = rng.normal(size=policy.means.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    mean_shift = direction * severity * 0.05
    factors = 1.0 + rng.uniform(-1.0, 1.0, (policy.k, d)) * severity * 0.1
    covs = np.array(policy.covariances)
    for j in range(policy.k):
        covs[j, :d, :d] = apply_cov_eig(covs[j, :d, :d], factors[j])
    meta = dict(policy.meta, degraded={"severity": float(severity), "seed": int(seed)})
    return policy.replace(means=apply_means(policy.means, mean_shift), covariances=covs, meta=meta)
