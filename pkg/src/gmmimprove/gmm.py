"""GMM dynamical-system policies: representation, EM fitting, GMR inference, I/O.

A policy is a mixture of ``k`` Gaussians over the joint space ``(s, s_dot)``
of dimension ``2 * dim_s``.  Velocities are inferred from states with Gaussian
mixture regression::

    s_dot = sum_k h_k(s) * (A_k s + b_k)
    A_k = Sigma_k[s_dot, s] @ inv(Sigma_k[s, s]),  b_k = mu_k[s_dot] - A_k mu_k[s]

where ``h_k`` are the state-conditional responsibilities.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from .errors import (
    DegenerateComponentError,
    InsufficientDataError,
    InvalidStateError,
    InvariantError,
)

LOG_2PI = np.log(2.0 * np.pi)

# Counts numerical fallbacks taken during inference (e.g. uniform responsibilities).
diagnostics: Counter = Counter()


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class GmmPolicy:
    """Immutable mixture of ``k`` Gaussians over ``(s, s_dot)``.

    ``means`` has shape ``(k, 2*dim_s)`` and ``covariances`` ``(k, 2*dim_s, 2*dim_s)``.
    The first ``dim_s`` coordinates are the state, the rest its velocity.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    dim_s: int = 3
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "means", _frozen(self.means))
        object.__setattr__(self, "covariances", _frozen(self.covariances))
        object.__setattr__(self, "dim_s", int(self.dim_s))
        self.validate()

    @property
    def k(self) -> int:
        return len(self.weights)

    def validate(self, tol: float = 1e-9) -> None:
        k, d = self.k, self.dim_s
        if k < 1 or d < 1:
            raise InvariantError("k and dim_s must be >= 1")
        if self.means.shape != (k, 2 * d):
            raise InvariantError(f"means must have shape {(k, 2 * d)}, got {self.means.shape}")
        if self.covariances.shape != (k, 2 * d, 2 * d):
            raise InvariantError(f"covariances must have shape {(k, 2 * d, 2 * d)}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.means))
                and np.all(np.isfinite(self.covariances))):
            raise InvariantError("non-finite policy parameters")
        if np.any(self.weights < 0):
            raise InvariantError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > tol:
            raise InvariantError(f"weights sum to {self.weights.sum()!r}, expected 1")
        asym = np.abs(self.covariances - np.swapaxes(self.covariances, 1, 2)).max()
        if asym > tol:
            raise InvariantError(f"covariance not symmetric (max deviation {asym:.3g})")
        min_eig = np.linalg.eigvalsh(self.sigma_s).min(axis=1)
        if np.any(min_eig <= 0):
            raise InvariantError("position block of a covariance is not positive definite")

    # Named blocks --------------------------------------------------------

    @property
    def mu_s(self) -> np.ndarray:
        return self.means[:, : self.dim_s]

    @property
    def mu_sdot(self) -> np.ndarray:
        return self.means[:, self.dim_s:]

    @property
    def sigma_s(self) -> np.ndarray:
        d = self.dim_s
        return self.covariances[:, :d, :d]

    @property
    def sigma_s_sdot(self) -> np.ndarray:
        d = self.dim_s
        return self.covariances[:, :d, d:]

    @property
    def sigma_sdot_s(self) -> np.ndarray:
        d = self.dim_s
        return self.covariances[:, d:, :d]

    @property
    def sigma_sdot(self) -> np.ndarray:
        d = self.dim_s
        return self.covariances[:, d:, d:]

    # Cached inference terms ---------------------------------------------

    @cached_property
    def _terms(self):
        d = self.dim_s
        chol = np.linalg.cholesky(self.sigma_s)
        eye = np.eye(d)
        chol_inv = np.stack([solve_triangular(c, eye, lower=True) for c in chol])
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        # A = Sigma_sdot_s inv(Sigma_s); Sigma_s is symmetric so solve on the transpose.
        gains = np.stack([
            np.linalg.solve(ss, cross.T).T for ss, cross in zip(self.sigma_s, self.sigma_sdot_s)
        ])
        offsets = self.mu_sdot - np.einsum("kij,kj->ki", gains, self.mu_s)
        with np.errstate(divide="ignore"):
            log_norm = np.log(self.weights) - 0.5 * logdet - 0.5 * d * LOG_2PI
        return chol_inv, log_norm, gains, offsets

    def gains(self) -> np.ndarray:
        """Per-component linear maps ``A_k`` of shape ``(k, dim_s, dim_s)``."""
        return self._terms[2]

    def offsets(self) -> np.ndarray:
        """Per-component offsets ``b_k`` of shape ``(k, dim_s)``."""
        return self._terms[3]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "dim_s": self.dim_s,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GmmPolicy":
        try:
            k, dim_s = int(data["k"]), int(data["dim_s"])
            weights = np.asarray(data["weights"], dtype=float)
            means = np.asarray(data["means"], dtype=float)
            covs = np.asarray(data["covariances"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvariantError(f"malformed model data: {exc}") from exc
        if weights.shape != (k,):
            raise InvariantError(f"expected {k} weights, got shape {weights.shape}")
        if covs.ndim == 2:
            covs = covs.reshape(k, 2 * dim_s, 2 * dim_s)
        return cls(weights, means, covs, dim_s=dim_s, meta=dict(data.get("meta", {})))

    def replace(self, **changes) -> "GmmPolicy":
        fields = dict(weights=self.weights, means=self.means, covariances=self.covariances,
                      dim_s=self.dim_s, meta=dict(self.meta))
        fields.update(changes)
        return GmmPolicy(**fields)


# ---------------------------------------------------------------------------
# Inference


def _check_state(policy: GmmPolicy, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != policy.dim_s or s.ndim not in (1, 2):
        raise InvalidStateError(f"invalid state: expected length {policy.dim_s}, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidStateError("invalid state: non-finite entries")
    return s


def _log_resp(policy: GmmPolicy, s: np.ndarray) -> np.ndarray:
    chol_inv, log_norm, _, _ = policy._terms
    diff = s[:, None, :] - policy.mu_s[None, :, :]
    z = np.einsum("kij,nkj->nki", chol_inv, diff)
    log_p = log_norm[None, :] - 0.5 * np.einsum("nki,nki->nk", z, z)
    top = log_p.max(axis=1, keepdims=True)
    bad = ~np.isfinite(top[:, 0])
    if np.any(bad):
        diagnostics["gmr_uniform_fallback"] += int(bad.sum())
        log_p[bad] = 0.0
        top[bad] = 0.0
    shifted = log_p - top
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_responsibilities(policy: GmmPolicy, s) -> np.ndarray:
    """Log of the normalized responsibilities ``h_k(s)``.

    Accepts a single state ``(dim_s,)`` or a batch ``(n, dim_s)``.
    """
    s = _check_state(policy, s)
    out = _log_resp(policy, np.atleast_2d(s))
    return out[0] if s.ndim == 1 else out


def gmr(policy: GmmPolicy, s) -> np.ndarray:
    """Velocity predicted for state(s) ``s`` by Gaussian mixture regression."""
    s = _check_state(policy, s)
    batch = np.atleast_2d(s)
    h = np.exp(_log_resp(policy, batch))
    _, _, gains, offsets = policy._terms
    per_comp = np.einsum("kij,nj->nki", gains, batch) + offsets[None]
    out = np.einsum("nk,nki->ni", h, per_comp)
    return out[0] if s.ndim == 1 else out


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class Trajectory:
    """Timestamped states and velocities of one episode or demonstration."""

    task_id: str
    seed: int
    t: np.ndarray
    s: np.ndarray
    s_dot: np.ndarray
    success: bool = False

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.s = np.asarray(self.s, dtype=float).reshape(len(self.t), -1)
        self.s_dot = np.asarray(self.s_dot, dtype=float).reshape(len(self.t), -1)
        if self.s.shape != self.s_dot.shape:
            raise ValueError("s and s_dot must share a dimension")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        self.seed = int(self.seed)
        self.success = bool(self.success)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dim_s(self) -> int:
        return self.s.shape[1]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "success": self.success,
            "steps": [
                {"t": float(t), "s": s.tolist(), "s_dot": v.tolist()}
                for t, s, v in zip(self.t, self.s, self.s_dot)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        steps = data["steps"]
        return cls(
            task_id=data["task_id"],
            seed=data["seed"],
            t=[st["t"] for st in steps],
            s=[st["s"] for st in steps],
            s_dot=[st["s_dot"] for st in steps],
            success=data.get("success", False),
        )


def finite_difference_velocities(t, s) -> np.ndarray:
    """Central differences in the interior, one-sided at the endpoints."""
    return np.gradient(np.asarray(s, dtype=float), np.asarray(t, dtype=float), axis=0, edge_order=1)


def write_trajectories(path, trajectories: Iterable[Trajectory], header: dict | None = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}) + "\n")
        for traj in trajectories:
            fh.write(json.dumps(traj.to_dict()) + "\n")


def read_trajectories(path) -> tuple[dict, list[Trajectory]]:
    """Read a JSON-lines trajectory file; returns ``(header, trajectories)``."""
    header: dict = {}
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "header" in rec:
                header.update(rec["header"])
            else:
                out.append(Trajectory.from_dict(rec))
    return header, out


# ---------------------------------------------------------------------------
# Model files


def save_model(policy: GmmPolicy, path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict(), indent=1) + "\n")


def load_model(path) -> GmmPolicy:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvariantError(f"malformed model file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvariantError(f"malformed model file {path}")
    return GmmPolicy.from_dict(data)


# ---------------------------------------------------------------------------
# EM fitting


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-6
    max_iter: int = 200
    n_restarts: int = 5
    reg: float = 1e-6
    max_condition: float = 1e12
    min_mass: float = 1e-8


@dataclass
class EmResult:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    history: list  # mean per-sample log-likelihood after each iteration (index 0 = init)
    reseeds: list = field(default_factory=list)  # iteration indices where a component was re-seeded

    @property
    def log_likelihood(self) -> float:
        return self.history[-1]


def joint_samples(trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Stack the ``(s, s_dot)`` samples of all trajectories."""
    if not trajectories:
        raise InsufficientDataError("insufficient data: no trajectories")
    for tr in trajectories:
        if len(tr) < 2:
            raise InsufficientDataError("insufficient data: trajectory with fewer than 2 steps")
    return np.concatenate([np.hstack([tr.s, tr.s_dot]) for tr in trajectories], axis=0)


def _component_log_pdf(X, means, covs) -> np.ndarray:
    n, dim = X.shape
    out = np.empty((n, len(means)))
    for j, (mu, cov) in enumerate(zip(means, covs)):
        chol = np.linalg.cholesky(cov)
        z = solve_triangular(chol, (X - mu).T, lower=True)
        out[:, j] = (-0.5 * np.einsum("ij,ij->j", z, z)
                     - np.log(np.diag(chol)).sum() - 0.5 * dim * LOG_2PI)
    return out


def _e_step(X, weights, means, covs):
    with np.errstate(divide="ignore"):
        log_p = _component_log_pdf(X, means, covs) + np.log(weights)[None, :]
    per_sample = logsumexp(log_p, axis=1)
    resp = np.exp(log_p - per_sample[:, None])
    return per_sample, resp


def _regularize(cov: np.ndarray, reg: float, max_condition: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    dim = len(cov)
    trace = np.trace(cov)
    if not np.isfinite(trace) or trace <= 0:
        raise DegenerateComponentError("degenerate component: zero scatter")
    cov = cov + reg * trace / dim * np.eye(dim)
    eig = np.linalg.eigvalsh(cov)
    if eig[0] <= 0 or eig[-1] / eig[0] > max_condition:
        raise DegenerateComponentError(
            f"degenerate component: condition number {eig[-1] / max(eig[0], 1e-300):.3g}")
    return cov


def _clip_to_pd(cov: np.ndarray, reg: float) -> np.ndarray:
    # Warm starts may come from updated policies whose full joint covariance is indefinite.
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    floor = reg * max(vals.max(), 1e-300)
    if vals.min() > floor:
        return cov
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def _m_step(X, resp, config: EmConfig, per_sample):
    n, dim = X.shape
    mass = resp.sum(axis=0)
    reseeded = False
    if np.any(mass < config.min_mass * n):
        # Move starved components onto the worst-explained samples.
        order = np.argsort(per_sample)
        global_var = np.diag(np.var(X, axis=0) + 1e-12)
        starved = np.flatnonzero(mass < config.min_mass * n)
        resp = resp.copy()
        for rank, j in enumerate(starved):
            resp[order[rank], :] = 0.0
            resp[order[rank], j] = 1.0
        mass = resp.sum(axis=0)
        reseeded = True
    weights = mass / mass.sum()
    means = (resp.T @ X) / mass[:, None]
    covs = np.empty((len(mass), dim, dim))
    for j in range(len(mass)):
        diff = X - means[j]
        if mass[j] < 2.0 and reseeded:
            covs[j] = _regularize(global_var, config.reg, config.max_condition)
            continue
        covs[j] = _regularize((resp[:, j, None] * diff).T @ diff / mass[j], config.reg,
                              config.max_condition)
    return weights, means, covs, reseeded


def _kmeanspp_init(X, k, rng, config: EmConfig):
    seed = int(rng.integers(2**31 - 1))
    centers, _ = kmeans_plusplus(X, k, random_state=seed)
    d2 = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    global_var = np.var(X, axis=0)
    weights = np.empty(k)
    means = np.empty((k, X.shape[1]))
    covs = np.empty((k, X.shape[1], X.shape[1]))
    for j in range(k):
        members = X[labels == j]
        weights[j] = max(len(members), 1)
        means[j] = members.mean(axis=0) if len(members) else centers[j]
        var = members.var(axis=0) if len(members) >= 2 else global_var
        if var.sum() <= 0:
            var = global_var
        covs[j] = _regularize(np.diag(var), config.reg, config.max_condition)
    return weights / weights.sum(), means, covs


def em(X: np.ndarray, k: int, rng: np.random.Generator, config: EmConfig = EmConfig(),
       init: GmmPolicy | None = None) -> EmResult:
    """One EM run on joint samples ``X`` from k-means++ seeding or a warm start."""
    n = len(X)
    if n < k:
        raise InsufficientDataError(f"insufficient data: {n} samples for {k} components")
    if init is not None:
        weights, means = np.array(init.weights), np.array(init.means)
        covs = np.stack([_clip_to_pd(c, config.reg) for c in init.covariances])
    else:
        weights, means, covs = _kmeanspp_init(X, k, rng, config)
    per_sample, resp = _e_step(X, weights, means, covs)
    history = [float(per_sample.mean())]
    reseeds = []
    for it in range(1, config.max_iter + 1):
        weights, means, covs, reseeded = _m_step(X, resp, config, per_sample)
        if reseeded:
            reseeds.append(it)
        per_sample, resp = _e_step(X, weights, means, covs)
        history.append(float(per_sample.mean()))
        if not reseeded and history[-1] - history[-2] < config.tol:
            break
    return EmResult(weights, means, covs, history, reseeds)


def fit_em(trajectories: Sequence[Trajectory], k: int, seed: int = 0,
           config: EmConfig = EmConfig(), init: GmmPolicy | None = None) -> GmmPolicy:
    """Fit a ``k``-component policy to the pooled ``(s, s_dot)`` samples.

    Runs ``config.n_restarts`` seeded restarts and keeps the best log-likelihood.
    With ``init`` given, a single warm-started run is performed instead.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    X = joint_samples(trajectories)
    dim_s = trajectories[0].dim_s
    if len(X) < k:
        raise InsufficientDataError(f"insufficient data: {len(X)} samples for {k} components")
    if init is not None:
        best = em(X, k, np.random.default_rng(seed), config, init=init)
    else:
        best = None
        for child in np.random.SeedSequence(seed).spawn(config.n_restarts):
            res = em(X, k, np.random.default_rng(child), config)
            if best is None or res.log_likelihood > best.log_likelihood:
                best = res
    meta = {"seed": int(seed), "source_demos": len(trajectories),
            "log_likelihood": best.log_likelihood}
    return GmmPolicy(best.weights, best.means, best.covariances, dim_s=dim_s, meta=meta)


def log_likelihood(policy: GmmPolicy, X: np.ndarray) -> float:
    """Mean per-sample log-likelihood of joint samples under the full mixture."""
    per_sample, _ = _e_step(np.asarray(X, dtype=float), policy.weights, policy.means,
                            policy.covariances)
    return float(per_sample.mean())
