"""Bounded low-dimensional update spaces for GMM policies and the integration operator.

An update vector is laid out component-major: for each component ``k`` the
entries ``[dw_k | dmu_k (2*dim_s) | dcov_k (dim_s)]``, keeping only the blocks
of the enabled modalities.  Covariance entries are stored centered on zero:
eigenvalue and rank-1 factors are applied as ``1 + entry``, rotation entries
are Euler angles in radians.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationError, InvariantError, Rank1RejectedError
from .gmm import GmmPolicy

MODALITIES = ("weights", "means", "cov_eig", "cov_rot", "cov_rank1")
COV_MODALITIES = ("cov_eig", "cov_rot", "cov_rank1")

# Shorthands accepted on the command line.
MODALITY_ALIASES = {
    "mu": ("means",),
    "rxyz": ("cov_rot",),
    "eig": ("cov_eig",),
    "mu+rxyz": ("means", "cov_rot"),
    "mu+eig": ("means", "cov_eig"),
    "rank1": ("cov_rank1",),
    "mu+rank1": ("means", "cov_rank1"),
}

diagnostics: Counter = Counter()


def parse_modalities(value) -> tuple[str, ...]:
    if isinstance(value, str):
        if value in MODALITY_ALIASES:
            return MODALITY_ALIASES[value]
        value = [v.strip() for v in value.split("+")]
    return tuple(value)


@dataclass(frozen=True)
class UpdateSpec:
    modalities: tuple
    k: int
    dim_s: int = 3
    weight_bound: float = 0.1
    mean_bound: float = 0.05
    cov_bound: float = 0.1
    epsilon: float = 1e-3

    def __post_init__(self):
        mods = parse_modalities(self.modalities)
        unknown = set(mods) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities: {sorted(unknown)}")
        if not mods:
            raise ValueError("at least one modality is required")
        if sum(m in COV_MODALITIES for m in mods) > 1:
            raise ValueError("at most one covariance modality per update")
        object.__setattr__(self, "modalities", tuple(m for m in MODALITIES if m in mods))
        if min(self.weight_bound, self.mean_bound, self.cov_bound, self.epsilon) <= 0:
            raise ValueError("bounds and epsilon must be strictly positive")
        if self.cov_modality in ("cov_eig", "cov_rank1") and self.cov_bound >= 1:
            raise ValueError("scaling bound sigma must be < 1")
        if self.k < 1 or self.dim_s < 1:
            raise ValueError("k and dim_s must be >= 1")

    @classmethod
    def for_policy(cls, policy: GmmPolicy, modalities, **kwargs) -> "UpdateSpec":
        return cls(modalities=parse_modalities(modalities), k=policy.k, dim_s=policy.dim_s, **kwargs)

    @property
    def cov_modality(self) -> str | None:
        for m in self.modalities:
            if m in COV_MODALITIES:
                return m
        return None

    @property
    def per_component(self) -> int:
        d = self.dim_s
        return (("weights" in self.modalities) + 2 * d * ("means" in self.modalities)
                + d * (self.cov_modality is not None))

    def dimension(self) -> int:
        return self.k * self.per_component

    def blocks(self) -> list[tuple[str, int, int]]:
        """``(modality, offset, length)`` of each block within one component's slice."""
        d, out, offset = self.dim_s, [], 0
        for mod, length in (("weights", 1), ("means", 2 * d), (self.cov_modality, d)):
            if mod is not None and mod in self.modalities:
                out.append((mod, offset, length))
                offset += length
        return out

    def bound_vector(self) -> np.ndarray:
        per = np.empty(self.per_component)
        for mod, off, length in self.blocks():
            per[off:off + length] = {"weights": self.weight_bound,
                                     "means": self.mean_bound}.get(mod, self.cov_bound)
        return np.tile(per, self.k)

    def to_dict(self) -> dict:
        return {"modalities": list(self.modalities), "k": self.k, "dim_s": self.dim_s,
                "weight_bound": self.weight_bound, "mean_bound": self.mean_bound,
                "cov_bound": self.cov_bound, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, data: dict) -> "UpdateSpec":
        return cls(modalities=tuple(data["modalities"]), k=data["k"], dim_s=data.get("dim_s", 3),
                   weight_bound=data.get("weight_bound", 0.1), mean_bound=data.get("mean_bound", 0.05),
                   cov_bound=data.get("cov_bound", 0.1), epsilon=data.get("epsilon", 1e-3))


def dimension(spec: UpdateSpec) -> int:
    return spec.dimension()


@dataclass(frozen=True, eq=False)
class UpdateVector:
    """A point of the bounded update space; ``values`` follows ``spec.blocks()`` per component."""

    spec: UpdateSpec
    values: np.ndarray
    checked: bool = field(default=True, repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if len(values) != self.spec.dimension():
            raise ValueError(f"update has {len(values)} entries, spec requires {self.spec.dimension()}")
        if not np.all(np.isfinite(values)):
            raise ValueError("update entries must be finite")
        if self.checked:
            excess = np.abs(values) - self.spec.bound_vector()
            if np.any(excess > 1e-12):
                raise ValueError(f"update entry {int(np.argmax(excess))} outside its bound")

    @classmethod
    def unchecked(cls, spec: UpdateSpec, values) -> "UpdateVector":
        return cls(spec, values, checked=False)

    @classmethod
    def zeros(cls, spec: UpdateSpec) -> "UpdateVector":
        return cls(spec, np.zeros(spec.dimension()))

    def split(self) -> dict[str, np.ndarray]:
        """Per-modality arrays of shape ``(k,)``, ``(k, 2*dim_s)`` or ``(k, dim_s)``."""
        per = self.values.reshape(self.spec.k, self.spec.per_component)
        out = {}
        for mod, off, length in self.spec.blocks():
            block = per[:, off:off + length]
            out[mod] = block[:, 0] if mod == "weights" else block
        return out

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "UpdateVector":
        return cls(UpdateSpec.from_dict(data["spec"]), data["values"])


# ---------------------------------------------------------------------------
# Per-modality operators


def apply_weights(weights, delta, epsilon: float) -> np.ndarray:
    """Add ``delta`` to the weights, floor at ``epsilon`` and renormalize."""
    floored = np.maximum(np.asarray(weights, dtype=float) + np.asarray(delta, dtype=float), epsilon)
    return floored / floored.sum()


def apply_means(means, delta) -> np.ndarray:
    return np.asarray(means, dtype=float) + np.asarray(delta, dtype=float)


def sorted_eigh(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix with eigenvalues in descending order."""
    vals, vecs = np.linalg.eigh(sigma)
    return vals[::-1], vecs[:, ::-1]


def apply_cov_eig(sigma, factors) -> np.ndarray:
    """Scale eigenvalue ``j`` (descending order) of a PD matrix by ``factors[j]``."""
    sigma = np.asarray(sigma, dtype=float)
    vals, vecs = sorted_eigh(0.5 * (sigma + sigma.T))
    if vals[-1] <= 0:
        raise InvariantError("eigenvalue update requires a positive definite matrix")
    out = (vecs * (vals * np.asarray(factors, dtype=float))) @ vecs.T
    return 0.5 * (out + out.T)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_xyz(angles) -> np.ndarray:
    """``Rx(a) @ Ry(b) @ Rz(c)`` for Euler angles ``(a, b, c)``."""
    a, b, c = angles
    return _rx(a) @ _ry(b) @ _rz(c)


def apply_cov_rot(cross, angles) -> np.ndarray:
    """Rotate the velocity-by-state cross block: ``R_xyz(angles) @ cross``."""
    cross = np.asarray(cross, dtype=float)
    if cross.shape != (3, 3) or len(angles) != 3:
        raise ValueError("rotation update requires 3-D state")
    return rotation_xyz(angles) @ cross


def apply_cov_rank1(sigma, factors) -> np.ndarray:
    """Rank-1 update of the off-diagonal part, keeping the diagonal.

    With ``sigma - diag(sigma) = U diag(s) V^T`` the result is
    ``diag(sigma) + s_1 * U_1 (V_1 * factors)^T``.  Not symmetric in general.
    """
    sigma = np.asarray(sigma, dtype=float)
    diag = np.diag(np.diag(sigma))
    u, s, vt = np.linalg.svd(sigma - diag)
    return diag + s[0] * np.outer(u[:, 0], vt[0] * np.asarray(factors, dtype=float))


def _is_pd(m: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


def integrate(policy: GmmPolicy, update: UpdateVector) -> GmmPolicy:
    """Return a new policy with ``update`` applied; the input is left untouched."""
    spec = update.spec
    if spec.k != policy.k or spec.dim_s != policy.dim_s:
        raise IntegrationError(
            f"update for k={spec.k}, dim_s={spec.dim_s} applied to k={policy.k}, dim_s={policy.dim_s}")
    parts = update.split()
    d = policy.dim_s
    weights = np.array(policy.weights)
    means = np.array(policy.means)
    covs = np.array(policy.covariances)

    if "weights" in parts:
        weights = apply_weights(weights, parts["weights"], spec.epsilon)
    if "means" in parts:
        means = apply_means(means, parts["means"])
    if "cov_eig" in parts:
        for j, entries in enumerate(parts["cov_eig"]):
            covs[j, :d, :d] = apply_cov_eig(covs[j, :d, :d], 1.0 + entries)
    elif "cov_rot" in parts:
        if d != 3:
            raise IntegrationError("rotation update requires 3-D state")
        for j, angles in enumerate(parts["cov_rot"]):
            rotated = apply_cov_rot(covs[j, d:, :d], angles)
            covs[j, d:, :d] = rotated
            covs[j, :d, d:] = rotated.T
    elif "cov_rank1" in parts:
        for j, entries in enumerate(parts["cov_rank1"]):
            raw = apply_cov_rank1(covs[j, :d, :d], 1.0 + entries)
            sym = 0.5 * (raw + raw.T)
            diagnostics["rank1_applied"] += 1
            if not _is_pd(sym):
                diagnostics["rank1_rejected"] += 1
                raise Rank1RejectedError(f"rank1 update rejected: component {j} not positive definite")
            covs[j, :d, :d] = sym

    try:
        return policy.replace(weights=weights, means=means, covariances=covs)
    except InvariantError as exc:
        raise IntegrationError(f"update produced an invalid policy: {exc}") from exc
