"""Value types shared across the toolkit.

Everything here is an immutable container. Construction normalizes shapes and
dtypes and raises ``ValueError`` on structural problems (wrong shape, non-finite
entries, non-normalizable axes). The semantic invariants (parameter ranges,
binary membership, point/surface consistency) are audited by :func:`validate`,
which returns a list of violation descriptions instead of raising, so that a
broken scene can still be loaded and inspected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

PLANE, SPHERE, CYLINDER, CONE = 0, 1, 2, 3
TYPE_NAMES = ("plane", "sphere", "cylinder", "cone")
NUM_TYPES = 4

#: tolerance for "is this direction vector unit length" checks
UNIT_TOL = 1e-9
#: tolerance below which a vector component counts as zero when fixing signs
SIGN_TOL = 1e-12


class DegenerateInput(ValueError):
    """A segment is too small or too ill-posed for the requested fit."""


class SpecInfeasible(RuntimeError):
    """A scene specification could not be satisfied within the retry budget."""


def canonical_sign(v: np.ndarray, tol: float = SIGN_TOL) -> float:
    """Sign s in {+1,-1} such that the first component of s*v larger than tol
    in magnitude is positive. Returns +1 for the all-tiny vector."""
    for x in v:
        if abs(x) > tol:
            return 1.0 if x > 0 else -1.0
    return 1.0


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _as_vec3(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _as_unit(x, name: str) -> np.ndarray:
    a = _as_vec3(x, name)
    n = float(np.linalg.norm(a))
    if n < 1e-6:
        raise ValueError(f"{name} is too short to normalize (norm={n:g})")
    return a / n


def _as_matrix(x, cols: int, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != cols:
        raise ValueError(f"{name} must be an (N, {cols}) matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


# ---------------------------------------------------------------------------
# Primitive parameterizations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plane:
    """Plane {p : a.p = d}. The normal is unit length and sign-canonicalized
    (first nonzero component positive); d is stored for the canonical normal."""

    a: np.ndarray
    d: float

    type_index = PLANE

    def __post_init__(self):
        a = _as_unit(self.a, "plane normal")
        s = canonical_sign(a)
        object.__setattr__(self, "a", _freeze(s * a))
        object.__setattr__(self, "d", float(s * self.d))

    @property
    def axis(self) -> np.ndarray:
        return self.a

    def as_dict(self) -> dict:
        return {"a": self.a.tolist(), "d": self.d}


@dataclass(frozen=True)
class Sphere:
    """Sphere with center c and radius r."""

    c: np.ndarray
    r: float

    type_index = SPHERE

    def __post_init__(self):
        object.__setattr__(self, "c", _freeze(_as_vec3(self.c, "sphere center")))
        object.__setattr__(self, "r", float(self.r))

    @property
    def axis(self) -> Optional[np.ndarray]:
        return None

    def as_dict(self) -> dict:
        return {"c": self.c.tolist(), "r": self.r}


@dataclass(frozen=True)
class Cylinder:
    """Infinite cylinder with unit axis a (sign-canonicalized, the axis is
    unoriented), a point c on the axis, and radius r."""

    a: np.ndarray
    c: np.ndarray
    r: float

    type_index = CYLINDER

    def __post_init__(self):
        a = _as_unit(self.a, "cylinder axis")
        object.__setattr__(self, "a", _freeze(canonical_sign(a) * a))
        object.__setattr__(self, "c", _freeze(_as_vec3(self.c, "cylinder center")))
        object.__setattr__(self, "r", float(self.r))

    @property
    def axis(self) -> np.ndarray:
        return self.a

    def as_dict(self) -> dict:
        return {"a": self.a.tolist(), "c": self.c.tolist(), "r": self.r}


@dataclass(frozen=True)
class Cone:
    """Cone with apex c, unit axis a pointing from the apex into the cone, and
    half-angle theta. The axis sign is semantic and never canonicalized."""

    c: np.ndarray
    a: np.ndarray
    theta: float

    type_index = CONE

    def __post_init__(self):
        object.__setattr__(self, "c", _freeze(_as_vec3(self.c, "cone apex")))
        object.__setattr__(self, "a", _freeze(_as_unit(self.a, "cone axis")))
        object.__setattr__(self, "theta", float(self.theta))

    @property
    def axis(self) -> np.ndarray:
        return self.a

    def as_dict(self) -> dict:
        return {"c": self.c.tolist(), "a": self.a.tolist(), "theta": self.theta}


PrimitiveParams = Union[Plane, Sphere, Cylinder, Cone]

_PARAM_CLASSES = {PLANE: Plane, SPHERE: Sphere, CYLINDER: Cylinder, CONE: Cone}


def params_from_dict(type_name: str, d: dict) -> PrimitiveParams:
    idx = TYPE_NAMES.index(type_name)
    cls = _PARAM_CLASSES[idx]
    return cls(**d)


# ---------------------------------------------------------------------------
# Cloud / matrix containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointCloud:
    """N sampled 3D positions with optional unoriented unit normals."""

    positions: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = _as_matrix(self.positions, 3, "positions")
        if pos.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        object.__setattr__(self, "positions", _freeze(pos))
        if self.normals is not None:
            nrm = _as_matrix(self.normals, 3, "normals")
            if nrm.shape[0] != pos.shape[0]:
                raise ValueError("normals row count must match positions")
            object.__setattr__(self, "normals", _freeze(nrm))

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class MembershipMatrix:
    """N x K soft point-to-primitive weights. Rows may be all-zero (unassigned
    points). Ground-truth matrices carry binary=True and must be exactly 0/1."""

    weights: np.ndarray
    binary: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"membership must be 2-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("membership has non-finite entries")
        if self.binary and not np.all((w == 0.0) | (w == 1.0)):
            raise ValueError("binary membership must contain only 0 and 1")
        object.__setattr__(self, "weights", _freeze(w))

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    def assigned_mask(self) -> np.ndarray:
        """Boolean mask of rows with any nonzero weight."""
        return self.weights.sum(axis=1) > 0.0


@dataclass(frozen=True)
class TypeMatrix:
    """N x 4 per-point type indicators; rows are one-hot or all-zero.
    Column order: plane=0, sphere=1, cylinder=2, cone=3."""

    onehot: np.ndarray

    def __post_init__(self):
        t = _as_matrix(self.onehot, NUM_TYPES, "type matrix")
        object.__setattr__(self, "onehot", _freeze(t))

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "TypeMatrix":
        """Build from per-point integer labels; -1 marks unassigned points."""
        labels = np.asarray(labels, dtype=np.int64)
        t = np.zeros((labels.shape[0], NUM_TYPES))
        ok = labels >= 0
        t[np.arange(labels.shape[0])[ok], labels[ok]] = 1.0
        return cls(t)

    def labels(self) -> np.ndarray:
        """Per-point integer labels, -1 for all-zero rows."""
        out = np.full(self.onehot.shape[0], -1, dtype=np.int64)
        assigned = self.onehot.sum(axis=1) > 0.5
        out[assigned] = np.argmax(self.onehot[assigned], axis=1)
        return out

    @property
    def n(self) -> int:
        return self.onehot.shape[0]


@dataclass(frozen=True)
class BoundedSurface:
    """A primitive restricted to a finite region, represented by M samples
    uniform on the bounded region plus its share of the scene's total area."""

    prim_type: int
    params: PrimitiveParams
    samples: np.ndarray
    area_fraction: float

    def __post_init__(self):
        if self.prim_type not in (PLANE, SPHERE, CYLINDER, CONE):
            raise ValueError(f"unknown primitive type index {self.prim_type}")
        if self.params.type_index != self.prim_type:
            raise ValueError("params class does not match prim_type")
        s = _as_matrix(self.samples, 3, "surface samples")
        if s.shape[0] < 1:
            raise ValueError("surface needs at least one sample")
        object.__setattr__(self, "samples", _freeze(s))
        object.__setattr__(self, "area_fraction", float(self.area_fraction))

    @property
    def m(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class GroundTruthScene:
    """A generated scene: noisy cloud, pre-noise positions, K bounded surfaces,
    binary membership, per-point types, and the generating seed."""

    cloud: PointCloud
    clean_positions: np.ndarray
    surfaces: tuple
    membership: MembershipMatrix
    types: TypeMatrix
    seed: int

    def __post_init__(self):
        cp = _as_matrix(self.clean_positions, 3, "clean_positions")
        if cp.shape[0] != self.cloud.n:
            raise ValueError("clean_positions row count must match cloud")
        object.__setattr__(self, "clean_positions", _freeze(cp))
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n(self) -> int:
        return self.cloud.n

    @property
    def k(self) -> int:
        return len(self.surfaces)

    def surface_types(self) -> np.ndarray:
        return np.array([s.prim_type for s in self.surfaces], dtype=np.int64)


@dataclass(frozen=True)
class FittedPrimitive:
    """One fitted primitive plus a confidence score (inlier mass fraction)."""

    params: PrimitiveParams
    confidence: float = 1.0

    @property
    def prim_type(self) -> int:
        return self.params.type_index


@dataclass(frozen=True)
class FitResult:
    """Ordered fitted primitives with a soft membership matrix and optional
    per-point type probabilities / normals channels."""

    primitives: tuple
    membership: MembershipMatrix
    per_point_types: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        prims = tuple(self.primitives)
        object.__setattr__(self, "primitives", prims)
        if self.membership.k != len(prims):
            raise ValueError(
                f"membership has {self.membership.k} columns but "
                f"{len(prims)} primitives"
            )
        if self.per_point_types is not None:
            t = _as_matrix(self.per_point_types, NUM_TYPES, "per_point_types")
            if t.shape[0] != self.membership.n:
                raise ValueError("per_point_types row count must match membership")
            object.__setattr__(self, "per_point_types", _freeze(t))
        if self.normals is not None:
            nrm = _as_matrix(self.normals, 3, "normals")
            if nrm.shape[0] != self.membership.n:
                raise ValueError("normals row count must match membership")
            object.__setattr__(self, "normals", _freeze(nrm))

    @property
    def k(self) -> int:
        return len(self.primitives)

    def prim_types(self) -> np.ndarray:
        return np.array([p.prim_type for p in self.primitives], dtype=np.int64)


# ---------------------------------------------------------------------------
# Scene validation
# ---------------------------------------------------------------------------

ON_SURFACE_TOL = 1e-7


def validate(scene: GroundTruthScene) -> list:
    """Audit every scene invariant; returns a list of human-readable violation
    strings, empty iff the scene is valid."""
    from . import estimators  # deferred: estimators imports this module

    out: list = []
    cloud, mem, types = scene.cloud, scene.membership, scene.types
    n, k = scene.n, scene.k

    if mem.n != n:
        out.append(f"membership has {mem.n} rows, cloud has {n}")
    if mem.k != k:
        out.append(f"membership has {mem.k} columns, scene has {k} surfaces")
    if types.n != n:
        out.append(f"type matrix has {types.n} rows, cloud has {n}")

    if cloud.normals is not None:
        norms = np.linalg.norm(cloud.normals, axis=1)
        bad = np.where(np.abs(norms - 1.0) > UNIT_TOL)[0]
        if bad.size:
            out.append(f"{bad.size} normal rows are not unit length (first: {bad[0]})")

    if not scene.membership.binary:
        out.append("ground-truth membership is not flagged binary")
    w = mem.weights
    if np.any((w != 0.0) & (w != 1.0)):
        out.append("membership contains entries that are neither 0 nor 1")
    row_sums = w.sum(axis=1)
    bad = np.where(row_sums > 1.0 + 1e-9)[0]
    for i in bad[:5]:
        out.append(f"membership row {i} sums to {row_sums[i]:.6g} > 1")

    t = types.onehot
    t_sums = t.sum(axis=1)
    if np.any((np.abs(t_sums) > 1e-12) & (np.abs(t_sums - 1.0) > 1e-12)):
        out.append("type matrix rows must sum to 0 or 1")
    elif mem.n == n and mem.k == k:
        expected = np.zeros_like(t)
        surf_types = scene.surface_types()
        for kk in range(k):
            assigned = w[:, kk] == 1.0
            expected[assigned, surf_types[kk]] += 1.0
        if not np.array_equal(expected, t):
            out.append("type matrix is inconsistent with membership and surface types")

    for kk, surf in enumerate(scene.surfaces):
        p = surf.params
        ax = p.axis
        if ax is not None and abs(np.linalg.norm(ax) - 1.0) > UNIT_TOL:
            out.append(f"surface {kk} ({TYPE_NAMES[surf.prim_type]}) axis is not unit")
        if isinstance(p, (Sphere, Cylinder)) and p.r <= 0.0:
            out.append(f"surface {kk} ({TYPE_NAMES[surf.prim_type]}) has radius {p.r:g} <= 0")
        if isinstance(p, Cone) and not (0.0 < p.theta < np.pi / 2):
            out.append(
                f"surface {kk} (cone) has half-angle {p.theta:.6g} outside the open "
                f"interval (0, pi/2)"
            )
        if not (0.0 < surf.area_fraction <= 1.0):
            out.append(f"surface {kk} area_fraction {surf.area_fraction:g} outside (0, 1]")
        d = estimators.surface_distances(surf.samples, p)
        if d.size and float(d.max()) > ON_SURFACE_TOL:
            out.append(
                f"surface {kk} has samples up to {d.max():.3g} away from its primitive"
            )
        if mem.n == n and mem.k == k:
            assigned = w[:, kk] == 1.0
            if np.any(assigned):
                dc = estimators.surface_distances(scene.clean_positions[assigned], p)
                if float(dc.max()) > ON_SURFACE_TOL:
                    out.append(
                        f"clean points assigned to surface {kk} lie up to "
                        f"{dc.max():.3g} off the surface"
                    )
    return out
