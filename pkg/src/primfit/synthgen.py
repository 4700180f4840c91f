"""Procedural scenes of bounded primitives with full ground truth.

A scene is composed of K bounded regions (rectangle patches, sphere caps or
bands, finite tubes, cone frustums), each sampled area-uniformly. Points get
exact surface normals, per-point noise along the normal, and the whole scene
is normalized so the clean cloud's bounding box touches [-1, 1]^3. Optional
outliers are drawn uniformly in the normalized frame outside the central cube
[-0.5, 0.5]^3 and carry all-zero membership rows.

Determinism: every random draw comes from a PCG64 stream derived from the
64-bit scene seed via explicit spawn keys - (attempt,) for the scene layout,
(attempt, 1 + k) for primitive k's region and samples, (attempt, 0) for noise
and outliers - so identical (spec, seed) always produce identical scenes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    CONE,
    CYLINDER,
    NUM_TYPES,
    PLANE,
    SPHERE,
    BoundedSurface,
    Cone,
    Cylinder,
    GroundTruthScene,
    MembershipMatrix,
    Plane,
    PointCloud,
    PrimitiveParams,
    SpecInfeasible,
    Sphere,
    TypeMatrix,
)

MAX_ATTEMPTS = 1000


def stream(seed: int, *key: int) -> np.random.Generator:
    """The named generator family: PCG64 seeded by (seed, spawn_key)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                                        spawn_key=tuple(key)))


@dataclass(frozen=True)
class SceneSpec:
    """Generator knobs: primitive count range and type mix, cloud and
    per-surface sample sizes, the noise and outlier model, and the smallest
    admissible primitive area fraction."""

    k_range: Tuple[int, int] = (3, 12)
    type_mix: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    n_points: int = 8192
    m_samples: int = 512
    noise_amplitude: float = 0.01
    outlier_fraction: float = 0.0
    min_area_fraction: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.k_range[0] < 1 or self.k_range[1] < self.k_range[0]:
            raise ValueError(f"bad k_range {self.k_range}")
        mix = np.asarray(self.type_mix, dtype=np.float64)
        if mix.shape != (NUM_TYPES,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError("type_mix must be 4 nonnegative numbers summing to 1")
        if self.n_points < 1 or self.m_samples < 1:
            raise ValueError("point counts must be positive")
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise ValueError("outlier_fraction must be in [0, 1)")
        if self.noise_amplitude < 0.0:
            raise ValueError("noise_amplitude must be nonnegative")


# ---------------------------------------------------------------------------
# Bounded regions
# ---------------------------------------------------------------------------

def _orthobasis(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    b1 = np.cross(axis, helper)
    b1 /= np.linalg.norm(b1)
    return b1, np.cross(axis, b1)


@dataclass(frozen=True)
class PlanePatch:
    origin: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    half_u: float
    half_v: float

    prim_type = PLANE

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.b1, self.b2)

    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v

    def params(self) -> PrimitiveParams:
        n = self.normal
        return Plane(n, float(n @ self.origin))

    def sample(self, m: int, rng: np.random.Generator):
        uv = rng.uniform(-1.0, 1.0, size=(m, 2)) * [self.half_u, self.half_v]
        pts = self.origin + uv[:, :1] * self.b1 + uv[:, 1:] * self.b2
        return pts, np.tile(self.normal, (m, 1))

    def transformed(self, shift: np.ndarray, scale: float) -> "PlanePatch":
        return replace(
            self,
            origin=scale * (self.origin - shift),
            half_u=scale * self.half_u,
            half_v=scale * self.half_v,
        )


@dataclass(frozen=True)
class SphereBand:
    """Sphere restricted to axis-coordinates t in [t_lo, t_hi]; the full
    sphere is the band (-1, 1]. Area-uniform sampling is uniform in t."""

    center: np.ndarray
    radius: float
    axis: np.ndarray
    t_lo: float
    t_hi: float

    prim_type = SPHERE

    def area(self) -> float:
        return 2.0 * math.pi * self.radius**2 * (self.t_hi - self.t_lo)

    def params(self) -> PrimitiveParams:
        return Sphere(self.center, self.radius)

    def sample(self, m: int, rng: np.random.Generator):
        b1, b2 = _orthobasis(self.axis)
        t = rng.uniform(self.t_lo, self.t_hi, size=m)
        phi = rng.uniform(0.0, 2.0 * math.pi, size=m)
        ring = np.sqrt(np.maximum(1.0 - t**2, 0.0))
        dirs = (
            t[:, None] * self.axis
            + (ring * np.cos(phi))[:, None] * b1
            + (ring * np.sin(phi))[:, None] * b2
        )
        return self.center + self.radius * dirs, dirs

    def transformed(self, shift: np.ndarray, scale: float) -> "SphereBand":
        return replace(
            self,
            center=scale * (self.center - shift),
            radius=scale * self.radius,
        )


@dataclass(frozen=True)
class TubeSection:
    center: np.ndarray
    axis: np.ndarray
    radius: float
    half_height: float

    prim_type = CYLINDER

    def area(self) -> float:
        return 2.0 * math.pi * self.radius * 2.0 * self.half_height

    def params(self) -> PrimitiveParams:
        return Cylinder(self.axis, self.center, self.radius)

    def sample(self, m: int, rng: np.random.Generator):
        b1, b2 = _orthobasis(self.axis)
        t = rng.uniform(-self.half_height, self.half_height, size=m)
        phi = rng.uniform(0.0, 2.0 * math.pi, size=m)
        radial = np.cos(phi)[:, None] * b1 + np.sin(phi)[:, None] * b2
        pts = self.center + t[:, None] * self.axis + self.radius * radial
        return pts, radial

    def transformed(self, shift: np.ndarray, scale: float) -> "TubeSection":
        return replace(
            self,
            center=scale * (self.center - shift),
            radius=scale * self.radius,
            half_height=scale * self.half_height,
        )


@dataclass(frozen=True)
class ConeFrustum:
    """Lateral cone surface between slant distances s_lo and s_hi from the
    apex. The surface area element grows linearly in s, so area-uniform slant
    values come from the inverse CDF sqrt(s_lo^2 + u (s_hi^2 - s_lo^2))."""

    apex: np.ndarray
    axis: np.ndarray
    theta: float
    s_lo: float
    s_hi: float

    prim_type = CONE

    def area(self) -> float:
        return math.pi * math.sin(self.theta) * (self.s_hi**2 - self.s_lo**2)

    def params(self) -> PrimitiveParams:
        return Cone(self.apex, self.axis, self.theta)

    def sample(self, m: int, rng: np.random.Generator):
        b1, b2 = _orthobasis(self.axis)
        u = rng.uniform(0.0, 1.0, size=m)
        s = np.sqrt(self.s_lo**2 + u * (self.s_hi**2 - self.s_lo**2))
        phi = rng.uniform(0.0, 2.0 * math.pi, size=m)
        ring = np.cos(phi)[:, None] * b1 + np.sin(phi)[:, None] * b2
        gen = math.cos(self.theta) * self.axis + math.sin(self.theta) * ring
        pts = self.apex + s[:, None] * gen
        normals = math.cos(self.theta) * ring - math.sin(self.theta) * self.axis
        return pts, normals

    def transformed(self, shift: np.ndarray, scale: float) -> "ConeFrustum":
        return replace(
            self,
            apex=scale * (self.apex - shift),
            s_lo=scale * self.s_lo,
            s_hi=scale * self.s_hi,
        )


Region = Union[PlanePatch, SphereBand, TubeSection, ConeFrustum]


def sample_surface(region: Region, m: int, rng: np.random.Generator) -> np.ndarray:
    """M points area-uniform on the bounded region."""
    return region.sample(m, rng)[0]


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_region(prim_type: int, rng: np.random.Generator) -> Region:
    """A randomly placed bounded region of the given type, sized so areas stay
    within roughly one order of magnitude of each other."""
    if prim_type == PLANE:
        axis = _unit(rng)
        b1, b2 = _orthobasis(axis)
        return PlanePatch(
            origin=rng.uniform(-0.6, 0.6, size=3),
            b1=b1,
            b2=b2,
            half_u=rng.uniform(0.3, 0.7),
            half_v=rng.uniform(0.3, 0.7),
        )
    if prim_type == SPHERE:
        lo = -1.0 if rng.uniform() < 0.5 else rng.uniform(-0.5, 0.2)
        return SphereBand(
            center=rng.uniform(-0.6, 0.6, size=3),
            radius=rng.uniform(0.25, 0.55),
            axis=_unit(rng),
            t_lo=lo,
            t_hi=1.0,
        )
    if prim_type == CYLINDER:
        return TubeSection(
            center=rng.uniform(-0.6, 0.6, size=3),
            axis=_unit(rng),
            radius=rng.uniform(0.2, 0.45),
            half_height=rng.uniform(0.3, 0.7),
        )
    if prim_type == CONE:
        return ConeFrustum(
            apex=rng.uniform(-0.6, 0.6, size=3),
            axis=_unit(rng),
            theta=rng.uniform(0.3, 1.05),
            s_lo=rng.uniform(0.15, 0.3),
            s_hi=rng.uniform(0.6, 1.1),
        )
    raise ValueError(f"unknown primitive type {prim_type}")


# ---------------------------------------------------------------------------
# Scene assembly
# ---------------------------------------------------------------------------

def _point_budget(fracs: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of `total` points proportional to fracs,
    with every primitive receiving at least one point."""
    raw = fracs * total
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    while np.any(counts == 0):
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1
    return counts


def assemble_scene(regions: Sequence[Region], spec: SceneSpec, seed: int,
                   attempt: int = 0) -> GroundTruthScene:
    """Sample, noise, and normalize a scene from explicit bounded regions."""
    k = len(regions)
    areas = np.array([r.area() for r in regions])
    fracs = areas / areas.sum()

    n_out = int(round(spec.outlier_fraction * spec.n_points))
    n_surf = spec.n_points - n_out
    counts = _point_budget(fracs, n_surf)

    # draw clean points and ground-truth samples per primitive substream
    raw_points, raw_normals, raw_samples = [], [], []
    for idx, region in enumerate(regions):
        rng_k = stream(seed, attempt, 1 + idx)
        pts, nrm = region.sample(int(counts[idx]), rng_k)
        raw_points.append(pts)
        raw_normals.append(nrm)
        raw_samples.append(sample_surface(region, spec.m_samples, rng_k))

    clean = np.vstack(raw_points)
    normals = np.vstack(raw_normals)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    # normalize: center of mass at the origin, bounding box touching [-1,1]^3
    shift = clean.mean(axis=0)
    scale = 1.0 / np.abs(clean - shift).max()
    clean = scale * (clean - shift)
    regions_t = [r.transformed(shift, scale) for r in regions]
    samples_t = [scale * (s - shift) for s in raw_samples]

    rng_env = stream(seed, attempt, 0)
    eta = rng_env.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=clean.shape[0])
    noisy = clean + eta[:, None] * normals

    labels = np.repeat(np.arange(k), counts)
    if n_out:
        out_pts = _sample_outliers(n_out, rng_env)
        out_nrm = rng_env.normal(size=(n_out, 3))
        out_nrm /= np.linalg.norm(out_nrm, axis=1, keepdims=True)
        noisy = np.vstack([noisy, out_pts])
        clean = np.vstack([clean, out_pts])
        normals = np.vstack([normals, out_nrm])
        labels = np.concatenate([labels, np.full(n_out, -1)])

    membership = np.zeros((spec.n_points, k))
    assigned = labels >= 0
    membership[np.flatnonzero(assigned), labels[assigned]] = 1.0

    surfaces = tuple(
        BoundedSurface(
            prim_type=region.prim_type,
            params=region.params(),
            samples=samples,
            area_fraction=float(frac),
        )
        for region, samples, frac in zip(regions_t, samples_t, fracs)
    )
    surf_types = np.array([s.prim_type for s in surfaces])
    type_labels = np.where(assigned, surf_types[np.clip(labels, 0, None)], -1)
    return GroundTruthScene(
        cloud=PointCloud(noisy, normals),
        clean_positions=clean,
        surfaces=surfaces,
        membership=MembershipMatrix(membership, binary=True),
        types=TypeMatrix.from_labels(type_labels),
        seed=seed,
    )


def _sample_outliers(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-1,1]^3 outside the central cube [-0.5, 0.5]^3."""
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        cand = rng.uniform(-1.0, 1.0, size=(2 * (n - filled), 3))
        keep = np.abs(cand).max(axis=1) > 0.5
        take = cand[keep][: n - filled]
        out[filled : filled + take.shape[0]] = take
        filled += take.shape[0]
    return out


def generate_scene(spec: SceneSpec, seed: Optional[int] = None) -> GroundTruthScene:
    """Compose a random scene honoring the spec's area-fraction floor.

    Layouts whose smallest primitive falls below min_area_fraction are redrawn
    from a fresh attempt substream; after 1000 failed attempts the spec is
    declared infeasible.
    """
    seed = spec.seed if seed is None else int(seed)
    mix = np.asarray(spec.type_mix, dtype=np.float64)
    for attempt in range(MAX_ATTEMPTS):
        rng = stream(seed, attempt)
        k = int(rng.integers(spec.k_range[0], spec.k_range[1] + 1))
        types = rng.choice(NUM_TYPES, size=k, p=mix)
        regions = [random_region(int(t), rng) for t in types]
        areas = np.array([r.area() for r in regions])
        if (areas / areas.sum()).min() < spec.min_area_fraction:
            continue
        return assemble_scene(regions, spec, seed, attempt)
    raise SpecInfeasible(
        f"no layout satisfied min_area_fraction={spec.min_area_fraction} "
        f"in {MAX_ATTEMPTS} attempts (seed {seed})"
    )


# ---------------------------------------------------------------------------
# Membership perturbation (simulated imperfect predictions)
# ---------------------------------------------------------------------------

def perturb_membership(scene: GroundTruthScene, mode: str, magnitude: float,
                       rng: np.random.Generator) -> MembershipMatrix:
    """Derive a soft membership from the scene's binary ground truth.

    Modes: ``softmax`` rows are a softmax of -distance^2 / magnitude to each
    primitive (magnitude 0 degenerates to nearest-primitive one-hot);
    ``flip`` reassigns a `magnitude` fraction of assigned points to a uniformly
    random column; ``dropout`` zeroes a `magnitude` fraction of rows.
    Unassigned rows stay zero in every mode.
    """
    from .estimators import surface_distances

    w = scene.membership.weights.copy()
    assigned = scene.membership.assigned_mask()
    if mode == "softmax":
        dist = np.stack(
            [surface_distances(scene.cloud.positions, s.params) for s in scene.surfaces],
            axis=1,
        )
        if magnitude <= 0.0:
            soft = np.zeros_like(dist)
            soft[np.arange(len(dist)), np.argmin(dist, axis=1)] = 1.0
        else:
            logits = -(dist**2) / magnitude
            logits -= logits.max(axis=1, keepdims=True)
            soft = np.exp(logits)
            soft /= soft.sum(axis=1, keepdims=True)
        soft[~assigned] = 0.0
        return MembershipMatrix(soft)
    if mode == "flip":
        idx = np.flatnonzero(assigned)
        n_flip = int(round(magnitude * idx.size))
        chosen = rng.choice(idx, size=n_flip, replace=False) if n_flip else np.array([], int)
        for i in chosen:
            w[i] = 0.0
            w[i, rng.integers(scene.k)] = 1.0
        return MembershipMatrix(w)
    if mode == "dropout":
        idx = np.flatnonzero(assigned)
        n_drop = int(round(magnitude * idx.size))
        chosen = rng.choice(idx, size=n_drop, replace=False) if n_drop else np.array([], int)
        w[chosen] = 0.0
        return MembershipMatrix(w)
    raise ValueError(f"unknown perturbation mode {mode!r}")
