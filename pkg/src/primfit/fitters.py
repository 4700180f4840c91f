"""Non-learned membership producers built on the estimators.

* :func:`ransac_fit` -- a simplified multi-primitive detector: minimal-set
  candidates per type, scored by inlier count under a distance threshold and
  normal agreement, extracted greedily; several restarts, keeping the run with
  the best cloud coverage.
* :func:`em_fit` -- alternates membership assignment (hard nearest-primitive
  or row softmax) with per-column re-estimation at fixed types.
* :func:`oracle_fit` / :func:`segment_fit` -- fit primitives directly from
  ground-truth membership columns (the injected-segmentation hybrids).
* :func:`discard_small` / :func:`vote_types` -- post-processing: drop columns
  with tiny mean membership, vote a per-column type from per-point type
  probabilities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from .core import (
    CONE,
    CYLINDER,
    PLANE,
    SPHERE,
    Cone,
    Cylinder,
    DegenerateInput,
    FitResult,
    FittedPrimitive,
    GroundTruthScene,
    MembershipMatrix,
    Plane,
    PrimitiveParams,
    Sphere,
)
from .estimators import fit_primitive, surface_distances
from .numeric import DEFAULT_RIDGE
from .synthgen import stream, _orthobasis

#: minimal sample counts per candidate type (point+normal pairs)
MINIMAL_SET = {PLANE: 1, SPHERE: 2, CYLINDER: 2, CONE: 3}
#: default discard threshold on the mean membership of a column
DISCARD_THRESHOLD = 0.005


@dataclass(frozen=True)
class RansacConfig:
    distance_epsilon: float = 0.02
    normal_epsilon_deg: float = 25.0
    min_inliers: int = 40
    max_candidates_per_round: int = 48
    rounds: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.distance_epsilon, self.normal_epsilon_deg) <= 0:
            raise ValueError("thresholds must be positive")
        if min(self.min_inliers, self.max_candidates_per_round, self.rounds) < 1:
            raise ValueError("counts must be positive")


@dataclass(frozen=True)
class EmConfig:
    """Alternating-refinement knobs.

    ``normal_gate_deg`` restricts hard assignment to primitives whose surface
    normal agrees with the point normal (None disables the gate, e.g. for the
    energy-descent setting). With ``keep_best`` the iterate with the highest
    input coverage at the cap radius is returned instead of the last one,
    the initial parameters included, so refinement never ends below its
    starting coverage; it only applies when a cap is set.
    """

    iterations: int = 10
    temperature: float = 0.005
    hard_assign: bool = True
    k_max: int = 24
    unassign_cap: Optional[float] = 0.03
    assignment: str = "distance"  # or "energy": per-point algebraic energy
    normal_gate_deg: Optional[float] = 30.0
    keep_best: bool = True
    ridge: float = DEFAULT_RIDGE
    track_energy: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.assignment not in ("distance", "energy"):
            raise ValueError("assignment must be 'distance' or 'energy'")


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def surface_normals_at(points: np.ndarray, prim: PrimitiveParams) -> np.ndarray:
    """Unit surface normal direction of the primitive nearest to each point
    (up to sign; agreement checks are unoriented)."""
    p = np.atleast_2d(points)
    if isinstance(prim, Plane):
        return np.tile(prim.a, (p.shape[0], 1))
    if isinstance(prim, Sphere):
        v = p - prim.c
        return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    if isinstance(prim, Cylinder):
        v = p - prim.c
        radial = v - (v @ prim.a)[:, None] * prim.a
        return radial / np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-12)
    if isinstance(prim, Cone):
        v = p - prim.c
        radial = v - (v @ prim.a)[:, None] * prim.a
        e = radial / np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-12)
        return math.cos(prim.theta) * e - math.sin(prim.theta) * prim.a
    raise TypeError(f"unknown primitive {type(prim)!r}")


def algebraic_energy(points: np.ndarray, prim: PrimitiveParams) -> np.ndarray:
    """Per-point fitting energy actually minimized by the estimator: the
    squared plane residual, the squared algebraic sphere residual, and the
    squared geometric distance for cylinders and cones."""
    p = np.atleast_2d(points)
    if isinstance(prim, Plane):
        return (p @ prim.a - prim.d) ** 2
    if isinstance(prim, Sphere):
        v = p - prim.c
        return (np.einsum("ij,ij->i", v, v) - prim.r**2) ** 2
    return surface_distances(p, prim) ** 2


# ---------------------------------------------------------------------------
# Minimal-set candidates
# ---------------------------------------------------------------------------

def _plane_candidate(pts, nrms) -> Optional[PrimitiveParams]:
    return Plane(nrms[0], float(nrms[0] @ pts[0]))


def _sphere_candidate(pts, nrms) -> Optional[PrimitiveParams]:
    (p1, p2), (n1, n2) = pts, nrms
    dot = float(n1 @ n2)
    det = 1.0 - dot**2
    if det < 1e-6:
        return None
    d = p2 - p1
    b1, b2 = float(n1 @ d), float(n2 @ d)
    t1 = (b1 - dot * b2) / det
    t2 = (dot * b1 - b2) / det
    center = 0.5 * (p1 + t1 * n1 + p2 + t2 * n2)
    r = 0.5 * (np.linalg.norm(p1 - center) + np.linalg.norm(p2 - center))
    if not 1e-3 < r < 4.0:
        return None
    return Sphere(center, r)


def _cylinder_candidate(pts, nrms) -> Optional[PrimitiveParams]:
    axis = np.cross(nrms[0], nrms[1])
    na = float(np.linalg.norm(axis))
    if na < 1e-3:
        return None
    axis = axis / na
    b1, b2 = _orthobasis(axis)
    basis = np.stack([b1, b2], axis=1)                      # (3, 2)
    q = pts @ basis
    m = nrms @ basis
    system = np.stack([m[0], -m[1]], axis=1)
    if abs(np.linalg.det(system)) < 1e-9:
        return None
    t = np.linalg.solve(system, q[1] - q[0])
    c2 = q[0] + t[0] * m[0]
    r = 0.5 * (np.linalg.norm(q[0] - c2) + np.linalg.norm(q[1] - c2))
    if not 1e-3 < r < 4.0:
        return None
    return Cylinder(axis, c2[0] * b1 + c2[1] * b2, r)


def _cone_candidate(pts, nrms) -> Optional[PrimitiveParams]:
    try:
        apex = np.linalg.solve(nrms, np.einsum("ij,ij->i", nrms, pts))
    except np.linalg.LinAlgError:
        return None
    rays = pts - apex
    lengths = np.linalg.norm(rays, axis=1)
    if lengths.min() < 1e-6:
        return None
    rays = rays / lengths[:, None]
    axis = np.cross(rays[1] - rays[0], rays[2] - rays[0])
    na = float(np.linalg.norm(axis))
    if na < 1e-6:
        return None
    axis = axis / na
    if float(axis @ rays.mean(axis=0)) < 0.0:
        axis = -axis
    theta = float(np.mean(np.arccos(np.clip(rays @ axis, -1.0, 1.0))))
    if not 0.01 < theta < math.pi / 2 - 0.01:
        return None
    return Cone(apex, axis, theta)


_CANDIDATES = {
    PLANE: _plane_candidate,
    SPHERE: _sphere_candidate,
    CYLINDER: _cylinder_candidate,
    CONE: _cone_candidate,
}


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def _inlier_mask(positions, normals, prim, cfg: RansacConfig) -> np.ndarray:
    dist = surface_distances(positions, prim)
    pred = surface_normals_at(positions, prim)
    agree = np.abs(np.einsum("ij,ij->i", pred, normals)) >= math.cos(
        math.radians(cfg.normal_epsilon_deg)
    )
    return (dist < cfg.distance_epsilon) & agree


def _ransac_round(positions, normals, cfg: RansacConfig,
                  rng: np.random.Generator):
    remaining = np.arange(positions.shape[0])
    accepted: List[Tuple[PrimitiveParams, np.ndarray]] = []
    while remaining.size >= cfg.min_inliers and len(accepted) < 64:
        best_count, best = 0, None
        for _ in range(cfg.max_candidates_per_round):
            prim_type = int(rng.integers(4))
            need = MINIMAL_SET[prim_type]
            if remaining.size < need:
                continue
            pick = rng.choice(remaining, size=need, replace=False)
            prim = _CANDIDATES[prim_type](positions[pick], normals[pick])
            if prim is None:
                continue
            mask = _inlier_mask(positions[remaining], normals[remaining], prim, cfg)
            count = int(mask.sum())
            if count > best_count:
                best_count, best = count, (prim, mask)
        if best is None or best_count < cfg.min_inliers:
            break
        prim, mask = best
        accepted.append((prim, remaining[mask]))
        remaining = remaining[~mask]
    return accepted


def _fit_result_from_segments(n: int, segments, meta: dict) -> FitResult:
    """Assemble a FitResult from (params, global index array) pairs."""
    k = len(segments)
    weights = np.zeros((n, k))
    type_probs = np.zeros((n, 4))
    prims = []
    for col, (prim, idx) in enumerate(segments):
        weights[idx, col] = 1.0
        type_probs[idx] = 0.0
        type_probs[idx, prim.type_index] = 1.0
        prims.append(FittedPrimitive(prim, confidence=idx.size / n))
    return FitResult(
        primitives=tuple(prims),
        membership=MembershipMatrix(weights),
        per_point_types=type_probs,
        meta=meta,
    )


def ransac_fit(positions, normals, cfg: RansacConfig) -> FitResult:
    """Greedy multi-primitive detection; the best of ``cfg.rounds`` seeded
    restarts by cloud coverage at the inlier threshold is returned."""
    positions = np.asarray(positions, dtype=np.float64)
    if normals is None:
        raise ValueError("the detector requires point normals")
    normals = np.asarray(normals, dtype=np.float64)

    best_cov, best_segments, best_round = -1.0, [], 0
    for rnd in range(cfg.rounds):
        segments = _ransac_round(positions, normals, cfg, stream(cfg.seed, rnd))
        if segments:
            dmin = np.min(
                np.stack(
                    [surface_distances(positions, p) for p, _ in segments], axis=1
                ),
                axis=1,
            )
            cov = float(np.mean(dmin < cfg.distance_epsilon))
        else:
            cov = 0.0
        if cov > best_cov:
            best_cov, best_segments, best_round = cov, segments, rnd
    meta = {
        "method": "ransac",
        "config": asdict(cfg),
        "seed": cfg.seed,
        "round_used": best_round,
        "input_coverage": best_cov,
    }
    return _fit_result_from_segments(positions.shape[0], best_segments, meta)


# ---------------------------------------------------------------------------
# EM refinement
# ---------------------------------------------------------------------------

def _total_energy(positions, weights, prims) -> float:
    total = 0.0
    for col, prim in enumerate(prims):
        total += float(weights[:, col] @ algebraic_energy(positions, prim))
    return total


def _assign(positions, normals, prims, cfg: EmConfig):
    """One membership update; returns (weights, labels) with labels -1 for
    unassigned points in hard mode."""
    n = positions.shape[0]
    dist = np.stack([surface_distances(positions, p) for p in prims], axis=1)
    if not cfg.hard_assign:
        logits = -(dist**2) / cfg.temperature
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        return weights, np.argmax(weights, axis=1)

    score = (
        dist
        if cfg.assignment == "distance"
        else np.stack([algebraic_energy(positions, p) for p in prims], axis=1)
    )
    if cfg.normal_gate_deg is not None and normals is not None:
        agree = np.stack(
            [
                np.abs(
                    np.einsum("ij,ij->i", surface_normals_at(positions, p), normals)
                )
                >= math.cos(math.radians(cfg.normal_gate_deg))
                for p in prims
            ],
            axis=1,
        )
        score = np.where(agree, score, np.inf)
        dist = np.where(agree, dist, np.inf)
    labels = np.argmin(score, axis=1)
    rows = np.arange(n)
    invalid = ~np.isfinite(score[rows, labels])
    if cfg.unassign_cap is not None:
        invalid |= dist[rows, labels] > cfg.unassign_cap
    labels = np.where(invalid, -1, labels)
    weights = np.zeros((n, len(prims)))
    ok = labels >= 0
    weights[np.flatnonzero(ok), labels[ok]] = 1.0
    return weights, labels


def _capped_mean_distance(positions, prims, radius: float) -> float:
    """Mean nearest-primitive distance clipped at the cap radius; the
    keep-best score (lower is better, robust to far points)."""
    dist = np.min(
        np.stack([surface_distances(positions, p) for p in prims], axis=1), axis=1
    )
    return float(np.mean(np.minimum(dist, radius)))


def em_fit(positions, normals, init: FitResult, cfg: EmConfig) -> FitResult:
    """Alternate membership assignment and per-column re-estimation.

    Hard mode assigns each point to the best column (by unsquared distance, or
    by the estimator's algebraic energy when ``cfg.assignment == 'energy'``),
    optionally gated by normal agreement, with points beyond ``unassign_cap``
    left unassigned; soft mode uses a row softmax of -distance^2/temperature.
    Types stay fixed at the init's vote. Columns whose segment collapses below
    the estimator minimum are dropped and reported in the metadata.
    """
    positions = np.asarray(positions, dtype=np.float64)
    normals = None if normals is None else np.asarray(normals, dtype=np.float64)
    if init.k < 1:
        raise DegenerateInput("EM needs at least one initial primitive")

    order = np.argsort([-p.confidence for p in init.primitives], kind="stable")
    keep = sorted(order[: cfg.k_max])
    prims: List[PrimitiveParams] = [init.primitives[i].params for i in keep]
    types = [p.type_index for p in prims]

    n = positions.shape[0]
    collapsed: List[int] = []
    changes: List[float] = []
    energy_trace: List[float] = []
    prev_labels = None

    select_best = cfg.keep_best and cfg.hard_assign and cfg.unassign_cap is not None
    best: Optional[Tuple[float, list, list]] = None
    if select_best:
        best = (_capped_mean_distance(positions, prims, cfg.unassign_cap),
                list(prims), list(types))

    for _ in range(cfg.iterations):
        weights, labels = _assign(positions, normals, prims, cfg)

        if cfg.track_energy:
            energy_trace.append(_total_energy(positions, weights, prims))

        if prev_labels is not None and prev_labels.shape == labels.shape:
            change = float(np.mean(prev_labels != labels))
            changes.append(change)
            if change < 1e-3:
                break
        prev_labels = labels

        new_prims, new_types, kept_cols = [], [], []
        for col, prim_type in enumerate(types):
            try:
                fit = fit_primitive(
                    prim_type, positions, normals, weights[:, col], ridge=cfg.ridge
                )
            except DegenerateInput:
                collapsed.append(col)
                continue
            new_prims.append(fit.params)
            new_types.append(prim_type)
            kept_cols.append(col)
        if not new_prims:
            break
        if len(kept_cols) != len(types):
            prev_labels = None  # column indices shifted; skip one change check
        prims, types = new_prims, new_types

        if cfg.track_energy:
            energy_trace.append(_total_energy(positions, weights[:, kept_cols], prims))
        if select_best:
            score = _capped_mean_distance(positions, prims, cfg.unassign_cap)
            if score <= best[0]:  # ties prefer the refit (e.g. dropped columns)
                best = (score, list(prims), list(types))

    if select_best:
        _, prims, types = best

    # final assignment so membership matches the returned parameters
    weights, _ = _assign(positions, normals, prims, cfg)
    if cfg.track_energy:
        energy_trace.append(_total_energy(positions, weights, prims))

    type_probs = np.zeros((n, 4))
    assigned = weights.sum(axis=1) > 0.0
    top = np.argmax(weights[assigned], axis=1)
    type_arr = np.asarray(types)
    type_probs[np.flatnonzero(assigned), type_arr[top]] = 1.0

    meta = {
        "method": "em",
        "config": {**asdict(cfg)},
        "collapsed_columns": collapsed,
        "membership_changes": changes,
        "energy_trace": energy_trace,
        "init_method": init.meta.get("method"),
    }
    prim_list = tuple(
        FittedPrimitive(p, confidence=float(weights[:, i].mean()))
        for i, p in enumerate(prims)
    )
    return FitResult(
        primitives=prim_list,
        membership=MembershipMatrix(weights),
        per_point_types=type_probs,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Ground-truth-membership fitters
# ---------------------------------------------------------------------------

def segment_fit(scene: GroundTruthScene, use_gt_types: bool = True,
                ridge: float = DEFAULT_RIDGE, method_label: str = "oracle"
                ) -> FitResult:
    """Fit one primitive per ground-truth membership column.

    With ``use_gt_types`` the declared surface type is used; otherwise all
    four estimators compete and the type with the smallest mean squared
    segment distance wins. Columns failing every estimator are dropped.
    """
    positions = scene.cloud.positions
    normals = scene.cloud.normals
    segments = []
    for col in range(scene.k):
        w = scene.membership.weights[:, col]
        idx = np.flatnonzero(w > 0.0)
        if idx.size == 0:
            continue
        if use_gt_types:
            try:
                out = fit_primitive(
                    scene.surfaces[col].prim_type, positions, normals, w, ridge=ridge
                )
            except DegenerateInput:
                continue
            segments.append((out.params, idx))
            continue
        best = None
        for prim_type in (PLANE, SPHERE, CYLINDER, CONE):
            try:
                out = fit_primitive(prim_type, positions, normals, w, ridge=ridge)
            except DegenerateInput:
                continue
            score = float(np.mean(surface_distances(positions[idx], out.params) ** 2))
            if best is None or score < best[0]:
                best = (score, out.params)
        if best is not None:
            segments.append((best[1], idx))
    meta = {"method": method_label, "seed": scene.seed, "use_gt_types": use_gt_types}
    return _fit_result_from_segments(scene.n, segments, meta)


def oracle_fit(scene: GroundTruthScene, ridge: float = DEFAULT_RIDGE) -> FitResult:
    """Estimate every primitive from its ground-truth segment and type."""
    return segment_fit(scene, use_gt_types=True, ridge=ridge, method_label="oracle")


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------

def discard_small(fit: FitResult, threshold: float = DISCARD_THRESHOLD) -> FitResult:
    """Drop columns whose mean membership falls below the threshold; remaining
    columns keep their order. Applying twice equals applying once."""
    means = fit.membership.weights.mean(axis=0)
    keep = [k for k in range(fit.k) if means[k] >= threshold]
    if len(keep) == fit.k:
        return fit
    return FitResult(
        primitives=tuple(fit.primitives[k] for k in keep),
        membership=MembershipMatrix(fit.membership.weights[:, keep]),
        per_point_types=fit.per_point_types,
        normals=fit.normals,
        meta={**fit.meta, "discarded_columns": [k for k in range(fit.k) if k not in keep]},
    )


def vote_types(type_probs: np.ndarray, membership: np.ndarray) -> np.ndarray:
    """Per-column type vote: argmax over types of the membership-weighted
    column sums of the type probabilities. Ties break to the lowest index."""
    scores = np.asarray(type_probs, dtype=np.float64).T @ np.asarray(
        membership, dtype=np.float64
    )
    return np.argmax(scores, axis=0)
