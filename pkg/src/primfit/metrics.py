"""Per-shape evaluation metrics and their orchestration.

All per-segment metrics are computed after matching predicted to ground-truth
segments by relaxed IoU. Conventions for short predictions: segmentation IoU
and per-surface coverage average over all K ground-truth surfaces, scoring
unmatched ones 0; type accuracy, axis difference and the residual statistics
average only over matched pairs and are reported absent (None) when no pair
qualifies, so dataset aggregation can skip rather than dilute them.

Cloud coverage is computed over the points carrying ground-truth membership;
rows with all-zero membership (unknown surfaces, outliers) are excluded from
the denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import BoundedSurface, FitResult, GroundTruthScene, PrimitiveParams
from .estimators import surface_distances
from .losses import align_to_ground_truth
from .matching import Assignment, match_primitives, relaxed_iou

DEFAULT_EPSILONS = (0.01, 0.02)
DEFAULT_SCALE_BINS = (0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)


@dataclass(frozen=True)
class MetricsBundle:
    """One shape's evaluation row. Angle metrics are degrees, coverage and
    type accuracy are percentages; None marks metrics whose denominator was
    empty for this shape."""

    seg_mean_iou: float
    type_accuracy_pct: Optional[float]
    point_normal_deg: float
    primitive_axis_deg: Optional[float]
    sk_residual_mean: Optional[float]
    sk_residual_std: Optional[float]
    sk_coverage: Dict[float, float]
    p_coverage: Dict[float, float]
    per_surface_coverage: Dict[float, Tuple[float, ...]] = field(default_factory=dict)
    area_fractions: Tuple[float, ...] = ()

    def as_dict(self) -> dict:
        return {
            "seg_mean_iou": self.seg_mean_iou,
            "type_accuracy_pct": self.type_accuracy_pct,
            "point_normal_deg": self.point_normal_deg,
            "primitive_axis_deg": self.primitive_axis_deg,
            "sk_residual_mean": self.sk_residual_mean,
            "sk_residual_std": self.sk_residual_std,
            "sk_coverage": {str(e): v for e, v in self.sk_coverage.items()},
            "p_coverage": {str(e): v for e, v in self.p_coverage.items()},
            "per_surface_coverage": {
                str(e): list(v) for e, v in self.per_surface_coverage.items()
            },
            "area_fractions": list(self.area_fractions),
        }


def one_hot_membership(weights: np.ndarray) -> np.ndarray:
    """Row-wise one-hot conversion by argmax; all-zero rows stay zero."""
    out = np.zeros_like(weights)
    assigned = weights.sum(axis=1) > 0.0
    idx = np.argmax(weights[assigned], axis=1)
    out[np.flatnonzero(assigned), idx] = 1.0
    return out


def seg_mean_iou(membership: np.ndarray, membership_hat: np.ndarray,
                 assignment: Optional[Assignment] = None) -> float:
    """Hard IoU between ground-truth columns and the one-hot converted
    prediction, averaged over all K ground-truth segments (unmatched score 0)."""
    if assignment is None:
        assignment = match_primitives_arrays(membership, membership_hat)
    hard = one_hot_membership(membership_hat)
    k = membership.shape[1]
    if k == 0:
        return 0.0
    vals = np.zeros(k)
    for gt_idx, pred_idx in assignment.pairs:
        vals[gt_idx] = relaxed_iou(membership[:, gt_idx], hard[:, pred_idx])
    return float(np.mean(vals))


def match_primitives_arrays(membership: np.ndarray,
                            membership_hat: np.ndarray) -> Assignment:
    from .core import MembershipMatrix

    return match_primitives(
        MembershipMatrix(membership), MembershipMatrix(membership_hat)
    )


def type_accuracy(gt_types: Sequence[int], pred_types: Sequence[Optional[int]]
                  ) -> Optional[float]:
    """Percentage of matched pairs whose predicted type equals the ground
    truth; None when there are no matched pairs."""
    pairs = [(g, p) for g, p in zip(gt_types, pred_types) if p is not None]
    if not pairs:
        return None
    return 100.0 * float(np.mean([g == p for g, p in pairs]))


def point_normal_diff_deg(normals: np.ndarray, normals_hat: np.ndarray) -> float:
    """Mean unoriented angle between normal pairs, in degrees."""
    cos = np.clip(np.abs(np.einsum("ij,ij->i", normals, normals_hat)), 0.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cos))))


def axis_diff_deg(gt_prims: Sequence[PrimitiveParams],
                  prims_matched: Sequence[Optional[PrimitiveParams]],
                  type_correct: Sequence[bool]) -> Optional[float]:
    """Mean axis angle (degrees) over type-correct matched pairs; spheres
    contribute 0. None when no pair qualifies."""
    vals = []
    for gt, pred, ok in zip(gt_prims, prims_matched, type_correct):
        if pred is None or not ok:
            continue
        if gt.axis is None or pred.axis is None:
            vals.append(0.0)
            continue
        cos = min(abs(float(gt.axis @ pred.axis)), 1.0)
        vals.append(float(np.degrees(np.arccos(cos))))
    return float(np.mean(vals)) if vals else None


def sk_residual(surfaces: Sequence[BoundedSurface],
                prims_matched: Sequence[Optional[PrimitiveParams]]
                ) -> Tuple[Optional[float], Optional[float]]:
    """Mean and population std across matched pairs of the per-surface mean
    unsquared sample distance to the matched primitive."""
    vals = []
    for surf, prim in zip(surfaces, prims_matched):
        if prim is None:
            continue
        vals.append(float(np.mean(surface_distances(surf.samples, prim))))
    if not vals:
        return None, None
    arr = np.asarray(vals)
    return float(arr.mean()), float(arr.std())


def per_surface_coverage(surfaces: Sequence[BoundedSurface],
                         prims_matched: Sequence[Optional[PrimitiveParams]],
                         eps: float) -> np.ndarray:
    """Percentage of each surface's samples within eps of its matched
    primitive; 0 for unmatched surfaces."""
    out = np.zeros(len(surfaces))
    for i, (surf, prim) in enumerate(zip(surfaces, prims_matched)):
        if prim is None:
            continue
        d = surface_distances(surf.samples, prim)
        out[i] = 100.0 * float(np.mean(d < eps))
    return out


def sk_coverage(surfaces: Sequence[BoundedSurface],
                prims_matched: Sequence[Optional[PrimitiveParams]],
                eps: float) -> float:
    """Mean per-surface coverage over all K ground-truth surfaces."""
    if not surfaces:
        return 0.0
    return float(np.mean(per_surface_coverage(surfaces, prims_matched, eps)))


def p_coverage(points: np.ndarray, prims: Sequence[PrimitiveParams],
               eps: float) -> float:
    """Percentage of the given points within eps of the nearest primitive."""
    if points.shape[0] == 0:
        return 0.0
    if not prims:
        return 0.0
    dist = np.min(
        np.stack([surface_distances(points, p) for p in prims], axis=1), axis=1
    )
    return 100.0 * float(np.mean(dist < eps))


def scale_binned_sk_coverage(per_surface: np.ndarray,
                             area_fractions: Sequence[float],
                             bin_edges: Sequence[float] = DEFAULT_SCALE_BINS):
    """Aggregate per-surface coverage into area-fraction bins.

    Returns (bin_edges, mean coverage per bin with None for empty bins,
    surface count per bin).
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    fracs = np.asarray(area_fractions, dtype=np.float64)
    means: List[Optional[float]] = []
    counts: List[int] = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (fracs >= lo) & (fracs < hi)
        if lo == edges[-2]:  # close the last bin on the right
            mask = (fracs >= lo) & (fracs <= hi)
        counts.append(int(mask.sum()))
        means.append(float(per_surface[mask].mean()) if np.any(mask) else None)
    return tuple(edges.tolist()), tuple(means), tuple(counts)


def compute_metrics(scene: GroundTruthScene, fit: FitResult,
                    epsilons: Sequence[float] = DEFAULT_EPSILONS) -> MetricsBundle:
    """Evaluate every metric for one shape."""
    assignment, aligned, prims = align_to_ground_truth(scene, fit)
    gt_types = scene.surface_types()

    # predicted per-segment type: the matched primitive's own type
    pred_types: List[Optional[int]] = [
        None if p is None else p.type_index for p in prims
    ]
    type_correct = [
        p is not None and p == g for p, g in zip(pred_types, gt_types)
    ]

    seg = seg_mean_iou(scene.membership.weights, fit.membership.weights, assignment)
    acc = type_accuracy(gt_types, pred_types)
    if fit.normals is not None and scene.cloud.normals is not None:
        nrm_deg = point_normal_diff_deg(scene.cloud.normals, fit.normals)
    else:
        nrm_deg = 0.0  # no normal prediction channel: the input normals are used
    axis_deg = axis_diff_deg([s.params for s in scene.surfaces], prims, type_correct)
    res_mean, res_std = sk_residual(scene.surfaces, prims)

    sk_cov: Dict[float, float] = {}
    per_surf: Dict[float, Tuple[float, ...]] = {}
    for eps in epsilons:
        cov = per_surface_coverage(scene.surfaces, prims, eps)
        per_surf[eps] = tuple(cov.tolist())
        sk_cov[eps] = float(np.mean(cov)) if cov.size else 0.0

    assigned = scene.membership.assigned_mask()
    cloud_pts = scene.cloud.positions[assigned]
    all_prims = [p.params for p in fit.primitives]
    p_cov = {eps: p_coverage(cloud_pts, all_prims, eps) for eps in epsilons}

    return MetricsBundle(
        seg_mean_iou=seg,
        type_accuracy_pct=acc,
        point_normal_deg=nrm_deg,
        primitive_axis_deg=axis_deg,
        sk_residual_mean=res_mean,
        sk_residual_std=res_std,
        sk_coverage=sk_cov,
        p_coverage=p_cov,
        per_surface_coverage=per_surf,
        area_fractions=tuple(float(s.area_fraction) for s in scene.surfaces),
    )
