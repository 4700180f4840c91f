"""Training-style losses scored against a matched ground-truth scene.

Five terms, summed without weights: segment overlap, unoriented normal angle,
per-point type cross entropy, per-surface squared fitting residual, and axis
angle. The total is the plain left-to-right float sum of the five terms.

Prediction channels a fit does not provide (normals, per-point types)
contribute zero. Ground-truth segments without a matched prediction score the
maximal segmentation term (1) and are skipped in the residual and axis
averages.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .core import (
    BoundedSurface,
    FitResult,
    GroundTruthScene,
    PrimitiveParams,
)
from .estimators import surface_distances
from .matching import Assignment, match_primitives, relaxed_iou

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    seg: float
    norm: float
    type_: float
    res: float
    axis: float
    total: float

    @staticmethod
    def build(seg, norm, type_, res, axis) -> "LossBreakdown":
        total = seg + norm + type_ + res + axis  # fixed summation order
        return LossBreakdown(seg, norm, type_, res, axis, total)


def seg_loss(membership: np.ndarray, membership_hat: np.ndarray) -> float:
    """Mean (1 - RIoU) over ground-truth columns; the predicted matrix must
    already be reordered so column k corresponds to ground-truth segment k,
    with all-zero columns standing in for unmatched segments."""
    k = membership.shape[1]
    if k == 0:
        return 0.0
    vals = [
        1.0 - relaxed_iou(membership[:, i], membership_hat[:, i]) for i in range(k)
    ]
    return float(np.mean(vals))


def normal_loss(normals: np.ndarray, normals_hat: np.ndarray) -> float:
    """Mean unoriented cosine mismatch (1 - |n . n_hat|) over all points."""
    cos = np.abs(np.einsum("ij,ij->i", normals, normals_hat))
    return float(np.mean(1.0 - cos))


def type_loss(types_onehot: np.ndarray, type_probs: np.ndarray,
              membership: np.ndarray) -> float:
    """Cross entropy between ground-truth one-hot types and predicted type
    probabilities, ignoring unassigned points but normalizing by N."""
    n = types_onehot.shape[0]
    if n == 0:
        return 0.0
    assigned = membership.sum(axis=1) > 0.0
    if not np.any(assigned):
        return 0.0
    probs = np.clip(type_probs[assigned], LOG_CLAMP, None)
    ent = -np.sum(types_onehot[assigned] * np.log(probs), axis=1)
    return float(ent.sum() / n)


def residual_loss(surfaces: Sequence[BoundedSurface],
                  prims_matched: Sequence[Optional[PrimitiveParams]]) -> float:
    """Mean over matched surfaces of the mean squared distance from the stored
    surface samples to the matched primitive, using each surface's own type's
    distance. Unmatched surfaces are skipped."""
    vals = []
    for surf, prim in zip(surfaces, prims_matched):
        if prim is None:
            continue
        d = surface_distances(surf.samples, prim)
        vals.append(float(np.mean(d**2)))
    return float(np.mean(vals)) if vals else 0.0


def axis_loss(gt_prims: Sequence[PrimitiveParams],
              prims_matched: Sequence[Optional[PrimitiveParams]]) -> float:
    """Mean (1 - |axis . axis_hat|) over matched pairs. Spheres have no axis
    and contribute zero; a matched prediction lacking an axis where the ground
    truth has one scores the maximal term."""
    vals = []
    for gt, pred in zip(gt_prims, prims_matched):
        if pred is None:
            continue
        gt_axis = gt.axis
        if gt_axis is None:
            vals.append(0.0)
            continue
        pred_axis = pred.axis
        if pred_axis is None:
            vals.append(1.0)
            continue
        vals.append(1.0 - min(abs(float(gt_axis @ pred_axis)), 1.0))
    return float(np.mean(vals)) if vals else 0.0


def align_to_ground_truth(scene: GroundTruthScene, fit: FitResult,
                          assignment: Optional[Assignment] = None):
    """Reorder a fit against the scene: returns (assignment, membership_hat
    aligned N x K with zero columns for unmatched segments, matched primitive
    list with None for unmatched)."""
    if assignment is None:
        assignment = match_primitives(scene.membership, fit.membership)
    k = scene.k
    aligned = np.zeros((scene.n, k))
    prims: List[Optional[PrimitiveParams]] = [None] * k
    for gt_idx, pred_idx in assignment.pairs:
        aligned[:, gt_idx] = fit.membership.weights[:, pred_idx]
        prims[gt_idx] = fit.primitives[pred_idx].params
    return assignment, aligned, prims


def total_loss(scene: GroundTruthScene, fit: FitResult) -> LossBreakdown:
    """Match the fit to the scene and evaluate all five loss terms."""
    _, aligned, prims = align_to_ground_truth(scene, fit)
    seg = seg_loss(scene.membership.weights, aligned)
    if fit.normals is not None and scene.cloud.normals is not None:
        norm = normal_loss(scene.cloud.normals, fit.normals)
    else:
        norm = 0.0
    if fit.per_point_types is not None:
        type_ = type_loss(scene.types.onehot, fit.per_point_types,
                          scene.membership.weights)
    else:
        type_ = 0.0
    res = residual_loss(scene.surfaces, prims)
    axis = axis_loss([s.params for s in scene.surfaces], prims)
    return LossBreakdown.build(seg, norm, type_, res, axis)
