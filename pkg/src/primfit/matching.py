"""Segment correspondence: relaxed IoU, exact min-cost assignment, and the
residual-based matching variant.

Assignments are partial bijections of size min(K, K'). Ties between equally
cheap assignments are broken lexicographically over the (ground-truth,
predicted) pair list, so outputs are fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BoundedSurface, MembershipMatrix, PrimitiveParams
from .estimators import surface_distances


@dataclass(frozen=True)
class Assignment:
    """Partial bijection between ground-truth and predicted indices.

    ``total_score`` is the summed matched cost for cost-based matchings and the
    mean matched relaxed IoU for :func:`match_primitives`.
    """

    pairs: Tuple[Tuple[int, int], ...]
    unmatched_gt: Tuple[int, ...]
    unmatched_pred: Tuple[int, ...]
    total_score: float

    def pred_for_gt(self, k: int):
        for gt, pred in self.pairs:
            if gt == k:
                return pred
        return None


def relaxed_iou(w, w_hat) -> float:
    """Soft intersection-over-union of two weight vectors in [0, 1]^N:
    w.w_hat / (|w|_1 + |w_hat|_1 - w.w_hat). Two all-zero vectors score 0."""
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w.shape != w_hat.shape:
        raise ValueError("vectors must have the same length")
    inter = float(w @ w_hat)
    denom = float(np.abs(w).sum() + np.abs(w_hat).sum() - inter)
    if denom <= 0.0:
        return 0.0
    return inter / denom


def relaxed_iou_matrix(w_cols: np.ndarray, w_hat_cols: np.ndarray) -> np.ndarray:
    """Pairwise relaxed IoU between the columns of two membership matrices."""
    inter = w_cols.T @ w_hat_cols
    denom = w_cols.sum(axis=0)[:, None] + w_hat_cols.sum(axis=0)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, denom, out=out, where=denom > 0.0)
    return out


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost) -> Assignment:
    """Exact minimum-cost partial bijection of size min(K, K').

    Rectangular matrices are handled directly. Among all optimal assignments
    the lexicographically smallest pair list is returned, found by fixing
    pairs row by row and checking that the optimum is preserved.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n_gt, n_pred = cost.shape
    size = min(n_gt, n_pred)
    if size == 0:
        return Assignment(
            pairs=(),
            unmatched_gt=tuple(range(n_gt)),
            unmatched_pred=tuple(range(n_pred)),
            total_score=0.0,
        )

    best = _optimal_cost(cost)
    tol = 1e-9 * (1.0 + abs(best))

    pairs: List[Tuple[int, int]] = []
    rows_left = list(range(n_gt))
    cols_left = list(range(n_pred))
    fixed = 0.0
    for row in range(n_gt):
        if len(pairs) == size:
            break
        other_rows = [r for r in rows_left if r != row]
        chosen = None
        for col in cols_left:
            other_cols = [c for c in cols_left if c != col]
            rest = _optimal_cost(cost[np.ix_(other_rows, other_cols)])
            if fixed + cost[row, col] + rest <= best + tol:
                chosen = col
                break
        if chosen is None:
            rows_left.remove(row)  # this row is unmatched in every optimum
            continue
        pairs.append((row, chosen))
        fixed += cost[row, chosen]
        rows_left.remove(row)
        cols_left.remove(chosen)

    matched_gt = {r for r, _ in pairs}
    matched_pred = {c for _, c in pairs}
    return Assignment(
        pairs=tuple(pairs),
        unmatched_gt=tuple(r for r in range(n_gt) if r not in matched_gt),
        unmatched_pred=tuple(c for c in range(n_pred) if c not in matched_pred),
        total_score=fixed,
    )


def match_primitives(membership: MembershipMatrix,
                     membership_hat: MembershipMatrix) -> Assignment:
    """Match predicted to ground-truth segments by maximal relaxed IoU.

    Runs the assignment on cost 1 - RIoU; ``total_score`` reports the mean
    relaxed IoU of the matched pairs.
    """
    if membership.n != membership_hat.n:
        raise ValueError("membership matrices must describe the same points")
    riou = relaxed_iou_matrix(membership.weights, membership_hat.weights)
    if riou.size == 0:
        return hungarian(np.zeros(riou.shape))
    asn = hungarian(1.0 - riou)
    mean_riou = (
        float(np.mean([riou[g, p] for g, p in asn.pairs])) if asn.pairs else 0.0
    )
    return Assignment(
        pairs=asn.pairs,
        unmatched_gt=asn.unmatched_gt,
        unmatched_pred=asn.unmatched_pred,
        total_score=mean_riou,
    )


def match_by_residual(surfaces: Sequence[BoundedSurface],
                      prims: Sequence[PrimitiveParams]) -> Assignment:
    """Match by mean squared sample-to-primitive distance instead of segment
    overlap; the variant used when no membership prediction exists."""
    cost = np.zeros((len(surfaces), len(prims)))
    for i, surf in enumerate(surfaces):
        for j, prim in enumerate(prims):
            d = surface_distances(surf.samples, prim)
            cost[i, j] = float(np.mean(d**2))
    return hungarian(cost)
