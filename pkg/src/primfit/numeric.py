"""Stable, differentiable weighted least-squares kernels.

Two solvers back every estimator in the toolkit:

* :func:`weighted_homogeneous_lsq` -- argmin over unit v of
  ``||diag(w)^(1/2) X v||^2``, solved through the 3x3 weighted Gram matrix.
* :func:`weighted_linear_lsq` -- ridge-regularized
  ``argmin_c ||diag(w)^(1/2) (X c - y)||^2 + lam ||c||^2`` via normal
  equations and Cholesky.

Both expose hand-derived Jacobians with respect to their inputs. Degenerate
spectra are handled by clamping the eigen-gap denominators at 1e-10, and the
linear solve is trivialized (constant zero solution, zero gradients) when the
condition number of the weighted factor exceeds 1e5.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DegenerateInput, canonical_sign

#: eigen-gap clamp for gradient denominators
CLAMP_EPS = 1e-10
#: total-weight / effective-row cutoff below which a solve is degenerate
WEIGHT_EPS = 1e-12
#: factor condition number above which the linear solve is trivialized
COND_TRIVIALIZE = 1e5
#: default l2 regularizer for the linear solve
DEFAULT_RIDGE = 1e-8


@dataclass(frozen=True)
class HomogeneousLsqSolution:
    """Unit minimizer v, smallest singular value and condition number of the
    weighted factor diag(w)^(1/2) X."""

    v: np.ndarray
    sigma_min: float
    cond: float


@dataclass(frozen=True)
class LinearLsqSolution:
    """Solution vector c, factor condition number, and whether the problem was
    trivialized by the condition-number guard."""

    c: np.ndarray
    cond: float
    trivialized: bool


@dataclass(frozen=True)
class GradientBundle:
    """Jacobians of a kernel or estimator output with respect to its inputs.

    Shapes: d_weights is (out, N); d_points and d_normals are (out, N, 3);
    d_targets is (out, N); d_ridge is (out,). Fields a kernel does not consume
    are None.
    """

    d_weights: np.ndarray
    d_points: Optional[np.ndarray] = None
    d_normals: Optional[np.ndarray] = None
    d_targets: Optional[np.ndarray] = None
    d_ridge: Optional[np.ndarray] = None


def _check_weighted_rows(X: np.ndarray, w: np.ndarray, min_rows: int) -> None:
    if X.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {X.shape}")
    if w.shape != (X.shape[0],):
        raise ValueError("weights must be one per row")
    if float(w.sum()) < WEIGHT_EPS:
        raise DegenerateInput(f"total weight {w.sum():.3g} below {WEIGHT_EPS:g}")
    if int(np.count_nonzero(w > WEIGHT_EPS)) < min_rows:
        raise DegenerateInput(f"fewer than {min_rows} rows carry weight > {WEIGHT_EPS:g}")


# ---------------------------------------------------------------------------
# Homogeneous least squares (argmin over the unit sphere)
# ---------------------------------------------------------------------------

def _hom_solve(X: np.ndarray, w: np.ndarray):
    _check_weighted_rows(X, w, min_rows=3)
    if X.shape[1] != 3:
        raise ValueError("homogeneous solve expects an (N, 3) matrix")
    gram = (X * w[:, None]).T @ X
    lam, vecs = np.linalg.eigh(gram)  # ascending eigenvalues
    v = vecs[:, 0] * canonical_sign(vecs[:, 0])
    sigma_min = float(np.sqrt(max(lam[0], 0.0)))
    cond = float(np.sqrt(lam[2] / lam[0])) if lam[0] > 0.0 else np.inf
    return HomogeneousLsqSolution(v=v, sigma_min=sigma_min, cond=cond), lam, vecs


def weighted_homogeneous_lsq(X, w) -> HomogeneousLsqSolution:
    """Minimize ||diag(w)^(1/2) X v||^2 over unit vectors v.

    The returned direction has a deterministic sign: its first component with
    magnitude above 1e-12 is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    sol, _, _ = _hom_solve(X, w)
    return sol


def _hom_grad(X: np.ndarray, w: np.ndarray, lam: np.ndarray, vecs: np.ndarray,
              v: np.ndarray) -> GradientBundle:
    # First-order eigenvector perturbation of the weighted Gram matrix, with
    # the gap denominators clamped so repeated eigenvalues stay finite.
    others = vecs[:, 1:]                                   # (3, 2)
    gap = np.maximum(lam[1:] - lam[0], CLAMP_EPS)
    coef = -1.0 / gap                                      # (2,)
    proj = X @ others                                      # (N, 2) rows x_i . v_j
    along = X @ v                                          # (N,)  rows x_i . v

    d_weights = np.einsum("oj,ij,i,j->oi", others, proj, along, coef)
    inner = w[:, None, None] * (
        others.T[None, :, :] * along[:, None, None]
        + proj[:, :, None] * v[None, None, :]
    )                                                      # (N, 2, 3)
    d_points = np.einsum("oj,ijc,j->oic", others, inner, coef)
    return GradientBundle(d_weights=d_weights, d_points=d_points)


def weighted_homogeneous_lsq_grad(X, w) -> GradientBundle:
    """Jacobians of the homogeneous solution v with respect to w and X."""
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    sol, lam, vecs = _hom_solve(X, w)
    return _hom_grad(X, w, lam, vecs, sol.v)


# ---------------------------------------------------------------------------
# Linear least squares with ridge + condition guard
# ---------------------------------------------------------------------------

def _lin_solve(X: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float):
    _check_weighted_rows(X, w, min_rows=1)
    d = X.shape[1]
    if y.shape != (X.shape[0],):
        raise ValueError("targets must be one per row")
    if ridge < 0.0:
        raise ValueError("ridge must be nonnegative")

    gram = (X * w[:, None]).T @ X
    rhs = X.T @ (w * y)
    evals = np.linalg.eigvalsh(gram)
    cond = float(np.sqrt(evals[-1] / evals[0])) if evals[0] > 0.0 else np.inf
    if cond > COND_TRIVIALIZE:
        return LinearLsqSolution(c=np.zeros(d), cond=cond, trivialized=True), None

    system = gram + ridge * np.eye(d)
    try:
        chol = np.linalg.cholesky(system)
    except np.linalg.LinAlgError:
        return LinearLsqSolution(c=np.zeros(d), cond=cond, trivialized=True), None
    c = _cho_solve(chol, rhs)
    inv = _cho_solve(chol, np.eye(d))
    return LinearLsqSolution(c=c, cond=cond, trivialized=False), inv


def _cho_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, z)


def weighted_linear_lsq(X, y, w, ridge: float = DEFAULT_RIDGE) -> LinearLsqSolution:
    """Solve argmin_c ||diag(w)^(1/2)(X c - y)||^2 + ridge * ||c||^2.

    When the condition number of diag(w)^(1/2) X exceeds 1e5 the problem is
    trivialized: the zero vector is returned with ``trivialized=True`` so ill
    posed segments cannot blow up downstream gradients.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    sol, _ = _lin_solve(X, y, w, float(ridge))
    return sol


def _lin_grad(X: np.ndarray, y: np.ndarray, w: np.ndarray, c: np.ndarray,
              inv: Optional[np.ndarray]) -> GradientBundle:
    n, d = X.shape
    if inv is None:  # trivialized: constant output
        zero = np.zeros
        return GradientBundle(
            d_weights=zero((d, n)),
            d_points=zero((d, n, d)),
            d_targets=zero((d, n)),
            d_ridge=zero(d),
        )
    resid = y - X @ c                                      # (N,)
    d_weights = inv @ (X * resid[:, None]).T               # (d, N)
    d_targets = inv @ (X * w[:, None]).T                   # (d, N)
    d_points = np.einsum("oq,i->oiq", inv, w * resid) - np.einsum(
        "oi,i,q->oiq", inv @ X.T, w, c
    )
    d_ridge = -inv @ c
    return GradientBundle(
        d_weights=d_weights, d_points=d_points, d_targets=d_targets, d_ridge=d_ridge
    )


def weighted_linear_lsq_grad(X, y, w, ridge: float = DEFAULT_RIDGE) -> GradientBundle:
    """Jacobians of the linear solution c with respect to w, X, y and ridge,
    by implicit differentiation of the regularized normal equations. All
    gradients are zero when the solve was trivialized."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    sol, inv = _lin_solve(X, y, w, float(ridge))
    return _lin_grad(X, y, w, sol.c, inv)


def condition_number(A) -> float:
    """Ratio of the largest to the smallest singular value; inf when the
    smallest is zero."""
    A = np.asarray(A, dtype=np.float64)
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] == 0.0:
        return np.inf
    return float(s[0] / s[-1])
