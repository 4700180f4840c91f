"""Per-type primitive estimators and the exact point-to-primitive distances.

Each ``fit_*`` function turns a point segment (points, optional normals, one
column of soft membership weights) into primitive parameters:

* plane   -- weighted total least squares on centered points; offset from the
             weighted mean projection.
* sphere  -- algebraic center (linear least squares after eliminating the
             radius), radius from the weighted mean squared distance.
* cylinder-- axis from the null direction of the weighted normals, then an
             algebraic circle fit of the points projected along the axis.
* cone    -- apex from the weighted tangent-plane intersection, axis from a
             plane fit of the normals, half-angle as a weighted average.

With ``with_grad=True`` every estimator also returns the full Jacobian of its
parameters with respect to the weights and, where consumed, the points and
normals, chained by hand through the least-squares kernels. The Jacobians are
exact wherever the pipeline is differentiable; sign fixes and the cone's axis
flip are piecewise constant and differentiated on the active branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .core import (
    CONE,
    CYLINDER,
    PLANE,
    SPHERE,
    Cone,
    Cylinder,
    DegenerateInput,
    MembershipMatrix,
    Plane,
    PrimitiveParams,
    Sphere,
)
from .numeric import (
    DEFAULT_RIDGE,
    WEIGHT_EPS,
    GradientBundle,
    _hom_grad,
    _hom_solve,
    _lin_grad,
    _lin_solve,
)

#: clamp for arccos arguments before differentiation
ACOS_CLIP = 1.0 - 1e-12
#: the cone half-angle is kept this far inside (0, pi/2)
THETA_MARGIN = 1e-4
#: minimum effective points (weight > 1e-12) per primitive type
MIN_EFFECTIVE = {PLANE: 3, SPHERE: 4, CYLINDER: 5, CONE: 6}


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def surface_distances(points, prim: PrimitiveParams) -> np.ndarray:
    """Unsquared distance from each point to the unbounded primitive surface."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if isinstance(prim, Plane):
        return np.abs(p @ prim.a - prim.d)
    if isinstance(prim, Sphere):
        return np.abs(np.linalg.norm(p - prim.c, axis=1) - prim.r)
    if isinstance(prim, Cylinder):
        v = p - prim.c
        radial_sq = np.einsum("ij,ij->i", v, v) - (v @ prim.a) ** 2
        return np.abs(np.sqrt(np.maximum(radial_sq, 0.0)) - prim.r)
    if isinstance(prim, Cone):
        v = p - prim.c
        dist = np.linalg.norm(v, axis=1)
        safe = np.maximum(dist, 1e-300)
        alpha = np.arccos(np.clip((v @ prim.a) / safe, -1.0, 1.0))
        beta = np.minimum(np.abs(alpha - prim.theta), np.pi / 2)
        return dist * np.sin(beta)
    raise TypeError(f"unknown primitive {type(prim)!r}")


def distance(p, prim: PrimitiveParams) -> float:
    """Unsquared distance from a single point to a primitive."""
    return float(surface_distances(np.asarray(p, dtype=np.float64)[None, :], prim)[0])


def squared_distance_param_grad(points, prim: PrimitiveParams) -> np.ndarray:
    """d(squared distance)/d(params) for each point, as an (N, P) matrix.

    Parameter order matches the estimator output rows: plane [a, d],
    sphere [c, r], cylinder [a, c, r], cone [c, a, theta]. Used to chain
    per-primitive losses back through the estimators.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = p.shape[0]
    if isinstance(prim, Plane):
        resid = p @ prim.a - prim.d                       # signed
        out = np.empty((n, 4))
        out[:, :3] = 2.0 * resid[:, None] * p
        out[:, 3] = -2.0 * resid
        return out
    if isinstance(prim, Sphere):
        diff = p - prim.c
        dist = np.maximum(np.linalg.norm(diff, axis=1), 1e-300)
        resid = dist - prim.r
        out = np.empty((n, 4))
        out[:, :3] = -2.0 * (resid / dist)[:, None] * diff
        out[:, 3] = -2.0 * resid
        return out
    if isinstance(prim, Cylinder):
        v = p - prim.c
        axial = v @ prim.a
        rho = np.sqrt(np.maximum(np.einsum("ij,ij->i", v, v) - axial**2, 0.0))
        rho_safe = np.maximum(rho, 1e-300)
        resid = rho - prim.r
        drho_dv = (v - axial[:, None] * prim.a[None, :]) / rho_safe[:, None]
        out = np.empty((n, 7))
        out[:, :3] = 2.0 * resid[:, None] * (-(axial / rho_safe)[:, None] * v)
        out[:, 3:6] = -2.0 * resid[:, None] * drho_dv
        out[:, 6] = -2.0 * resid
        return out
    if isinstance(prim, Cone):
        v = p - prim.c
        dist = np.linalg.norm(v, axis=1)
        safe = np.maximum(dist, 1e-300)
        vhat = v / safe[:, None]
        z = np.clip(vhat @ prim.a, -1.0, 1.0)
        alpha = np.arccos(z)
        delta = alpha - prim.theta
        capped = np.abs(delta) >= np.pi / 2
        sin_d, cos_d = np.sin(delta), np.cos(delta)
        dalpha_dz = -1.0 / np.sqrt(np.maximum(1.0 - z**2, 1e-24))
        # D^2 = |v|^2 sin^2(delta) below the cap, |v|^2 at or above it
        common = (dist**2) * 2.0 * sin_d * cos_d * dalpha_dz
        dz_dv = (prim.a[None, :] - z[:, None] * vhat) / safe[:, None]
        d_v = 2.0 * v * np.where(capped, 1.0, sin_d**2)[:, None] + np.where(
            capped, 0.0, common
        )[:, None] * dz_dv
        d_a = np.where(capped, 0.0, common)[:, None] * vhat
        d_theta = np.where(capped, 0.0, -(dist**2) * 2.0 * sin_d * cos_d)
        out = np.empty((n, 7))
        out[:, :3] = -d_v
        out[:, 3:6] = d_a
        out[:, 6] = d_theta
        return out
    raise TypeError(f"unknown primitive {type(prim)!r}")


# ---------------------------------------------------------------------------
# Fit outputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOutput:
    """Estimated parameters, optional Jacobians, and whether any internal
    least-squares stage was trivialized by the condition guard."""

    params: PrimitiveParams
    grad: Optional[GradientBundle] = None
    trivialized: bool = False


def _prepare(points, weights, min_effective: int, normals=None):
    p = np.asarray(points, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    if w.shape != (p.shape[0],):
        raise ValueError("weights must be one per point")
    if int(np.count_nonzero(w > WEIGHT_EPS)) < min_effective:
        raise DegenerateInput(
            f"segment has fewer than {min_effective} effective points"
        )
    if normals is None:
        return p, w
    nrm = np.asarray(normals, dtype=np.float64)
    if nrm.shape != p.shape:
        raise ValueError("normals must match points")
    return p, w, nrm


# ---------------------------------------------------------------------------
# Plane
# ---------------------------------------------------------------------------

def fit_plane(points, weights, with_grad: bool = False) -> FitOutput:
    """Weighted plane fit: normal from the homogeneous solve on centered
    points, offset d as the weighted mean projection onto the normal."""
    p, w = _prepare(points, weights, MIN_EFFECTIVE[PLANE])
    wsum = float(w.sum())
    mu = (w @ p) / wsum
    centered = p - mu
    sol, lam, vecs = _hom_solve(centered, w)
    a = sol.v
    d = float(a @ mu)
    params = Plane(a, d)
    if not with_grad:
        return FitOutput(params)

    kb = _hom_grad(centered, w, lam, vecs, a)
    colsum = kb.d_points.sum(axis=1)                       # (3, 3)
    da_dw = kb.d_weights - np.einsum("oc,ic->oi", colsum, centered) / wsum
    da_dp = kb.d_points - np.einsum("oc,i->oic", colsum, w) / wsum
    dd_dw = mu @ da_dw + (centered @ a) / wsum
    dd_dp = np.einsum("o,oic->ic", mu, da_dp) + np.outer(w, a) / wsum

    grad = GradientBundle(
        d_weights=np.vstack([da_dw, dd_dw[None, :]]),
        d_points=np.concatenate([da_dp, dd_dp[None, :, :]], axis=0),
    )
    return FitOutput(params, grad)


# ---------------------------------------------------------------------------
# Sphere
# ---------------------------------------------------------------------------

def _algebraic_center_system(q: np.ndarray, w: np.ndarray):
    """Design matrix and targets of the algebraic circle/sphere center fit.

    Eliminating the squared radius from sum_i w_i (|q_i - c|^2 - r^2)^2 leaves
    sum_i w_i (y_i - 2 (q_i - mean)^T c)^2, so the least-squares rows are
    2*(q_i - mean) with targets y_i = |q_i|^2 - weighted mean |q|^2.
    """
    wsum = float(w.sum())
    mu = (w @ q) / wsum
    sq = np.einsum("ij,ij->i", q, q)
    musq = float(w @ sq) / wsum
    return 2.0 * (q - mu), sq - musq, mu, musq, wsum


def fit_sphere(points, weights, with_grad: bool = False,
               ridge: float = DEFAULT_RIDGE) -> FitOutput:
    """Algebraic sphere fit. Near-coplanar segments trip the condition guard
    and come back trivialized (center at the origin) instead of exploding."""
    p, w = _prepare(points, weights, MIN_EFFECTIVE[SPHERE])
    design, targets, mu, musq, wsum = _algebraic_center_system(p, w)
    sol, inv = _lin_solve(design, targets, w, ridge)
    c = sol.c
    diff = p - c
    sq = np.einsum("ij,ij->i", diff, diff)
    r_sq = float(w @ sq) / wsum
    r = float(np.sqrt(max(r_sq, 0.0)))
    params = Sphere(c, r)
    if not with_grad:
        return FitOutput(params, trivialized=sol.trivialized)

    kb = _lin_grad(design, targets, w, c, inv)
    gx, gy, gw = kb.d_points, kb.d_targets, kb.d_weights
    sum_gx = gx.sum(axis=1)                                # (3, 3)
    sum_gy = gy.sum(axis=1)                                # (3,)
    psq = np.einsum("ij,ij->i", p, p)

    dc_dw = (
        gw
        - np.einsum("oc,ic->oi", sum_gx, 2.0 * (p - mu) / wsum)
        - np.einsum("o,i->oi", sum_gy, (psq - musq) / wsum)
    )
    dc_dp = (
        2.0 * gx
        - np.einsum("oc,i->oic", sum_gx, 2.0 * w / wsum)
        + np.einsum("oi,ic->oic", gy - np.outer(sum_gy, w) / wsum, 2.0 * p)
    )

    pull = -2.0 * (mu - c)                                 # d(r^2)/dc
    dr2_dw = (sq - r_sq) / wsum + pull @ dc_dw
    dr2_dp = 2.0 * w[:, None] * diff / wsum + np.einsum("o,oic->ic", pull, dc_dp)
    r_safe = max(r, 1e-300)
    grad = GradientBundle(
        d_weights=np.vstack([dc_dw, dr2_dw[None, :] / (2.0 * r_safe)]),
        d_points=np.concatenate(
            [dc_dp, dr2_dp[None, :, :] / (2.0 * r_safe)], axis=0
        ),
    )
    return FitOutput(params, grad, trivialized=sol.trivialized)


# ---------------------------------------------------------------------------
# Cylinder
# ---------------------------------------------------------------------------

def _perp_basis(a: np.ndarray):
    """Orthonormal basis (e1, e2) of the plane orthogonal to the unit axis a.
    The helper axis is the coordinate axis least aligned with a, a piecewise
    constant choice that keeps the basis differentiable almost everywhere."""
    h = np.zeros(3)
    h[int(np.argmin(np.abs(a)))] = 1.0
    u = np.cross(h, a)
    nu = float(np.linalg.norm(u))
    e1 = u / nu
    e2 = np.cross(a, e1)
    return e1, e2, h, nu


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _perp_basis_grad(a, e1, e2, h, nu):
    de1_da = (np.eye(3) - np.outer(e1, e1)) @ _skew(h) / nu
    de2_da = -_skew(e1) + _skew(a) @ de1_da
    return de1_da, de2_da


def fit_cylinder(points, normals, weights, with_grad: bool = False,
                 ridge: float = DEFAULT_RIDGE) -> FitOutput:
    """Cylinder fit: the axis is the direction most orthogonal to the weighted
    normals; points are projected along the axis and a circle is fitted with
    the algebraic center system. The returned center satisfies a.c = 0."""
    p, w, nrm = _prepare(points, weights, MIN_EFFECTIVE[CYLINDER], normals)
    axis_sol, lam, vecs = _hom_solve(nrm, w)
    a = axis_sol.v
    e1, e2, h, nu = _perp_basis(a)
    basis = np.stack([e1, e2], axis=0)                     # (2, 3)
    q = p @ basis.T                                        # (N, 2)

    design, targets, mu2, musq2, wsum = _algebraic_center_system(q, w)
    sol, inv = _lin_solve(design, targets, w, ridge)
    c2 = sol.c
    g2 = q - c2
    sq2 = np.einsum("ij,ij->i", g2, g2)
    r_sq = float(w @ sq2) / wsum
    r = float(np.sqrt(max(r_sq, 0.0)))
    center = c2[0] * e1 + c2[1] * e2
    params = Cylinder(a, center, r)
    if not with_grad:
        return FitOutput(params, trivialized=sol.trivialized)

    axis_kb = _hom_grad(nrm, w, lam, vecs, a)
    da_dw, da_dn = axis_kb.d_weights, axis_kb.d_points

    de1_da, de2_da = _perp_basis_grad(a, e1, e2, h, nu)
    # dq_i = proj_rows[i] @ da for the axis-mediated path
    proj_rows = np.stack([p @ de1_da, p @ de2_da], axis=1)  # (N, 2, 3)

    kb = _lin_grad(design, targets, w, c2, inv)
    gx, gy, gw = kb.d_points, kb.d_targets, kb.d_weights    # (2,N,2),(2,N),(2,N)
    sum_gx = gx.sum(axis=1)                                 # (2, 2)
    sum_gy = gy.sum(axis=1)                                 # (2,)
    qsq = np.einsum("ij,ij->i", q, q)

    # linear map dc2 = axis_map @ da collecting every axis-mediated term
    mean_rows = np.einsum("i,ijc->jc", w, proj_rows) / wsum         # (2, 3)
    lx = 2.0 * np.einsum("oij,ijc->oc", gx, proj_rows) - 2.0 * sum_gx @ mean_rows
    row_dots = 2.0 * np.einsum("ij,ijc->ic", q, proj_rows)          # (N, 3)
    mean_dot = np.einsum("i,ic->c", w, row_dots) / wsum             # (3,)
    ly = np.einsum("oi,ic->oc", gy, row_dots) - np.outer(sum_gy, mean_dot)
    axis_map = lx + ly                                              # (2, 3)

    dc2_dw = (
        gw
        - np.einsum("oj,ij->oi", sum_gx, 2.0 * (q - mu2) / wsum)
        - np.einsum("o,i->oi", sum_gy, (qsq - musq2) / wsum)
        + axis_map @ da_dw
    )
    dc2_dn = np.einsum("oa,aik->oik", axis_map, da_dn)
    dc2_dp = (
        2.0 * np.einsum("oia,ac->oic", gx, basis)
        - np.einsum("oa,i,ac->oic", sum_gx, 2.0 * w / wsum, basis)
        + np.einsum("oi,ic->oic", gy - np.outer(sum_gy, w) / wsum, 2.0 * (q @ basis))
    )

    # radius
    mc = mu2 - c2
    gamma = np.einsum("i,ij,ijc->c", 2.0 * w / wsum, g2, proj_rows)
    dr2_dw = (sq2 - r_sq) / wsum + gamma @ da_dw - 2.0 * mc @ dc2_dw
    dr2_dn = np.einsum("c,cik->ik", gamma, da_dn) - 2.0 * np.einsum(
        "o,oik->ik", mc, dc2_dn
    )
    dr2_dp = (2.0 * w / wsum)[:, None] * (g2 @ basis) - 2.0 * np.einsum(
        "o,oic->ic", mc, dc2_dp
    )

    # lift the center to 3-D: c = basis^T c2, plus the rotation of the basis
    basis_rot = c2[0] * de1_da + c2[1] * de2_da             # (3, 3)
    dc_dw = basis.T @ dc2_dw + basis_rot @ da_dw
    dc_dn = np.einsum("ot,oik->tik", basis, dc2_dn) + np.einsum(
        "ts,sik->tik", basis_rot, da_dn
    )
    dc_dp = np.einsum("ot,oic->tic", basis, dc2_dp)

    r_safe = max(r, 1e-300)
    grad = GradientBundle(
        d_weights=np.vstack([da_dw, dc_dw, dr2_dw[None, :] / (2.0 * r_safe)]),
        d_points=np.concatenate(
            [np.zeros((3, p.shape[0], 3)), dc_dp, dr2_dp[None] / (2.0 * r_safe)],
            axis=0,
        ),
        d_normals=np.concatenate(
            [da_dn, dc_dn, dr2_dn[None] / (2.0 * r_safe)], axis=0
        ),
    )
    return FitOutput(params, grad, trivialized=sol.trivialized)


# ---------------------------------------------------------------------------
# Cone
# ---------------------------------------------------------------------------

def fit_cone(points, normals, weights, with_grad: bool = False,
             ridge: float = DEFAULT_RIDGE) -> FitOutput:
    """Cone fit: apex from the weighted intersection of tangent planes, axis
    from a plane fit of the normal endpoints (flipped to point into the cone),
    half-angle as the weighted mean angle between axis and apex rays."""
    p, w, nrm = _prepare(points, weights, MIN_EFFECTIVE[CONE], normals)
    wsum = float(w.sum())

    targets = np.einsum("ij,ij->i", nrm, p)
    apex_sol, apex_inv = _lin_solve(nrm, targets, w, ridge)
    c = apex_sol.c

    mu_n = (w @ nrm) / wsum
    centered_n = nrm - mu_n
    axis_sol, lam, vecs = _hom_solve(centered_n, w)
    a = axis_sol.v
    centroid = (w @ p) / wsum
    flip = 1.0 if float(a @ (centroid - c)) >= 0.0 else -1.0
    a = flip * a

    v = p - c
    dist = np.maximum(np.linalg.norm(v, axis=1), 1e-12)
    unit = v / dist[:, None]
    z = unit @ a
    z_clip = np.clip(z, -ACOS_CLIP, ACOS_CLIP)
    angles = np.arccos(np.abs(z_clip))
    theta_raw = float(w @ angles) / wsum
    theta = float(np.clip(theta_raw, THETA_MARGIN, np.pi / 2 - THETA_MARGIN))
    params = Cone(c, a, theta)
    if not with_grad:
        return FitOutput(params, trivialized=apex_sol.trivialized)

    apex_kb = _lin_grad(nrm, targets, w, c, apex_inv)
    gx, gy, gw = apex_kb.d_points, apex_kb.d_targets, apex_kb.d_weights
    dc_dw = gw
    dc_dn = gx + np.einsum("oi,ik->oik", gy, p)
    dc_dp = np.einsum("oi,ik->oik", gy, nrm)

    # the perturbation formula is linear in the output vector, so passing the
    # flipped axis yields its Jacobian directly; the flip itself is piecewise
    # constant and differentiated on the active branch
    axis_kb = _hom_grad(centered_n, w, lam, vecs, a)
    colsum = axis_kb.d_points.sum(axis=1)
    da_dw = axis_kb.d_weights - np.einsum("oc,ic->oi", colsum, centered_n) / wsum
    da_dn = axis_kb.d_points - np.einsum("oc,i->oic", colsum, w) / wsum

    clamped = not (THETA_MARGIN < theta_raw < np.pi / 2 - THETA_MARGIN)
    if clamped:
        dth_dw = np.zeros(p.shape[0])
        dth_dn = np.zeros((p.shape[0], 3))
        dth_dp = np.zeros((p.shape[0], 3))
    else:
        slope = -np.sign(z) / np.sqrt(1.0 - z_clip**2)      # d angle / d z
        wslope = w * slope / wsum
        psi = wslope @ unit                                  # (3,)
        phi = np.einsum("i,ik->k", wslope / dist, a[None, :] - z[:, None] * unit)
        dth_dw = (angles - theta_raw) / wsum + psi @ da_dw - phi @ dc_dw
        dth_dn = np.einsum("c,cik->ik", psi, da_dn) - np.einsum(
            "c,cik->ik", phi, dc_dn
        )
        dth_dp = (wslope / dist)[:, None] * (a[None, :] - z[:, None] * unit)
        dth_dp = dth_dp - np.einsum("c,cik->ik", phi, dc_dp)

    grad = GradientBundle(
        d_weights=np.vstack([dc_dw, da_dw, dth_dw[None, :]]),
        d_points=np.concatenate(
            [dc_dp, np.zeros((3, p.shape[0], 3)), dth_dp[None]], axis=0
        ),
        d_normals=np.concatenate([dc_dn, da_dn, dth_dn[None]], axis=0),
    )
    return FitOutput(params, grad, trivialized=apex_sol.trivialized)


# ---------------------------------------------------------------------------
# Column dispatch
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnFit:
    """Outcome for one membership column: parameters (or None on failure),
    the trivialization flag, and a diagnostic message when absent."""

    params: Optional[PrimitiveParams]
    trivialized: bool = False
    error: Optional[str] = None


def fit_primitive(prim_type: int, points, normals, weights,
                  with_grad: bool = False, ridge: float = DEFAULT_RIDGE) -> FitOutput:
    """Dispatch to the estimator for the given type index."""
    if prim_type == PLANE:
        return fit_plane(points, weights, with_grad)
    if prim_type == SPHERE:
        return fit_sphere(points, weights, with_grad, ridge)
    if prim_type == CYLINDER:
        return fit_cylinder(points, normals, weights, with_grad, ridge)
    if prim_type == CONE:
        return fit_cone(points, normals, weights, with_grad, ridge)
    raise ValueError(f"unknown primitive type index {prim_type}")


def estimate_all(points, normals, membership, types: Sequence[int],
                 ridge: float = DEFAULT_RIDGE) -> List[ColumnFit]:
    """Fit every membership column with the estimator for its declared type.

    Columns whose segments fail the estimator preconditions come back as
    absent entries carrying the diagnostic; the other columns are unaffected.
    """
    weights = membership.weights if isinstance(membership, MembershipMatrix) else np.asarray(membership, dtype=np.float64)
    types = list(types)
    if len(types) != weights.shape[1]:
        raise ValueError("one type index per membership column is required")
    out: List[ColumnFit] = []
    for col, prim_type in enumerate(types):
        try:
            fit = fit_primitive(prim_type, points, normals, weights[:, col],
                                ridge=ridge)
        except DegenerateInput as exc:
            out.append(ColumnFit(params=None, error=str(exc)))
        else:
            out.append(ColumnFit(params=fit.params, trivialized=fit.trivialized))
    return out
