"""Finite-difference verification of the estimator Jacobians.

Compares every analytic Jacobian (weights, points, normals) against central
finite differences with step 1e-6 on randomly drawn non-degenerate segments,
and runs a degenerate-input suite (repeated eigenvalues, near-coplanar sphere
segments, near-cylindrical cones) asserting finiteness and the expected
trivialization flags.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from .core import CONE, CYLINDER, PLANE, SPHERE, TYPE_NAMES, Cone, Cylinder, Plane, Sphere
from .estimators import fit_primitive
from .numeric import (
    weighted_homogeneous_lsq_grad,
    weighted_linear_lsq,
    weighted_linear_lsq_grad,
)

FD_STEP = 1e-6
REL_TOL = 1e-3


def fd_jacobian(func: Callable, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference Jacobian of func at x, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    base = np.asarray(func(x))
    jac = np.zeros(base.shape + x.shape)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        hi = x.copy()
        hi[idx] += step
        lo = x.copy()
        lo[idx] -= step
        jac[(Ellipsis,) + idx] = (np.asarray(func(hi)) - np.asarray(func(lo))) / (
            2.0 * step
        )
        it.iternext()
    return jac


def max_rel_error(analytic, fd, floor_frac: float = 1e-4) -> float:
    """Entrywise |analytic - fd| over max(|analytic|, |fd|, floor), where the
    floor is floor_frac times the Jacobian scale; tiny entries compare almost
    absolutely so finite-difference noise cannot dominate."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(fd).max(initial=0.0)), 1.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor_frac * scale)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - fd) / denom))


def params_vector(prim) -> np.ndarray:
    """Flatten parameters in the estimator's Jacobian row order."""
    if isinstance(prim, Plane):
        return np.concatenate([prim.a, [prim.d]])
    if isinstance(prim, Sphere):
        return np.concatenate([prim.c, [prim.r]])
    if isinstance(prim, Cylinder):
        return np.concatenate([prim.a, prim.c, [prim.r]])
    if isinstance(prim, Cone):
        return np.concatenate([prim.c, prim.a, [prim.theta]])
    raise TypeError(f"unknown primitive {type(prim)!r}")


def random_segment(prim_type: int, rng: np.random.Generator, n: int = 40,
                   point_noise: float = 0.004, normal_noise: float = 0.02):
    """A random noisy segment of one primitive with jittered unit normals and
    random weights in [0.2, 1]; sized to keep the fit well-conditioned."""
    def unit(v):
        return v / np.linalg.norm(v)

    def basis(axis):
        helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        b1 = unit(np.cross(axis, helper))
        return b1, np.cross(axis, b1)

    if prim_type == PLANE:
        a = unit(rng.normal(size=3))
        d = rng.uniform(-0.5, 0.5)
        b1, b2 = basis(a)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = d * a + uv[:, :1] * b1 + uv[:, 1:] * b2
        nrm = np.tile(a, (n, 1))
    elif prim_type == SPHERE:
        c = rng.uniform(-0.3, 0.3, size=3)
        r = rng.uniform(0.4, 0.8)
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts, nrm = c + r * dirs, dirs
    elif prim_type == CYLINDER:
        a = unit(rng.normal(size=3))
        c = rng.uniform(-0.3, 0.3, size=3)
        r = rng.uniform(0.3, 0.7)
        b1, b2 = basis(a)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        t = rng.uniform(-0.8, 0.8, size=n)
        radial = np.cos(phi)[:, None] * b1 + np.sin(phi)[:, None] * b2
        pts, nrm = c + t[:, None] * a + r * radial, radial
    elif prim_type == CONE:
        c = rng.uniform(-0.2, 0.2, size=3)
        a = unit(rng.normal(size=3))
        theta = rng.uniform(0.4, 1.0)
        b1, b2 = basis(a)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        s = rng.uniform(0.3, 1.0, size=n)
        ring = np.cos(phi)[:, None] * b1 + np.sin(phi)[:, None] * b2
        pts = c + s[:, None] * (np.cos(theta) * a + np.sin(theta) * ring)
        nrm = np.cos(theta) * ring - np.sin(theta) * a
    else:
        raise ValueError(f"unknown type {prim_type}")

    pts = pts + point_noise * rng.normal(size=pts.shape)
    nrm = nrm + normal_noise * rng.normal(size=nrm.shape)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    w = rng.uniform(0.2, 1.0, size=n)
    return pts, nrm, w


def check_estimator(prim_type: int, trials: int, seed: int, n: int = 40) -> Dict:
    """Max relative FD error over `trials` random segments, per input channel."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(prim_type,)))
    worst = {"weights": 0.0, "points": 0.0, "normals": 0.0}
    for _ in range(trials):
        pts, nrm, w = random_segment(prim_type, rng, n=n)
        out = fit_primitive(prim_type, pts, nrm, w, with_grad=True)
        grad = out.grad

        fd_w = fd_jacobian(
            lambda ww: params_vector(fit_primitive(prim_type, pts, nrm, ww).params), w
        )
        worst["weights"] = max(worst["weights"], max_rel_error(grad.d_weights, fd_w))

        fd_p = fd_jacobian(
            lambda pp: params_vector(fit_primitive(prim_type, pp, nrm, w).params), pts
        )
        worst["points"] = max(worst["points"], max_rel_error(grad.d_points, fd_p))

        if prim_type in (CYLINDER, CONE):
            fd_n = fd_jacobian(
                lambda nn: params_vector(fit_primitive(prim_type, pts, nn, w).params),
                nrm,
            )
            worst["normals"] = max(worst["normals"], max_rel_error(grad.d_normals, fd_n))
    worst["pass"] = all(v < REL_TOL for k, v in worst.items() if k != "pass")
    return worst


def degenerate_suite(seed: int = 0) -> Dict:
    """Constructed degenerate inputs: every gradient must stay finite and the
    trivialization flags must fire where the guards specify."""
    rng = np.random.default_rng(seed)
    results: Dict[str, Dict] = {}

    # repeated eigenvalues: collinear rows make the two small eigenvalues equal
    pts = np.outer(np.linspace(-1.0, 1.0, 12), np.array([1.0, 0.0, 0.0]))
    w = np.full(12, 0.7)
    bundle = weighted_homogeneous_lsq_grad(pts, w)
    finite = bool(
        np.all(np.isfinite(bundle.d_weights)) and np.all(np.isfinite(bundle.d_points))
    )
    results["repeated_singular_values"] = {"finite": finite}

    # near-coplanar sphere segment: condition guard must trivialize
    b1, b2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    uv = rng.uniform(-1.0, 1.0, size=(60, 2))
    flat = uv[:, :1] * b1 + uv[:, 1:] * b2 + 1e-9 * rng.normal(size=(60, 3))
    wf = np.full(60, 1.0)
    from .estimators import fit_sphere

    out = fit_sphere(flat, wf, with_grad=True)
    results["coplanar_sphere"] = {
        "trivialized": bool(out.trivialized),
        "center_zero": bool(np.allclose(out.params.c, 0.0)),
        "finite": bool(
            np.all(np.isfinite(out.grad.d_weights))
            and np.all(np.isfinite(out.grad.d_points))
        ),
    }

    # near-cylinder data fed to the cone estimator: clamp keeps theta legal
    from .estimators import fit_cone

    axis = np.array([0.0, 0.0, 1.0])
    phi = rng.uniform(0.0, 2.0 * np.pi, size=80)
    t = rng.uniform(-1.0, 1.0, size=80)
    radial = np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1)
    pts = t[:, None] * axis + 0.5 * radial
    nrm = radial + 1e-4 * rng.normal(size=radial.shape)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    out = fit_cone(pts, nrm, np.full(80, 1.0), with_grad=True)
    theta_ok = 1e-4 <= out.params.theta <= np.pi / 2 - 1e-4
    results["near_cylinder_cone"] = {
        "trivialized_or_clamped": bool(out.trivialized or theta_ok),
        "finite": bool(
            np.all(np.isfinite(params_vector(out.params)))
            and np.all(np.isfinite(out.grad.d_weights))
            and np.all(np.isfinite(out.grad.d_normals))
        ),
    }

    # trivialized linear solve returns zeros with zero gradients
    huge = np.stack([np.array([1.0, 0.0, 0.0])] * 8 + [np.array([0.0, 1e-9, 0.0])] * 8)
    y = rng.normal(size=16)
    wl = np.full(16, 1.0)
    sol = weighted_linear_lsq(huge, y, wl)
    gb = weighted_linear_lsq_grad(huge, y, wl)
    results["trivialized_linear"] = {
        "trivialized": bool(sol.trivialized),
        "zero_solution": bool(np.all(sol.c == 0.0)),
        "zero_gradients": bool(
            np.all(gb.d_weights == 0.0) and np.all(gb.d_points == 0.0)
        ),
    }

    results["pass"] = all(
        all(bool(v) for v in entry.values())
        for key, entry in results.items()
        if key != "pass"
    )
    return results


def run_gradcheck(estimators: Optional[list] = None, trials: int = 100,
                  seed: int = 0, n: int = 40) -> Dict:
    """Full gradient-fidelity report: per-estimator FD errors plus the
    degenerate suite."""
    if estimators is None:
        estimators = list(TYPE_NAMES)
    report: Dict = {"trials": trials, "seed": seed, "estimators": {}}
    for name in estimators:
        idx = TYPE_NAMES.index(name)
        report["estimators"][name] = check_estimator(idx, trials, seed, n=n)
    report["degenerate"] = degenerate_suite(seed)
    report["pass"] = report["degenerate"]["pass"] and all(
        entry["pass"] for entry in report["estimators"].values()
    )
    return report
