"""Estimator tests: exact distances, zero-residual recovery, weight-scaling
and optimality invariants, degenerate guards, and finite-difference gradient
checks for all four primitive types."""

import numpy as np
import pytest

from primfit.core import (
    CONE,
    CYLINDER,
    PLANE,
    SPHERE,
    Cone,
    Cylinder,
    MembershipMatrix,
    Plane,
    Sphere,
)
from primfit.estimators import (
    distance,
    estimate_all,
    fit_cone,
    fit_cylinder,
    fit_plane,
    fit_primitive,
    fit_sphere,
    surface_distances,
)
from primfit.gradcheck import fd_jacobian, max_rel_error, params_vector, random_segment
from primfit.synthgen import (
    ConeFrustum,
    PlanePatch,
    SceneSpec,
    SphereBand,
    TubeSection,
    perturb_membership,
    stream,
)


def _basis(axis):
    helper = [0.0, 0.0, 1.0] if abs(axis[2]) < 0.9 else [1.0, 0.0, 0.0]
    b1 = np.cross(axis, helper)
    b1 /= np.linalg.norm(b1)
    return b1, np.cross(axis, b1)


class TestDistance:
    def test_plane(self):
        prim = Plane([0.0, 0.0, 1.0], 0.0)
        assert distance([3.0, -2.0, 5.0], prim) == pytest.approx(5.0)

    def test_cylinder(self):
        prim = Cylinder([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], 1.0)
        assert distance([2.0, 0.0, 7.0], prim) == pytest.approx(1.0)

    def test_cone_on_surface_and_on_axis(self):
        prim = Cone([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], np.pi / 4)
        assert distance([1.0, 0.0, 1.0], prim) == pytest.approx(0.0, abs=1e-12)
        assert distance([0.0, 0.0, 1.0], prim) == pytest.approx(
            0.7071067811865476, abs=1e-12
        )

    def test_cone_apex_distance_zero(self):
        prim = Cone([0.2, -0.1, 0.4], [0.0, 0.0, 1.0], 0.5)
        assert distance([0.2, -0.1, 0.4], prim) == 0.0

    @pytest.mark.parametrize("prim_type", [PLANE, SPHERE, CYLINDER, CONE])
    def test_zero_set_matches_surface(self, prim_type):
        truth, pts, nrm = _exact_segment(prim_type, seed=60 + prim_type, n=100)
        np.testing.assert_allclose(surface_distances(pts, truth), 0.0, atol=1e-9)
        off = pts + 0.05 * nrm
        assert surface_distances(off, truth).min() > 1e-3


def _exact_segment(prim_type, seed, n=200):
    """Noise-free points + exact unit normals from a synthgen region."""
    rng = stream(seed, prim_type)
    if prim_type == PLANE:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        b1, b2 = _basis(axis)
        region = PlanePatch(rng.uniform(-0.4, 0.4, 3), b1, b2, 0.6, 0.5)
    elif prim_type == SPHERE:
        region = SphereBand(rng.uniform(-0.3, 0.3, 3), rng.uniform(0.3, 0.6),
                            np.array([0.0, 0.0, 1.0]), -1.0, 1.0)
    elif prim_type == CYLINDER:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        region = TubeSection(rng.uniform(-0.3, 0.3, 3), axis,
                             rng.uniform(0.25, 0.5), 0.6)
    else:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        region = ConeFrustum(rng.uniform(-0.2, 0.2, 3), axis,
                             rng.uniform(0.35, 0.9), 0.2, 0.9)
    pts, nrm = region.sample(n, rng)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return region.params(), pts, nrm


def _axis_cos(a, b):
    return abs(float(np.asarray(a) @ np.asarray(b)))


def _axis_line_distance(point, line_point, axis):
    v = np.asarray(point) - np.asarray(line_point)
    return float(np.linalg.norm(v - (v @ axis) * axis))


class TestZeroResidualRecovery:
    @pytest.mark.parametrize("prim_type", [PLANE, SPHERE, CYLINDER, CONE])
    @pytest.mark.parametrize("weight", [1.0, 0.37])
    def test_exact_recovery(self, prim_type, weight):
        truth, pts, nrm = _exact_segment(prim_type, seed=3 + prim_type)
        w = np.full(len(pts), weight)
        out = fit_primitive(prim_type, pts, nrm, w)
        assert not out.trivialized
        fitted = out.params
        if prim_type == PLANE:
            assert _axis_cos(truth.a, fitted.a) > 1 - 1e-10
            assert fitted.d == pytest.approx(truth.d, abs=1e-9)
        elif prim_type == SPHERE:
            np.testing.assert_allclose(fitted.c, truth.c, atol=1e-7)
            assert fitted.r == pytest.approx(truth.r, abs=1e-7)
        elif prim_type == CYLINDER:
            assert _axis_cos(truth.a, fitted.a) > 1 - 1e-10
            assert fitted.r == pytest.approx(truth.r, abs=1e-7)
            assert _axis_line_distance(fitted.c, truth.c, truth.a) < 1e-7
        else:
            np.testing.assert_allclose(fitted.c, truth.c, atol=1e-7)
            assert _axis_cos(truth.a, fitted.a) > 1 - 1e-10
            assert float(fitted.a @ truth.a) > 0  # sign points into the cone
            assert fitted.theta == pytest.approx(truth.theta, abs=1e-7)

    def test_cylinder_center_on_perpendicular_plane(self):
        _, pts, nrm = _exact_segment(CYLINDER, seed=9)
        out = fit_cylinder(pts, nrm, np.ones(len(pts)))
        assert abs(float(out.params.a @ out.params.c)) < 1e-9


class TestWeighting:
    def test_weight_scale_invariance(self):
        # ridge disabled: the fitting energies themselves are homogeneous in w
        rng = np.random.default_rng(5)
        for prim_type in (PLANE, SPHERE, CYLINDER, CONE):
            pts, nrm, w = random_segment(prim_type, rng, n=60)
            base = params_vector(
                fit_primitive(prim_type, pts, nrm, w, ridge=0.0).params
            )
            for scale in (0.25, 3.0):
                scaled = params_vector(
                    fit_primitive(prim_type, pts, nrm, scale * w, ridge=0.0).params
                )
                np.testing.assert_allclose(scaled, base, atol=1e-9)

    def test_dominant_cluster_wins(self):
        truth_a, pts_a, _ = _exact_segment(PLANE, seed=11)
        _, pts_b, _ = _exact_segment(PLANE, seed=12)
        pts = np.vstack([pts_a, pts_b])
        w = np.concatenate([np.ones(len(pts_a)), np.full(len(pts_b), 1e-9)])
        combined = fit_plane(pts, w).params
        alone = fit_plane(pts_a, np.ones(len(pts_a))).params
        assert _axis_cos(combined.a, alone.a) > 1 - 1e-10
        assert combined.d == pytest.approx(alone.d, abs=1e-6)

    def test_noisy_plane_residual_below_noise(self):
        truth, pts, nrm = _exact_segment(PLANE, seed=13, n=500)
        rng = np.random.default_rng(13)
        noisy = pts + rng.uniform(-0.01, 0.01, size=len(pts))[:, None] * nrm
        fitted = fit_plane(noisy, np.ones(len(pts))).params
        assert float(np.mean(surface_distances(pts, fitted))) < 0.01


class TestSphere:
    def test_known_sphere_recovery(self):
        rng = np.random.default_rng(17)
        dirs = rng.normal(size=(100, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = np.array([0.3, -0.1, 0.2]) + 0.5 * dirs
        out = fit_sphere(pts, np.ones(100))
        np.testing.assert_allclose(out.params.c, [0.3, -0.1, 0.2], atol=1e-9)
        assert out.params.r == pytest.approx(0.5, abs=1e-9)

    def test_coplanar_segment_trivializes(self):
        rng = np.random.default_rng(18)
        uv = rng.uniform(-1, 1, size=(80, 2))
        pts = np.column_stack([uv, np.zeros(80)])
        out = fit_sphere(pts, np.ones(80))
        assert out.trivialized
        np.testing.assert_array_equal(out.params.c, 0.0)


class TestCylinder:
    def test_perturbed_normals_keep_axis_close(self):
        truth, pts, nrm = _exact_segment(CYLINDER, seed=21, n=300)
        rng = np.random.default_rng(21)
        jitter = nrm + np.tan(np.radians(1.0)) * rng.normal(size=nrm.shape)
        jitter /= np.linalg.norm(jitter, axis=1, keepdims=True)
        out = fit_cylinder(pts, jitter, np.ones(len(pts)))
        angle = np.degrees(np.arccos(min(_axis_cos(out.params.a, truth.a), 1.0)))
        assert angle < 5.0  # same order as the 1 degree normal jitter

    def test_parallel_normals_trivialize_circle_fit(self):
        rng = np.random.default_rng(22)
        uv = rng.uniform(-1, 1, size=(60, 2))
        pts = np.column_stack([uv, np.full(60, 0.3)])
        nrm = np.tile([0.0, 0.0, 1.0], (60, 1))
        out = fit_cylinder(pts, nrm, np.ones(60))
        assert out.trivialized
        assert abs(float(out.params.a @ [0, 0, 1])) < 1e-6  # orthogonal to normals


class TestCone:
    def test_theta_recovery_under_noise(self):
        truth, pts, nrm = _exact_segment(CONE, seed=25, n=100)
        rng = np.random.default_rng(25)
        noisy = pts + rng.uniform(-0.01, 0.01, size=len(pts))[:, None] * nrm
        out = fit_cone(noisy, nrm, np.ones(len(pts)))
        assert abs(out.params.theta - truth.theta) < 0.05

    def test_near_cylinder_data_never_nan(self):
        rng = np.random.default_rng(26)
        phi = rng.uniform(0, 2 * np.pi, 120)
        t = rng.uniform(-1, 1, 120)
        radial = np.stack([np.cos(phi), np.sin(phi), np.zeros(120)], axis=1)
        pts = t[:, None] * np.array([0.0, 0.0, 1.0]) + 0.4 * radial
        nrm = radial + 1e-5 * rng.normal(size=radial.shape)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        out = fit_cone(pts, nrm, np.ones(120), with_grad=True)
        assert np.all(np.isfinite(params_vector(out.params)))
        assert 1e-4 <= out.params.theta <= np.pi / 2 - 1e-4 or out.trivialized
        assert np.all(np.isfinite(out.grad.d_weights))


class TestOptimality:
    @pytest.mark.parametrize("prim_type", [PLANE, SPHERE])
    def test_beats_random_perturbations(self, prim_type):
        rng = np.random.default_rng(30)
        pts, nrm, w = random_segment(prim_type, rng, n=80)

        def energy(params):
            if prim_type == PLANE:
                return float(w @ (pts @ params.a - params.d) ** 2)
            v = pts - params.c
            return float(w @ (np.einsum("ij,ij->i", v, v) - params.r**2) ** 2)

        best = fit_primitive(prim_type, pts, nrm, w, ridge=0.0).params
        base = energy(best)
        for _ in range(100):
            if prim_type == PLANE:
                a = best.a + 1e-3 * rng.normal(size=3)
                cand = Plane(a / np.linalg.norm(a), best.d + 1e-3 * rng.normal())
            else:
                cand = Sphere(best.c + 1e-3 * rng.normal(size=3),
                              best.r + 1e-3 * rng.normal())
            assert base <= energy(cand) + 1e-12


class TestGradients:
    @pytest.mark.parametrize("prim_type", [PLANE, SPHERE, CYLINDER, CONE])
    def test_finite_difference_agreement(self, prim_type):
        rng = np.random.default_rng(40 + prim_type)
        for _ in range(3):
            pts, nrm, w = random_segment(prim_type, rng, n=35)
            out = fit_primitive(prim_type, pts, nrm, w, with_grad=True)
            fd_w = fd_jacobian(
                lambda ww: params_vector(fit_primitive(prim_type, pts, nrm, ww).params),
                w,
            )
            assert max_rel_error(out.grad.d_weights, fd_w) < 1e-3
            fd_p = fd_jacobian(
                lambda pp: params_vector(fit_primitive(prim_type, pp, nrm, w).params),
                pts,
            )
            assert max_rel_error(out.grad.d_points, fd_p) < 1e-3
            if prim_type in (CYLINDER, CONE):
                fd_n = fd_jacobian(
                    lambda nn: params_vector(
                        fit_primitive(prim_type, pts, nn, w).params
                    ),
                    nrm,
                )
                assert max_rel_error(out.grad.d_normals, fd_n) < 1e-3


class TestEstimateAll:
    def test_ground_truth_membership_recovers_scene(self, small_scene):
        scene = small_scene
        fits = estimate_all(
            scene.cloud.positions,
            scene.cloud.normals,
            scene.membership,
            scene.surface_types(),
        )
        for surf, col in zip(scene.surfaces, fits):
            assert col.params is not None
            d = surface_distances(surf.samples, col.params)
            assert d.max() < 1e-6

    def test_empty_column_reports_absent(self, small_scene):
        scene = small_scene
        weights = np.column_stack([scene.membership.weights, np.zeros(scene.n)])
        fits = estimate_all(
            scene.cloud.positions,
            scene.cloud.normals,
            MembershipMatrix(weights),
            list(scene.surface_types()) + [PLANE],
        )
        assert fits[-1].params is None
        assert fits[-1].error
        assert all(c.params is not None for c in fits[:-1])

    def test_soft_membership_close_to_binary_fit(self):
        # well-separated spheres so the softmax blur at temperature 0.01
        # carries negligible cross-surface weight
        regions = [
            SphereBand(np.array([0.7, 0.7, 0.7]), 0.25, np.array([0.0, 0.0, 1.0]), -1.0, 1.0),
            SphereBand(np.array([-0.7, -0.7, 0.7]), 0.3, np.array([0.0, 0.0, 1.0]), -1.0, 1.0),
            SphereBand(np.array([0.7, -0.7, -0.7]), 0.28, np.array([0.0, 0.0, 1.0]), -1.0, 1.0),
        ]
        from primfit.synthgen import assemble_scene

        spec = SceneSpec(n_points=1024, m_samples=64, noise_amplitude=0.0, seed=31)
        scene = assemble_scene(regions, spec, seed=31)
        soft = perturb_membership(scene, "softmax", 0.01, stream(0))
        hard_fits = estimate_all(scene.cloud.positions, scene.cloud.normals,
                                 scene.membership, scene.surface_types())
        soft_fits = estimate_all(scene.cloud.positions, scene.cloud.normals,
                                 soft, scene.surface_types())
        for a, b in zip(hard_fits, soft_fits):
            np.testing.assert_allclose(
                params_vector(b.params), params_vector(a.params), atol=1e-3
            )


class TestSquaredDistanceParamGrad:
    @pytest.mark.parametrize("prim_type", [PLANE, SPHERE, CYLINDER, CONE])
    def test_matches_finite_differences(self, prim_type):
        """The per-point d(squared distance)/d(params) rows feed the loss
        chain, which only ever contracts them with tangent perturbations of
        the unit axes; axis columns are therefore compared after projecting
        out the radial component that axis renormalization removes."""
        from primfit.core import Cone, Cylinder
        from primfit.estimators import squared_distance_param_grad
        from primfit.gradcheck import fd_jacobian, max_rel_error

        rng = np.random.default_rng(70 + prim_type)
        pts = rng.uniform(-1.0, 1.0, size=(25, 3))

        def rebuild(vec):
            if prim_type == PLANE:
                return Plane(vec[:3] / np.linalg.norm(vec[:3]), vec[3])
            if prim_type == SPHERE:
                return Sphere(vec[:3], vec[3])
            if prim_type == CYLINDER:
                return Cylinder(vec[:3] / np.linalg.norm(vec[:3]), vec[3:6], vec[6])
            return Cone(vec[:3], vec[3:6] / np.linalg.norm(vec[3:6]), vec[6])

        base, axis_cols = {
            PLANE: (np.array([0.0, 0.6, 0.8, 0.2]), slice(0, 3)),
            SPHERE: (np.array([0.1, -0.2, 0.3, 0.7]), None),
            CYLINDER: (np.array([0.0, 0.6, 0.8, 0.1, 0.0, -0.2, 0.5]),
                       slice(0, 3)),
            CONE: (np.array([0.1, 0.0, -0.3, 0.0, 0.6, 0.8, 0.6]),
                   slice(3, 6)),
        }[prim_type]

        analytic = squared_distance_param_grad(pts, rebuild(base)).copy()
        if axis_cols is not None:
            axis = base[axis_cols]
            block = analytic[:, axis_cols]
            analytic[:, axis_cols] = block - np.outer(block @ axis, axis)

        numeric = fd_jacobian(
            lambda vec: surface_distances(pts, rebuild(vec)) ** 2, base
        )
        assert max_rel_error(analytic, numeric) < 1e-4
