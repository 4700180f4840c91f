"""Fitter tests: detector recovery and determinism, the small-primitive
failure mode, EM fixed points / energy descent / coverage improvement, the
discard rule and the type vote."""

import numpy as np
import pytest

from primfit import io
from primfit.core import (
    FitResult,
    FittedPrimitive,
    MembershipMatrix,
    Plane,
    SPHERE,
    Sphere,
)
from primfit.fitters import (
    EmConfig,
    RansacConfig,
    discard_small,
    em_fit,
    oracle_fit,
    ransac_fit,
    segment_fit,
    vote_types,
)
from primfit.metrics import compute_metrics, per_surface_coverage
from primfit.losses import align_to_ground_truth
from primfit.synthgen import (
    PlanePatch,
    SceneSpec,
    SphereBand,
    assemble_scene,
    generate_scene,
)


def _single_plane_scene(seed=0, noise=0.0):
    spec = SceneSpec(n_points=600, m_samples=64, k_range=(1, 1),
                     type_mix=(1.0, 0, 0, 0), noise_amplitude=noise, seed=seed)
    return generate_scene(spec)


class TestRansac:
    def test_single_noiseless_plane(self):
        scene = _single_plane_scene()
        cfg = RansacConfig(distance_epsilon=0.005, min_inliers=30, seed=1)
        fit = ransac_fit(scene.cloud.positions, scene.cloud.normals, cfg)
        assert fit.k == 1
        assert fit.primitives[0].prim_type == 0
        b = compute_metrics(scene, fit)
        assert b.p_coverage[0.01] == 100.0

    def test_seeded_determinism(self, noisy_scene):
        cfg = RansacConfig(seed=5, min_inliers=25)
        a = ransac_fit(noisy_scene.cloud.positions, noisy_scene.cloud.normals, cfg)
        b = ransac_fit(noisy_scene.cloud.positions, noisy_scene.cloud.normals, cfg)
        assert io.dumps(io.fit_to_dict(a)) == io.dumps(io.fit_to_dict(b))

    def test_normals_required(self, noisy_scene):
        with pytest.raises(ValueError):
            ransac_fit(noisy_scene.cloud.positions, None, RansacConfig())

    def test_two_separated_spheres_recovered(self):
        hits = 0
        for seed in range(10):
            regions = [
                SphereBand(np.array([0.6, 0.6, 0.6]), 0.35,
                           np.array([0.0, 0.0, 1.0]), -1.0, 1.0),
                SphereBand(np.array([-0.6, -0.6, -0.6]), 0.4,
                           np.array([0.0, 0.0, 1.0]), -1.0, 1.0),
            ]
            spec = SceneSpec(n_points=1500, m_samples=64, noise_amplitude=0.01,
                             seed=seed)
            scene = assemble_scene(regions, spec, seed=seed)
            cfg = RansacConfig(seed=seed, min_inliers=50)
            fit = ransac_fit(scene.cloud.positions, scene.cloud.normals, cfg)
            spheres = [p.params for p in fit.primitives
                       if isinstance(p.params, Sphere)]
            if len(spheres) < 2:
                continue
            ok = 0
            for surf in scene.surfaces:
                errs = [np.linalg.norm(s.c - surf.params.c) for s in spheres]
                if min(errs) < 1e-2:
                    ok += 1
            if ok == 2:
                hits += 1
        assert hits >= 9

    def test_min_inliers_misses_small_primitive(self):
        scene = _small_primitive_scene(seed=3)
        small_idx = int(np.argmin([s.area_fraction for s in scene.surfaces]))
        budget = int(scene.membership.weights[:, small_idx].sum())
        cfg = RansacConfig(min_inliers=budget + 50, seed=3)
        fit = ransac_fit(scene.cloud.positions, scene.cloud.normals, cfg)
        _, _, prims = align_to_ground_truth(scene, fit)
        cov = per_surface_coverage(scene.surfaces, prims, 0.01)
        assert cov[small_idx] < 50.0


def _small_primitive_scene(seed, small_fraction=0.03):
    """Three large planes plus one sphere holding `small_fraction` of the
    total area, placed away from the planes."""
    planes = [
        PlanePatch(np.array([0.0, 0.0, -0.8]), np.array([1.0, 0, 0]),
                   np.array([0.0, 1, 0]), 0.9, 0.9),
        PlanePatch(np.array([-0.8, 0.0, 0.0]), np.array([0.0, 1, 0]),
                   np.array([0.0, 0, 1]), 0.9, 0.9),
        PlanePatch(np.array([0.0, -0.8, 0.0]), np.array([0.0, 0, 1]),
                   np.array([1.0, 0, 0]), 0.9, 0.9),
    ]
    plane_area = sum(p.area() for p in planes)
    target = small_fraction * plane_area / (1.0 - small_fraction)
    radius = float(np.sqrt(target / (4.0 * np.pi)))
    sphere = SphereBand(np.array([0.55, 0.55, 0.55]), radius,
                        np.array([0.0, 0.0, 1.0]), -1.0, 1.0)
    spec = SceneSpec(n_points=4096, m_samples=256, noise_amplitude=0.01,
                     min_area_fraction=0.0, seed=seed)
    return assemble_scene(planes + [sphere], spec, seed=seed)


class TestEm:
    def test_ground_truth_init_is_fixed_point(self, small_scene):
        init = oracle_fit(small_scene)
        cfg = EmConfig(iterations=5, unassign_cap=None, normal_gate_deg=None,
                       keep_best=False)
        out = em_fit(small_scene.cloud.positions, small_scene.cloud.normals,
                     init, cfg)
        assert out.meta["membership_changes"][0] == 0.0
        b = compute_metrics(small_scene, out)
        assert b.seg_mean_iou == 1.0

    def test_energy_non_increasing_on_plane_sphere_scenes(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            spec = SceneSpec(n_points=1024, m_samples=32, k_range=(2, 4),
                             type_mix=(0.5, 0.5, 0.0, 0.0),
                             noise_amplitude=0.01, seed=700 + seed)
            scene = generate_scene(spec)
            init = _perturbed_gt_init(scene, rng, 0.02)
            cfg = EmConfig(iterations=8, hard_assign=True, unassign_cap=None,
                           assignment="energy", normal_gate_deg=None,
                           keep_best=False, ridge=0.0, track_energy=True)
            out = em_fit(scene.cloud.positions, scene.cloud.normals, init, cfg)
            trace = out.meta["energy_trace"]
            assert len(trace) >= 2
            diffs = np.diff(trace)
            assert np.all(diffs <= 1e-9)

    def test_coverage_improves_after_ransac_init(self):
        better = 0
        total = 0
        for seed in range(10):
            spec = SceneSpec(n_points=1500, m_samples=64, k_range=(3, 5),
                             noise_amplitude=0.01, seed=300 + seed)
            scene = generate_scene(spec)
            cfg = RansacConfig(seed=seed, min_inliers=20)
            fit = ransac_fit(scene.cloud.positions, scene.cloud.normals, cfg)
            if fit.k == 0:
                continue
            em = em_fit(scene.cloud.positions, scene.cloud.normals, fit,
                        EmConfig())
            total += 1
            a = compute_metrics(scene, fit).p_coverage[0.01]
            b = compute_metrics(scene, em).p_coverage[0.01]
            if b >= a:
                better += 1
        assert total >= 8
        assert better >= 0.9 * total

    def test_collapsed_column_dropped(self, small_scene):
        init = oracle_fit(small_scene)
        far = FittedPrimitive(Sphere([30.0, 30.0, 30.0], 0.1), confidence=0.0)
        init2 = FitResult(
            primitives=tuple(init.primitives) + (far,),
            membership=MembershipMatrix(
                np.column_stack([init.membership.weights,
                                 np.zeros(small_scene.n)])
            ),
            per_point_types=init.per_point_types,
            meta=init.meta,
        )
        cfg = EmConfig(iterations=3)
        out = em_fit(small_scene.cloud.positions, small_scene.cloud.normals,
                     init2, cfg)
        assert out.k == small_scene.k
        assert out.meta["collapsed_columns"]


def _perturbed_gt_init(scene, rng, magnitude):
    prims = []
    for surf in scene.surfaces:
        p = surf.params
        if isinstance(p, Plane):
            a = p.a + magnitude * rng.normal(size=3)
            prims.append(Plane(a / np.linalg.norm(a),
                               p.d + magnitude * rng.normal()))
        else:
            prims.append(Sphere(p.c + magnitude * rng.normal(size=3),
                                max(p.r + magnitude * rng.normal(), 0.05)))
    return FitResult(
        primitives=tuple(FittedPrimitive(p, 1.0) for p in prims),
        membership=MembershipMatrix(np.zeros((scene.n, len(prims)))),
    )


class TestDiscardSmall:
    def _fit_with_means(self, means, n=1000):
        cols = []
        prims = []
        for m in means:
            col = np.zeros(n)
            col[: int(round(m * n))] = 1.0
            cols.append(col)
            prims.append(FittedPrimitive(Sphere([0, 0, 0], 1.0), confidence=m))
        return FitResult(primitives=tuple(prims),
                         membership=MembershipMatrix(np.column_stack(cols)))

    def test_zero_column_dropped(self):
        fit = self._fit_with_means([0.3, 0.0])
        out = discard_small(fit)
        assert out.k == 1

    def test_boundary_strictly_below(self):
        fit = self._fit_with_means([0.0049, 0.0051], n=10000)
        out = discard_small(fit, threshold=0.005)
        assert out.k == 1
        assert out.membership.weights.mean(axis=0)[0] == pytest.approx(0.0051)

    def test_identity_when_all_above(self):
        fit = self._fit_with_means([0.3, 0.2])
        assert discard_small(fit) is fit

    def test_idempotent(self):
        fit = self._fit_with_means([0.3, 0.001, 0.004])
        once = discard_small(fit)
        twice = discard_small(once)
        assert once.k == twice.k == 1


class TestVoteTypes:
    def test_consistent_one_hot(self, small_scene):
        votes = vote_types(small_scene.types.onehot,
                           small_scene.membership.weights)
        np.testing.assert_array_equal(votes, small_scene.surface_types())

    def test_uniform_probabilities_tie_break_low(self):
        probs = np.full((10, 4), 0.25)
        w = np.ones((10, 2))
        np.testing.assert_array_equal(vote_types(probs, w), [0, 0])

    def test_majority_wins(self):
        probs = np.zeros((10, 4))
        probs[:6, SPHERE] = 1.0   # 60 percent sphere
        probs[6:, 0] = 1.0        # 40 percent plane
        w = np.ones((10, 1))
        np.testing.assert_array_equal(vote_types(probs, w), [SPHERE])


class TestSegmentFit:
    def test_injected_membership_gives_perfect_iou(self, noisy_scene):
        fit = segment_fit(noisy_scene, use_gt_types=False)
        b = compute_metrics(noisy_scene, fit)
        assert b.seg_mean_iou == 1.0

    def test_type_competition_matches_truth_mostly(self, noisy_scene):
        fit = segment_fit(noisy_scene, use_gt_types=False)
        b = compute_metrics(noisy_scene, fit)
        assert b.type_accuracy_pct >= 50.0


class TestSoftEm:
    def test_soft_mode_keeps_oracle_quality(self, small_scene):
        init = oracle_fit(small_scene)
        cfg = EmConfig(iterations=4, hard_assign=False, temperature=1e-4,
                       keep_best=False)
        out = em_fit(small_scene.cloud.positions, small_scene.cloud.normals,
                     init, cfg)
        assert out.k == small_scene.k
        # soft rows are proper probability vectors
        np.testing.assert_allclose(out.membership.weights.sum(axis=1), 1.0,
                                   atol=1e-9)
        b = compute_metrics(small_scene, out)
        assert b.seg_mean_iou > 0.95
        assert b.p_coverage[0.01] == 100.0
