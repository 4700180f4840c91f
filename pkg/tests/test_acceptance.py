"""Acceptance gate: every exit criterion at its stated tolerance.

Each test prints one PASS line (a failing assertion aborts before the line
prints, so the console log doubles as the acceptance checklist). Criteria
with runtime budgets assert the elapsed wall-clock as well.

The oracle P-coverage value at eps=0.01 under uniform noise 0.01 was measured
once by Monte-Carlo on the fixed seeded batch and is frozen below as a
regression constant; the pipeline is fully deterministic, so the value must
reproduce exactly.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import brute_force_assignment
from primfit.cli import main as cli_main
from primfit.core import CONE, CYLINDER, PLANE, SPHERE, MembershipMatrix
from primfit.estimators import fit_primitive
from primfit.fitters import (
    EmConfig,
    FitResult,
    FittedPrimitive,
    RansacConfig,
    em_fit,
    oracle_fit,
    ransac_fit,
    segment_fit,
)
from primfit.gradcheck import run_gradcheck
from primfit.losses import align_to_ground_truth, total_loss
from primfit.matching import match_primitives
from primfit.metrics import compute_metrics, per_surface_coverage
from primfit.synthgen import (
    PlanePatch,
    SceneSpec,
    SphereBand,
    assemble_scene,
    generate_scene,
)

#: criterion 4 regression constant -- mean oracle P coverage at eps = 0.01
#: over the fixed noisy batch, frozen from the first Monte-Carlo run
FROZEN_ORACLE_P_COV_001 = 98.5205078125


def _single_primitive_scene(prim_type, seed):
    mix = [0.0, 0.0, 0.0, 0.0]
    mix[prim_type] = 1.0
    spec = SceneSpec(n_points=256, m_samples=64, k_range=(1, 1),
                     type_mix=tuple(mix), noise_amplitude=0.0, seed=seed)
    return generate_scene(spec)


def _axis_cos(a, b):
    return abs(float(np.asarray(a) @ np.asarray(b)))


def _line_distance(point, line_point, axis):
    v = np.asarray(point) - np.asarray(line_point)
    return float(np.linalg.norm(v - (v @ axis) * axis))


def test_criterion_1_estimator_exactness():
    started = time.monotonic()
    for prim_type in (PLANE, SPHERE, CYLINDER, CONE):
        for trial in range(100):
            scene = _single_primitive_scene(prim_type, seed=10_000 + 100 * prim_type + trial)
            truth = scene.surfaces[0].params
            out = fit_primitive(prim_type, scene.cloud.positions,
                                scene.cloud.normals,
                                scene.membership.weights[:, 0])
            fitted = out.params
            if prim_type == PLANE:
                assert _axis_cos(truth.a, fitted.a) > 1 - 1e-8
                assert abs(fitted.d - truth.d) < 1e-6
            elif prim_type == SPHERE:
                assert np.abs(fitted.c - truth.c).max() < 1e-6
                assert abs(fitted.r - truth.r) < 1e-6
            elif prim_type == CYLINDER:
                assert _axis_cos(truth.a, fitted.a) > 1 - 1e-8
                assert abs(fitted.r - truth.r) < 1e-6
                assert _line_distance(fitted.c, truth.c, truth.a) < 1e-6
            else:
                assert _axis_cos(truth.a, fitted.a) > 1 - 1e-8
                assert np.abs(fitted.c - truth.c).max() < 1e-6
                assert abs(fitted.theta - truth.theta) < 1e-6
            fit = FitResult(
                primitives=(FittedPrimitive(fitted, 1.0),),
                membership=scene.membership,
            )
            assert total_loss(scene, fit).res < 1e-10
    elapsed = time.monotonic() - started
    assert elapsed < 10.0
    print(f"\nACCEPTANCE 1 (estimator exactness, 400 scenes, {elapsed:.1f}s): PASS")


def test_criterion_2_gradient_fidelity():
    started = time.monotonic()
    report = run_gradcheck(trials=100, seed=0, n=30)
    for name, entry in report["estimators"].items():
        for channel in ("weights", "points", "normals"):
            assert entry[channel] < 1e-3, f"{name} {channel}"
    degenerate = report["degenerate"]
    assert degenerate["repeated_singular_values"]["finite"]
    assert degenerate["coplanar_sphere"]["trivialized"]
    assert degenerate["coplanar_sphere"]["finite"]
    assert degenerate["near_cylinder_cone"]["finite"]
    assert degenerate["trivialized_linear"]["zero_gradients"]
    elapsed = time.monotonic() - started
    assert elapsed < 60.0
    print(f"\nACCEPTANCE 2 (gradient fidelity, 4x100 trials, {elapsed:.1f}s): PASS")


def test_criterion_3_matching_oracle_equivalence():
    from primfit.matching import hungarian

    rng = np.random.default_rng(33)
    for _ in range(500):
        shape = (int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        cost = rng.uniform(0.0, 1.0, size=shape)
        asn = hungarian(cost)
        best, optima = brute_force_assignment(cost)
        assert asn.total_score == pytest.approx(best, abs=1e-12)
        assert frozenset(asn.pairs) in optima

    spec = SceneSpec(n_points=512, m_samples=32, k_range=(5, 5), seed=44)
    scene = generate_scene(spec)
    perm = [3, 0, 4, 1, 2]
    permuted = MembershipMatrix(scene.membership.weights[:, perm])
    asn = match_primitives(scene.membership, permuted)
    assert asn.total_score == 1.0
    for gt_idx, pred_idx in asn.pairs:
        assert perm[pred_idx] == gt_idx
    print("\nACCEPTANCE 3 (matching oracle equivalence, 500 matrices): PASS")


def test_criterion_4_loss_metric_identities():
    # noiseless identities
    for i in range(5):
        spec = SceneSpec(n_points=1024, m_samples=128, k_range=(3, 6),
                         noise_amplitude=0.0, seed=8800 + i)
        scene = generate_scene(spec)
        bundle = compute_metrics(scene, oracle_fit(scene))
        assert bundle.seg_mean_iou == 1.0
        assert bundle.type_accuracy_pct == 100.0
        assert bundle.point_normal_deg == 0.0
        assert bundle.primitive_axis_deg == pytest.approx(0.0, abs=1e-6)
        assert bundle.sk_residual_mean == pytest.approx(0.0, abs=1e-7)
        assert bundle.sk_residual_std == pytest.approx(0.0, abs=1e-7)
        assert bundle.sk_coverage[0.01] == 100.0
        assert bundle.p_coverage[0.01] == 100.0

    # noisy batch: coverage at 2x the noise amplitude is total; at the noise
    # amplitude it reproduces the frozen Monte-Carlo constant exactly
    cov1, cov2 = [], []
    for i in range(20):
        spec = SceneSpec(n_points=2048, m_samples=128, k_range=(3, 6),
                         noise_amplitude=0.01, seed=9000 + i)
        scene = generate_scene(spec)
        bundle = compute_metrics(scene, oracle_fit(scene))
        cov1.append(bundle.p_coverage[0.01])
        cov2.append(bundle.p_coverage[0.02])
    assert all(c == 100.0 for c in cov2)
    mean_cov1 = float(np.mean(cov1))
    assert mean_cov1 >= 45.0
    assert mean_cov1 == pytest.approx(FROZEN_ORACLE_P_COV_001, abs=1e-9)
    print(f"\nACCEPTANCE 4 (loss/metric identities, oracle p-cov@0.01 "
          f"{mean_cov1:.10f}): PASS")


def test_criterion_5_relative_method_ordering():
    started = time.monotonic()
    plain_iou, inject_iou = [], []
    plain_cov, em_cov = [], []
    for i in range(50):
        spec = SceneSpec(n_points=2048, m_samples=128, k_range=(3, 6),
                         noise_amplitude=0.01, seed=9100 + i)
        scene = generate_scene(spec)
        cfg = RansacConfig(seed=i, min_inliers=25)
        plain = ransac_fit(scene.cloud.positions, scene.cloud.normals, cfg)
        injected = segment_fit(scene, use_gt_types=False)
        plain_b = compute_metrics(scene, plain)
        plain_iou.append(plain_b.seg_mean_iou)
        inject_iou.append(compute_metrics(scene, injected).seg_mean_iou)
        plain_cov.append(plain_b.p_coverage[0.01])
        if plain.k:
            refined = em_fit(scene.cloud.positions, scene.cloud.normals,
                             plain, EmConfig())
            em_cov.append(compute_metrics(scene, refined).p_coverage[0.01])
        else:
            em_cov.append(plain_cov[-1])

    assert float(np.mean(inject_iou)) > float(np.mean(plain_iou))
    per_scene_ok = np.mean([e >= p for e, p in zip(em_cov, plain_cov)])
    assert per_scene_ok >= 0.90
    assert float(np.mean(em_cov)) > float(np.mean(plain_cov))
    elapsed = time.monotonic() - started
    assert elapsed < 300.0
    print(
        f"\nACCEPTANCE 5 (method ordering, 50 scenes, {elapsed:.0f}s): PASS  "
        f"[seg IoU {np.mean(plain_iou):.3f} -> {np.mean(inject_iou):.3f} with "
        f"injected membership; p-cov@0.01 {np.mean(plain_cov):.1f} -> "
        f"{np.mean(em_cov):.1f} with EM on {per_scene_ok:.0%} of scenes]"
    )


def _small_primitive_scene(seed, small_fraction):
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


def test_criterion_6_small_primitive_sensitivity():
    rng = np.random.default_rng(66)
    for trial in range(10):
        fraction = float(rng.uniform(0.02, 0.05))
        scene = _small_primitive_scene(seed=6600 + trial, small_fraction=fraction)
        small_idx = int(np.argmin([s.area_fraction for s in scene.surfaces]))
        assert 0.02 <= scene.surfaces[small_idx].area_fraction <= 0.05
        budget = int(scene.membership.weights[:, small_idx].sum())

        cfg = RansacConfig(min_inliers=budget + 50, seed=trial)
        detector = ransac_fit(scene.cloud.positions, scene.cloud.normals, cfg)
        _, _, det_prims = align_to_ground_truth(scene, detector)
        det_cov = per_surface_coverage(scene.surfaces, det_prims, 0.01)
        assert det_cov[small_idx] < 95.0  # the threshold-limited detector misses it

        oracle = oracle_fit(scene)
        _, _, orc_prims = align_to_ground_truth(scene, oracle)
        orc_cov = per_surface_coverage(scene.surfaces, orc_prims, 0.01)
        assert orc_cov[small_idx] > 95.0  # the estimator has no scale bias
    print("\nACCEPTANCE 6 (small-primitive sensitivity, 10 scenes): PASS")


def test_criterion_7_em_energy_monotonicity():
    from primfit.core import Plane, Sphere

    rng = np.random.default_rng(77)
    checked_steps = 0
    for i in range(100):
        spec = SceneSpec(n_points=768, m_samples=32, k_range=(2, 4),
                         type_mix=(0.5, 0.5, 0.0, 0.0), noise_amplitude=0.01,
                         seed=7700 + i)
        scene = generate_scene(spec)
        prims = []
        for surf in scene.surfaces:
            p = surf.params
            if isinstance(p, Plane):
                a = p.a + 0.02 * rng.normal(size=3)
                prims.append(Plane(a / np.linalg.norm(a),
                                   p.d + 0.02 * rng.normal()))
            else:
                prims.append(Sphere(p.c + 0.02 * rng.normal(size=3),
                                    max(p.r + 0.02 * rng.normal(), 0.05)))
        init = FitResult(
            primitives=tuple(FittedPrimitive(p, 1.0) for p in prims),
            membership=MembershipMatrix(np.zeros((scene.n, len(prims)))),
        )
        cfg = EmConfig(iterations=8, hard_assign=True, unassign_cap=None,
                       assignment="energy", normal_gate_deg=None,
                       keep_best=False, ridge=0.0, track_energy=True)
        out = em_fit(scene.cloud.positions, scene.cloud.normals, init, cfg)
        trace = np.asarray(out.meta["energy_trace"])
        assert trace.size >= 2
        diffs = np.diff(trace)
        assert np.all(diffs <= 1e-9), f"scene {i}: max increase {diffs.max()}"
        checked_steps += diffs.size
    print(f"\nACCEPTANCE 7 (EM energy monotonicity, 100 scenes, "
          f"{checked_steps} steps): PASS")


def _hash_data_artifacts(root: Path) -> dict:
    """Hashes of the data artifacts (scene/fit/report JSON, CSV, tables).
    Manifests and figures carry timing / library-version bytes and are
    provenance sidecars, excluded from the determinism contract."""
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_dir() or path.name == "manifest.json":
            continue
        if path.suffix not in (".json", ".csv", ".txt"):
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        out[str(path.relative_to(root))] = digest
    return out


def test_criterion_8_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("PRIMFIT_THREADS", "2")
    hashes = []
    for run in ("run_a", "run_b"):
        base = tmp_path / run
        scenes = base / "scenes"
        assert cli_main(["generate", "--n", "512", "--m", "64", "--k", "2..4",
                         "--count", "3", "--noise", "0.01", "--seed", "17",
                         "--out", str(scenes)]) == 0
        fits = base / "fits"
        assert cli_main(["fit", "--method", "ransac+em", "--scenes", str(scenes),
                         "--out", str(fits), "--seed", "4",
                         "--min-inliers", "15"]) == 0
        report = base / "report"
        assert cli_main(["eval", "--pred", str(fits), "--gt", str(scenes),
                         "--out", str(report), "--no-figures",
                         "--method-label", "ransac+em"]) == 0
        hashes.append(_hash_data_artifacts(base))
    assert hashes[0] == hashes[1]
    assert len(hashes[0]) >= 9  # 3 scenes + 3 fits + 3 report files
    print(f"\nACCEPTANCE 8 (pipeline determinism, {len(hashes[0])} artifacts "
          f"hashed): PASS")


def test_criterion_9_outlier_regime():
    cov_clean, cov_outlier = [], []
    for i in range(20):
        for fraction, sink in ((0.0, cov_clean), (0.10, cov_outlier)):
            spec = SceneSpec(n_points=2048, m_samples=128, k_range=(3, 6),
                             noise_amplitude=0.01, outlier_fraction=fraction,
                             seed=9900 + i)
            scene = generate_scene(spec)
            assert np.all(
                scene.membership.weights[~scene.membership.assigned_mask()] == 0.0
            )
            bundle = compute_metrics(scene, oracle_fit(scene))
            sink.append(bundle.p_coverage[0.02])
    drop = float(np.mean(cov_clean)) - float(np.mean(cov_outlier))
    assert drop < 2.0
    print(f"\nACCEPTANCE 9 (outlier regime, coverage drop {drop:.3f} pts): PASS")
