"""Shared fixtures and independent oracles used across the test suite."""

import itertools

import numpy as np
import pytest

from primfit.core import CONE, CYLINDER, PLANE, SPHERE
from primfit.synthgen import SceneSpec, generate_scene


def brute_force_assignment(cost: np.ndarray):
    """Exhaustive minimum over all partial bijections of size min(K, K').

    Returns (best cost, set of optimal pair-sets). Independent of the
    production solver: plain itertools enumeration.
    """
    n_gt, n_pred = cost.shape
    size = min(n_gt, n_pred)
    best = None
    optima = []
    for rows in itertools.combinations(range(n_gt), size):
        for cols in itertools.permutations(range(n_pred), size):
            total = sum(cost[r, c] for r, c in zip(rows, cols))
            if best is None or total < best - 1e-12:
                best = total
                optima = [frozenset(zip(rows, cols))]
            elif abs(total - best) <= 1e-12:
                optima.append(frozenset(zip(rows, cols)))
    return best, optima


@pytest.fixture
def small_scene():
    """A small deterministic noiseless scene with all four primitive types."""
    spec = SceneSpec(
        n_points=1024,
        m_samples=128,
        k_range=(4, 4),
        noise_amplitude=0.0,
        seed=42,
    )
    # redraw seeds until all four types appear, deterministically
    for seed in range(42, 142):
        scene = generate_scene(spec, seed=seed)
        if set(scene.surface_types().tolist()) == {PLANE, SPHERE, CYLINDER, CONE}:
            return scene
    raise RuntimeError("no 4-type scene found in the seed range")


@pytest.fixture
def noisy_scene():
    spec = SceneSpec(
        n_points=2048,
        m_samples=128,
        k_range=(3, 5),
        noise_amplitude=0.01,
        seed=7,
    )
    return generate_scene(spec)
