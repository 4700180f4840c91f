"""primfit: differentiable multi-primitive fitting for 3D point clouds.

Weighted least-squares estimators for planes, spheres, cylinders and cones
with hand-derived gradients, segment matching by relaxed IoU, training-style
losses, evaluation metrics, a deterministic synthetic scene generator, and
RANSAC / EM fitting pipelines, all behind one CLI.
"""

__version__ = "0.1.0"

from .core import (
    CONE,
    CYLINDER,
    PLANE,
    SPHERE,
    TYPE_NAMES,
    BoundedSurface,
    Cone,
    Cylinder,
    DegenerateInput,
    FitResult,
    FittedPrimitive,
    GroundTruthScene,
    MembershipMatrix,
    Plane,
    PointCloud,
    PrimitiveParams,
    SpecInfeasible,
    Sphere,
    TypeMatrix,
    validate,
)
from .estimators import (
    distance,
    estimate_all,
    fit_cone,
    fit_cylinder,
    fit_plane,
    fit_primitive,
    fit_sphere,
    surface_distances,
)
from .fitters import (
    EmConfig,
    RansacConfig,
    discard_small,
    em_fit,
    oracle_fit,
    ransac_fit,
    segment_fit,
    vote_types,
)
from .losses import LossBreakdown, total_loss
from .matching import Assignment, hungarian, match_by_residual, match_primitives, relaxed_iou
from .metrics import MetricsBundle, compute_metrics
from .numeric import (
    GradientBundle,
    HomogeneousLsqSolution,
    LinearLsqSolution,
    condition_number,
    weighted_homogeneous_lsq,
    weighted_homogeneous_lsq_grad,
    weighted_linear_lsq,
    weighted_linear_lsq_grad,
)
from .synthgen import SceneSpec, generate_scene, perturb_membership, sample_surface
