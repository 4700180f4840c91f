"""On-disk formats: scene files, fit files, and a deterministic JSON writer.

Floats are printed with 17 significant digits so parsing the file recovers the
exact binary value; writing the same object twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Union

import numpy as np

from .core import (
    TYPE_NAMES,
    BoundedSurface,
    FitResult,
    FittedPrimitive,
    GroundTruthScene,
    MembershipMatrix,
    PointCloud,
    TypeMatrix,
    params_from_dict,
)

PathLike = Union[str, Path]


def _fmt(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    return format(float(x), ".17g")


def dumps(obj) -> str:
    """Serialize nested dict/list/scalar data to JSON with 17-digit floats."""
    parts: list = []
    _emit(obj, parts)
    return "".join(parts)


def _emit(obj, parts: list) -> None:
    if obj is None:
        parts.append("null")
    elif isinstance(obj, bool):
        parts.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(_fmt(obj))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, dict):
        parts.append("{")
        for i, (key, val) in enumerate(obj.items()):
            if i:
                parts.append(",")
            parts.append(json.dumps(str(key)))
            parts.append(":")
            _emit(val, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, val in enumerate(obj):
            if i:
                parts.append(",")
            _emit(val, parts)
        parts.append("]")
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), parts)
    else:
        raise TypeError(f"cannot serialize {type(obj)!r}")


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write via a temporary file and rename, so outputs are never torn."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

def scene_to_dict(scene: GroundTruthScene) -> dict:
    mem = scene.membership.weights
    return {
        "seed": int(scene.seed),
        "n": scene.n,
        "k": scene.k,
        "positions": scene.cloud.positions.tolist(),
        "clean_positions": scene.clean_positions.tolist(),
        "normals": None if scene.cloud.normals is None else scene.cloud.normals.tolist(),
        "membership": mem.reshape(-1).tolist(),
        "types": scene.types.labels().tolist(),
        "surfaces": [
            {
                "type": TYPE_NAMES[s.prim_type],
                "params": s.params.as_dict(),
                "samples": s.samples.tolist(),
                "area_fraction": s.area_fraction,
            }
            for s in scene.surfaces
        ],
    }


def scene_from_dict(d: dict) -> GroundTruthScene:
    n, k = int(d["n"]), int(d["k"])
    surfaces = []
    for sd in d["surfaces"]:
        params = params_from_dict(sd["type"], sd["params"])
        surfaces.append(
            BoundedSurface(
                prim_type=TYPE_NAMES.index(sd["type"]),
                params=params,
                samples=np.asarray(sd["samples"], dtype=np.float64),
                area_fraction=float(sd["area_fraction"]),
            )
        )
    normals = d.get("normals")
    cloud = PointCloud(
        positions=np.asarray(d["positions"], dtype=np.float64),
        normals=None if normals is None else np.asarray(normals, dtype=np.float64),
    )
    membership = MembershipMatrix(
        np.asarray(d["membership"], dtype=np.float64).reshape(n, k), binary=True
    )
    return GroundTruthScene(
        cloud=cloud,
        clean_positions=np.asarray(d["clean_positions"], dtype=np.float64),
        surfaces=tuple(surfaces),
        membership=membership,
        types=TypeMatrix.from_labels(d["types"]),
        seed=int(d["seed"]),
    )


def write_scene(path: PathLike, scene: GroundTruthScene) -> None:
    atomic_write_text(path, dumps(scene_to_dict(scene)) + "\n")


def read_scene(path: PathLike) -> GroundTruthScene:
    return scene_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Fit files
# ---------------------------------------------------------------------------

def fit_to_dict(fit: FitResult) -> dict:
    return {
        "n": fit.membership.n,
        "k": fit.k,
        "primitives": [
            {
                "type": TYPE_NAMES[p.prim_type],
                "params": p.params.as_dict(),
                "confidence": float(p.confidence),
            }
            for p in fit.primitives
        ],
        "membership": fit.membership.weights.reshape(-1).tolist(),
        "per_point_types": None
        if fit.per_point_types is None
        else fit.per_point_types.reshape(-1).tolist(),
        "normals": None if fit.normals is None else fit.normals.tolist(),
        "meta": fit.meta,
    }


def fit_from_dict(d: dict) -> FitResult:
    n, k = int(d["n"]), int(d["k"])
    prims = tuple(
        FittedPrimitive(
            params=params_from_dict(pd["type"], pd["params"]),
            confidence=float(pd["confidence"]),
        )
        for pd in d["primitives"]
    )
    ppt = d.get("per_point_types")
    normals = d.get("normals")
    return FitResult(
        primitives=prims,
        membership=MembershipMatrix(
            np.asarray(d["membership"], dtype=np.float64).reshape(n, k)
        ),
        per_point_types=None
        if ppt is None
        else np.asarray(ppt, dtype=np.float64).reshape(n, 4),
        normals=None if normals is None else np.asarray(normals, dtype=np.float64),
        meta=d.get("meta", {}),
    )


def write_fit(path: PathLike, fit: FitResult) -> None:
    atomic_write_text(path, dumps(fit_to_dict(fit)) + "\n")


def read_fit(path: PathLike) -> FitResult:
    return fit_from_dict(json.loads(Path(path).read_text()))
