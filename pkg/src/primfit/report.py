"""Dataset-level aggregation of per-shape metric bundles.

A report carries the per-shape rows, arithmetic means computed by skipping
absent values (with the skip counts recorded in the header), and per-surface
coverage binned by primitive area fraction. Reports render to JSON
(schema 1), an aligned plain-text table, CSV, and matplotlib figures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import DEFAULT_SCALE_BINS, MetricsBundle

SCHEMA_VERSION = 1

_SCALAR_METRICS = (
    "seg_mean_iou",
    "type_accuracy_pct",
    "point_normal_deg",
    "primitive_axis_deg",
    "sk_residual_mean",
    "sk_residual_std",
)


@dataclass(frozen=True)
class DatasetReport:
    method: str
    epsilons: Tuple[float, ...]
    shape_ids: Tuple[str, ...]
    bundles: Tuple[MetricsBundle, ...]
    means: Dict[str, Optional[float]]
    absent_counts: Dict[str, int]
    scale_bin_edges: Tuple[float, ...]
    scale_bin_coverage: Dict[float, Tuple[Optional[float], ...]]
    scale_bin_counts: Tuple[int, ...]
    failed_shapes: Tuple[str, ...] = ()


def _mean_skipping_none(values: Sequence[Optional[float]]):
    present = [v for v in values if v is not None]
    absent = len(values) - len(present)
    return (float(np.mean(present)) if present else None), absent


def aggregate(bundles: Sequence[MetricsBundle], shape_ids: Sequence[str],
              method: str = "", epsilons: Optional[Sequence[float]] = None,
              bin_edges: Sequence[float] = DEFAULT_SCALE_BINS,
              failed_shapes: Sequence[str] = ()) -> DatasetReport:
    """Arithmetic-mean aggregation over shapes, ordered by shape id; absent
    per-shape values are skipped and counted."""
    order = np.argsort(np.asarray(shape_ids, dtype=object), kind="stable")
    bundles = [bundles[i] for i in order]
    shape_ids = [shape_ids[i] for i in order]
    if epsilons is None:
        epsilons = sorted(bundles[0].sk_coverage) if bundles else []

    means: Dict[str, Optional[float]] = {}
    absent: Dict[str, int] = {}
    for name in _SCALAR_METRICS:
        means[name], absent[name] = _mean_skipping_none(
            [getattr(b, name) for b in bundles]
        )
    for eps in epsilons:
        key = f"sk_coverage@{eps:g}"
        means[key], absent[key] = _mean_skipping_none(
            [b.sk_coverage.get(eps) for b in bundles]
        )
        key = f"p_coverage@{eps:g}"
        means[key], absent[key] = _mean_skipping_none(
            [b.p_coverage.get(eps) for b in bundles]
        )

    # dataset-wide scale bins over every ground-truth surface
    edges = tuple(float(e) for e in bin_edges)
    bin_cov: Dict[float, Tuple[Optional[float], ...]] = {}
    counts_out: Tuple[int, ...] = tuple(0 for _ in edges[:-1])
    for eps in epsilons:
        fracs: List[float] = []
        covs: List[float] = []
        for b in bundles:
            per_surf = b.per_surface_coverage.get(eps)
            if per_surf is None:
                continue
            fracs.extend(b.area_fractions)
            covs.extend(per_surf)
        fr = np.asarray(fracs)
        cv = np.asarray(covs)
        means_eps: List[Optional[float]] = []
        counts: List[int] = []
        for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
            mask = (fr >= lo) & ((fr <= hi) if i == len(edges) - 2 else (fr < hi))
            counts.append(int(mask.sum()))
            means_eps.append(float(cv[mask].mean()) if np.any(mask) else None)
        bin_cov[eps] = tuple(means_eps)
        counts_out = tuple(counts)

    return DatasetReport(
        method=method,
        epsilons=tuple(float(e) for e in epsilons),
        shape_ids=tuple(shape_ids),
        bundles=tuple(bundles),
        means=means,
        absent_counts=absent,
        scale_bin_edges=edges,
        scale_bin_coverage=bin_cov,
        scale_bin_counts=counts_out,
        failed_shapes=tuple(failed_shapes),
    )


def compare(report_a: DatasetReport, report_b: DatasetReport) -> dict:
    """Per-metric deltas (b - a) over the shared shape set, plus per-shape sign
    counts. Raises ValueError when the reports share no shapes."""
    shared = sorted(set(report_a.shape_ids) & set(report_b.shape_ids))
    if not shared:
        raise ValueError("reports have no shapes in common")
    idx_a = {s: i for i, s in enumerate(report_a.shape_ids)}
    idx_b = {s: i for i, s in enumerate(report_b.shape_ids)}

    def per_shape(report, sid, key):
        b = report.bundles[idx_a[sid] if report is report_a else idx_b[sid]]
        if "@" in key:
            name, eps = key.split("@")
            table = b.sk_coverage if name == "sk_coverage" else b.p_coverage
            return table.get(float(eps))
        return getattr(b, key)

    keys = list(_SCALAR_METRICS) + [
        f"{name}@{eps:g}"
        for eps in report_a.epsilons
        for name in ("sk_coverage", "p_coverage")
    ]
    deltas = {}
    for key in keys:
        pairs = [
            (per_shape(report_a, s, key), per_shape(report_b, s, key))
            for s in shared
        ]
        pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
        if not pairs:
            deltas[key] = {"delta_mean": None, "higher": 0, "lower": 0, "tied": 0}
            continue
        diff = np.array([b - a for a, b in pairs])
        deltas[key] = {
            "delta_mean": float(diff.mean()),
            "higher": int((diff > 0).sum()),
            "lower": int((diff < 0).sum()),
            "tied": int((diff == 0).sum()),
        }
    return {"schema": SCHEMA_VERSION, "shared_shapes": shared, "deltas": deltas}


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def report_to_dict(report: DatasetReport) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "method": report.method,
        "epsilons": list(report.epsilons),
        "shapes": [
            {"id": sid, **b.as_dict()}
            for sid, b in zip(report.shape_ids, report.bundles)
        ],
        "means": report.means,
        "absent_counts": report.absent_counts,
        "scale_bins": {
            "edges": list(report.scale_bin_edges),
            "counts": list(report.scale_bin_counts),
            "coverage": {
                f"{eps:g}": list(v) for eps, v in report.scale_bin_coverage.items()
            },
        },
        "failed_shapes": list(report.failed_shapes),
    }


def _columns(report: DatasetReport) -> List[Tuple[str, str]]:
    cols = [
        ("seg_mean_iou", "Seg IoU"),
        ("type_accuracy_pct", "Type %"),
        ("point_normal_deg", "Normal deg"),
        ("primitive_axis_deg", "Axis deg"),
        ("sk_residual_mean", "Res mean"),
        ("sk_residual_std", "Res std"),
    ]
    for eps in report.epsilons:
        cols.append((f"sk_coverage@{eps:g}", f"Sk cov@{eps:g}"))
    for eps in report.epsilons:
        cols.append((f"p_coverage@{eps:g}", f"P cov@{eps:g}"))
    return cols


def _cell(bundle: MetricsBundle, key: str) -> Optional[float]:
    if "@" in key:
        name, eps = key.split("@")
        table = bundle.sk_coverage if name == "sk_coverage" else bundle.p_coverage
        return table.get(float(eps))
    return getattr(bundle, key)


def render_table(report: DatasetReport) -> str:
    """Aligned plain-text table: one row per shape plus the dataset mean.
    Absent values print as '-' and are skipped in the mean (counts in the
    header line)."""
    cols = _columns(report)
    skipped = {k: v for k, v in report.absent_counts.items() if v}
    lines = [f"method: {report.method or '(unnamed)'}   shapes: {len(report.shape_ids)}"]
    if skipped:
        lines.append(
            "absent values skipped in means: "
            + ", ".join(f"{k}={v}" for k, v in sorted(skipped.items()))
        )
    if report.failed_shapes:
        lines.append(f"failed shapes: {', '.join(report.failed_shapes)}")
    width = max([len("shape")] + [len(s) for s in report.shape_ids]) + 2
    header = "shape".ljust(width) + "".join(h.rjust(13) for _, h in cols)
    lines.append(header)
    lines.append("-" * len(header))

    def fmt(v: Optional[float]) -> str:
        return "-".rjust(13) if v is None else f"{v:13.4f}"

    for sid, b in zip(report.shape_ids, report.bundles):
        lines.append(sid.ljust(width) + "".join(fmt(_cell(b, k)) for k, _ in cols))
    lines.append("-" * len(header))
    lines.append(
        "mean".ljust(width) + "".join(fmt(report.means.get(k)) for k, _ in cols)
    )
    return "\n".join(lines) + "\n"


def render_csv(report: DatasetReport) -> str:
    """Comma-delimited per-shape metrics with a trailing mean row."""
    cols = _columns(report)
    out = ["shape," + ",".join(k for k, _ in cols)]

    def fmt(v: Optional[float]) -> str:
        return "" if v is None else format(float(v), ".17g")

    for sid, b in zip(report.shape_ids, report.bundles):
        out.append(sid + "," + ",".join(fmt(_cell(b, k)) for k, _ in cols))
    out.append("mean," + ",".join(fmt(report.means.get(k)) for k, _ in cols))
    return "\n".join(out) + "\n"


def render_figures(report: DatasetReport, out_dir) -> List[str]:
    """Render the coverage-by-scale curve and a dataset summary chart as PNG
    files next to the delimited output; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[str] = []

    edges = np.asarray(report.scale_bin_edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for eps, cov in sorted(report.scale_bin_coverage.items()):
        xs = [c for c, v in zip(centers, cov) if v is not None]
        ys = [v for v in cov if v is not None]
        ax.plot(xs, ys, marker="o", label=f"eps = {eps:g}")
    ax.set_xscale("log")
    ax.set_xlabel("primitive area fraction (bin center)")
    ax.set_ylabel("surface coverage (%)")
    ax.set_ylim(-2, 102)
    ax.set_title(f"coverage by primitive scale ({report.method or 'unnamed'})")
    ax.grid(True, alpha=0.3)
    ax.legend()
    path = out_dir / "coverage_by_scale.png"
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    written.append(str(path))

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    labels, values = [], []
    pct_keys = [("seg_mean_iou", 100.0), ("type_accuracy_pct", 1.0)]
    pct_keys += [(f"sk_coverage@{e:g}", 1.0) for e in report.epsilons]
    pct_keys += [(f"p_coverage@{e:g}", 1.0) for e in report.epsilons]
    for key, factor in pct_keys:
        val = report.means.get(key)
        if val is None:
            continue
        labels.append(key)
        values.append(factor * val)
    ax.barh(np.arange(len(values)), values, color="#4878a8")
    ax.set_yticks(np.arange(len(values)), labels, fontsize=8)
    ax.set_xlabel("percent")
    ax.set_xlim(0, 105)
    ax.set_title(f"dataset means ({report.method or 'unnamed'})")
    ax.invert_yaxis()
    fig.tight_layout()
    path = out_dir / "metric_summary.png"
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    written.append(str(path))
    return written
