"""Command-line harness: generate scenes, fit them, evaluate fits, check
gradients, and compare reports.

Every command is deterministic given its flags and --seed: the data artifacts
(scene/fit/report JSON, CSV, tables) are byte-identical across reruns. Each
command also writes a manifest.json recording the command line, config,
version and wall-clock time; manifests and rendered figures carry timing or
library-version dependent bytes and are provenance sidecars, not data.

Exit codes: 0 success, 1 usage error, 2 partial failure (missing inputs,
failed shapes, failed gradient checks).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__, io
from .core import TYPE_NAMES, FitResult, GroundTruthScene
from .fitters import (
    DISCARD_THRESHOLD,
    EmConfig,
    RansacConfig,
    discard_small,
    em_fit,
    oracle_fit,
    ransac_fit,
    segment_fit,
)
from .gradcheck import run_gradcheck
from .metrics import DEFAULT_EPSILONS, compute_metrics
from .report import (
    aggregate,
    compare,
    render_csv,
    render_figures,
    render_table,
    report_to_dict,
)
from .synthgen import SceneSpec, generate_scene, stream

OK, USAGE_ERROR, PARTIAL_FAILURE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _pool_size() -> int:
    env = os.environ.get("PRIMFIT_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _map_ordered(func, items: Sequence):
    """Worker-pool map preserving input order for deterministic reduces."""
    workers = _pool_size()
    if workers == 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def _write_manifest(out_dir: Path, argv: Sequence[str], config: dict,
                    seed: Optional[int], inputs: List[str], outputs: List[str],
                    started: float) -> None:
    manifest = {
        "command": list(argv),
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "wall_clock_s": time.monotonic() - started,
    }
    io.atomic_write_text(out_dir / "manifest.json", io.dumps(manifest) + "\n")


def _parse_range(text: str):
    lo, _, hi = text.partition("..")
    hi = hi or lo
    return int(lo), int(hi)


def _parse_mix(text: str):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise ValueError("type mix needs 4 comma-separated probabilities")
    return tuple(parts)


def _parse_eps(text: str):
    return tuple(float(x) for x in text.split(","))


def _scene_paths(scenes_arg: str) -> List[Path]:
    p = Path(scenes_arg)
    found = p.glob("*.json") if p.is_dir() else Path(p.parent).glob(p.name)
    return sorted((q for q in found if q.name != "manifest.json"), key=lambda q: q.name)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args, argv) -> int:
    started = time.monotonic()
    try:
        spec = SceneSpec(
            k_range=_parse_range(args.k),
            type_mix=_parse_mix(args.type_mix),
            n_points=args.n,
            m_samples=args.m,
            noise_amplitude=args.noise,
            outlier_fraction=args.outliers,
            min_area_fraction=args.min_area,
            seed=args.seed,
        )
    except ValueError as exc:
        print(f"invalid scene spec: {exc}", file=sys.stderr)
        return USAGE_ERROR
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    scene_seeds = [
        int(stream(args.seed, i).integers(0, 2**63 - 1)) for i in range(args.count)
    ]

    def build(item):
        index, scene_seed = item
        scene = generate_scene(spec, seed=scene_seed)
        path = out_dir / f"scene_{index:05d}.json"
        io.write_scene(path, scene)
        return str(path)

    paths = _map_ordered(build, list(enumerate(scene_seeds)))
    _write_manifest(
        out_dir, argv, {"spec": asdict(spec), "count": args.count},
        args.seed, [], paths, started,
    )
    print(f"wrote {len(paths)} scenes to {out_dir}")
    return OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _fit_one(scene: GroundTruthScene, method: str, inject: set,
             ransac_cfg: RansacConfig, em_cfg: EmConfig,
             discard: Optional[float]) -> FitResult:
    if method == "oracle":
        fit = oracle_fit(scene)
    elif "w" in inject:
        fit = segment_fit(
            scene, use_gt_types=("t" in inject),
            method_label=f"{method}+{'+'.join(sorted(inject))}",
        )
        if method == "ransac+em":
            fit = em_fit(scene.cloud.positions, scene.cloud.normals, fit, em_cfg)
    elif method == "ransac":
        fit = ransac_fit(scene.cloud.positions, scene.cloud.normals, ransac_cfg)
    elif method == "ransac+em":
        init = ransac_fit(scene.cloud.positions, scene.cloud.normals, ransac_cfg)
        if init.k == 0:
            fit = init
        else:
            fit = em_fit(scene.cloud.positions, scene.cloud.normals, init, em_cfg)
    else:
        raise ValueError(f"unknown method {method!r}")
    if discard is not None and fit.k:
        fit = discard_small(fit, discard)
    return fit


def cmd_fit(args, argv) -> int:
    started = time.monotonic()
    inject = set(filter(None, args.inject.split(","))) if args.inject else set()
    if not inject <= {"w", "n", "t"}:
        print(f"--inject takes a subset of w,n,t, got {args.inject!r}", file=sys.stderr)
        return USAGE_ERROR

    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())
    ransac_cfg = RansacConfig(**{**config.get("ransac", {}), **{
        k: v for k, v in {
            "distance_epsilon": args.distance_eps,
            "normal_epsilon_deg": args.normal_eps_deg,
            "min_inliers": args.min_inliers,
            "max_candidates_per_round": args.candidates,
            "rounds": args.rounds,
            "seed": args.seed,
        }.items() if v is not None
    }})
    em_cfg = EmConfig(**{**config.get("em", {}), **{
        k: v for k, v in {
            "iterations": args.em_iterations,
            "temperature": args.em_temperature,
            "hard_assign": None if args.em_soft is None else not args.em_soft,
            "unassign_cap": args.em_cap,
        }.items() if v is not None
    }})

    scene_files = _scene_paths(args.scenes)
    if not scene_files:
        print(f"no scene files found under {args.scenes!r}", file=sys.stderr)
        return USAGE_ERROR
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    method_label = args.method + (f"+{'+'.join(sorted(inject))}" if inject else "")

    def run(path: Path) -> str:
        scene = io.read_scene(path)
        fit = _fit_one(scene, args.method, inject, ransac_cfg, em_cfg, args.discard)
        fit = FitResult(
            primitives=fit.primitives,
            membership=fit.membership,
            per_point_types=fit.per_point_types,
            normals=fit.normals,
            meta={**fit.meta, "method": method_label, "scene": path.name,
                  "seed": args.seed},
        )
        out_path = out_dir / path.name
        io.write_fit(out_path, fit)
        return str(out_path)

    outputs = _map_ordered(run, scene_files)
    _write_manifest(
        out_dir, argv,
        {"method": method_label, "ransac": asdict(ransac_cfg), "em": asdict(em_cfg),
         "inject": sorted(inject), "discard": args.discard},
        args.seed, [str(p) for p in scene_files], outputs, started,
    )
    print(f"fitted {len(outputs)} scenes with {method_label} into {out_dir}")
    return OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args, argv) -> int:
    started = time.monotonic()
    eps = _parse_eps(args.eps)
    gt_files = _scene_paths(args.gt)
    if not gt_files:
        print(f"no ground-truth scenes under {args.gt!r}", file=sys.stderr)
        return USAGE_ERROR
    pred_dir = Path(args.pred)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def evaluate(path: Path):
        pred_path = pred_dir / path.name
        if not pred_path.exists():
            return path.stem, None
        scene = io.read_scene(path)
        fit = io.read_fit(pred_path)
        return path.stem, compute_metrics(scene, fit, eps)

    rows = _map_ordered(evaluate, gt_files)
    failed = [sid for sid, bundle in rows if bundle is None]
    kept = [(sid, bundle) for sid, bundle in rows if bundle is not None]

    report = aggregate(
        [b for _, b in kept], [sid for sid, _ in kept],
        method=args.method_label, epsilons=eps, failed_shapes=failed,
    )
    io.atomic_write_text(out_dir / "report.json", io.dumps(report_to_dict(report)) + "\n")
    io.atomic_write_text(out_dir / "report.txt", render_table(report))
    io.atomic_write_text(out_dir / "report.csv", render_csv(report))
    outputs = [str(out_dir / name) for name in ("report.json", "report.txt", "report.csv")]
    if args.figures:
        outputs += render_figures(report, out_dir / "figures")
    _write_manifest(
        out_dir, argv, {"eps": list(eps), "method_label": args.method_label},
        None, [str(p) for p in gt_files], outputs, started,
    )
    sys.stdout.write(render_table(report))
    if failed:
        print(f"missing predictions for {len(failed)} shapes: {', '.join(failed)}",
              file=sys.stderr)
        return PARTIAL_FAILURE
    return OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args, argv) -> int:
    names = list(TYPE_NAMES) if args.estimator == "all" else [args.estimator]
    report = run_gradcheck(names, trials=args.trials, seed=args.seed)
    text = io.dumps(report) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        io.atomic_write_text(args.out, text)
    sys.stdout.write(text)
    for name, entry in report["estimators"].items():
        status = "ok" if entry["pass"] else "FAIL"
        print(
            f"{name}: weights {entry['weights']:.2e}  points {entry['points']:.2e}  "
            f"normals {entry['normals']:.2e}  [{status}]",
            file=sys.stderr,
        )
    print(f"degenerate suite: {'ok' if report['degenerate']['pass'] else 'FAIL'}",
          file=sys.stderr)
    return OK if report["pass"] else PARTIAL_FAILURE


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def cmd_compare(args, argv) -> int:
    def load(path):
        d = json.loads(Path(path).read_text())
        from .metrics import MetricsBundle

        bundles, ids = [], []
        for shape in d["shapes"]:
            ids.append(shape["id"])
            bundles.append(
                MetricsBundle(
                    seg_mean_iou=shape["seg_mean_iou"],
                    type_accuracy_pct=shape["type_accuracy_pct"],
                    point_normal_deg=shape["point_normal_deg"],
                    primitive_axis_deg=shape["primitive_axis_deg"],
                    sk_residual_mean=shape["sk_residual_mean"],
                    sk_residual_std=shape["sk_residual_std"],
                    sk_coverage={float(k): v for k, v in shape["sk_coverage"].items()},
                    p_coverage={float(k): v for k, v in shape["p_coverage"].items()},
                )
            )
        return aggregate(bundles, ids, method=d.get("method", ""),
                         epsilons=[float(e) for e in d["epsilons"]])

    try:
        delta = compare(load(args.a), load(args.b))
    except ValueError as exc:
        print(f"cannot compare: {exc}", file=sys.stderr)
        return USAGE_ERROR
    text = io.dumps(delta) + "\n"
    if args.out:
        io.atomic_write_text(args.out, text)
    sys.stdout.write(text)
    for key, entry in delta["deltas"].items():
        dm = entry["delta_mean"]
        dm_txt = "-" if dm is None else f"{dm:+.4f}"
        print(
            f"{key:24s} delta {dm_txt}  (+{entry['higher']} / -{entry['lower']}"
            f" / ={entry['tied']})",
            file=sys.stderr,
        )
    return OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="primfit",
        description="Primitive-fitting toolkit: scene generation, fitting, "
                    "evaluation, gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate ground-truth scenes")
    g.add_argument("--n", type=int, default=8192, help="points per scene")
    g.add_argument("--m", type=int, default=512, help="stored samples per surface")
    g.add_argument("--noise", type=float, default=0.01, help="noise amplitude")
    g.add_argument("--k", default="3..12", help="primitive count range lo..hi")
    g.add_argument("--count", type=int, default=1, help="number of scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--outliers", type=float, default=0.0, help="outlier fraction")
    g.add_argument("--type-mix", default="0.25,0.25,0.25,0.25")
    g.add_argument("--min-area", type=float, default=0.02,
                   help="minimum primitive area fraction")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit primitives to scenes")
    f.add_argument("--method", choices=["oracle", "ransac", "ransac+em"],
                   required=True)
    f.add_argument("--scenes", required=True, help="scene dir or glob")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--config", help="JSON config; flags override its values")
    f.add_argument("--inject", default="",
                   help="comma list of ground-truth channels to inject: w,n,t")
    f.add_argument("--distance-eps", type=float, default=None)
    f.add_argument("--normal-eps-deg", type=float, default=None)
    f.add_argument("--min-inliers", type=int, default=None)
    f.add_argument("--candidates", type=int, default=None)
    f.add_argument("--rounds", type=int, default=None)
    f.add_argument("--em-iterations", type=int, default=None)
    f.add_argument("--em-temperature", type=float, default=None)
    f.add_argument("--em-soft", action="store_const", const=True, default=None)
    f.add_argument("--em-cap", type=float, default=None)
    f.add_argument("--discard", type=float, default=DISCARD_THRESHOLD,
                   help="drop columns below this mean membership")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="evaluate fits against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--eps", default=",".join(str(x) for x in DEFAULT_EPSILONS))
    e.add_argument("--out", required=True)
    e.add_argument("--method-label", default="")
    e.add_argument("--figures", dest="figures", action="store_true", default=True)
    e.add_argument("--no-figures", dest="figures", action="store_false")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient fidelity")
    c.add_argument("--estimator", default="all",
                   choices=["all", *TYPE_NAMES])
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("compare", help="delta table between two reports")
    d.add_argument("--a", required=True)
    d.add_argument("--b", required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return args.func(args, ["primfit", *argv])
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
