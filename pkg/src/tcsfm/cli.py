"""Command-line entry point: synth, run, eval, export.

Exit codes: 0 success, 1 stage/runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .config import PipelineConfig
from .errors import StageFailed, TcsfmError
from .pipeline import run_pipeline
from .report import render_figures, write_report_tsv
from .synth import SceneSpec, evaluate_against_gt, generate_scene, inject_mismatches

log = logging.getLogger("tcsfm")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcsfm",
        description="Track-community SfM with duplicate-structure disambiguation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--spec", required=True, help="scene spec JSON (empty object for defaults)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("run", help="run the full pipeline on an ingest file")
    p.add_argument("--input", required=True, help="ingest JSON file")
    p.add_argument("--config", help="pipeline config file (key = value lines)")
    p.add_argument(
        "--no-disambiguation",
        action="store_true",
        help="skip ambiguity detection and correction (baseline)",
    )
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="compare a model directory against ground truth")
    p.add_argument("--model", required=True, help="model directory (poses.txt, points.ply)")
    p.add_argument("--gt", required=True, help="ground-truth sidecar JSON")

    p = sub.add_parser("export", help="export a model directory to PLY")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--ply", required=True, help="output PLY path")
    p.add_argument("--with-cameras", action="store_true", help="append camera centers")
    return parser


def _cmd_synth(args) -> int:
    spec = io.load_scene_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    views, matches, gt = generate_scene(spec)
    if spec.rho > 0:
        matches = inject_mismatches(matches, gt, spec.rho, spec.seed)
    io.save_ingest(out / "scene.json", views, matches)
    io.save_ground_truth(out / "ground_truth.json", gt)
    print(
        f"wrote {out / 'scene.json'} ({len(views)} views, "
        f"{sum(len(m.pairs) for m in matches)} match pairs, "
        f"{len(gt.injected)} injected) and {out / 'ground_truth.json'}"
    )
    return 0


def _write_run_outputs(out: Path, result, views) -> None:
    view_by_id = {v.id: v for v in views}
    manifest = {k: v for k, v in result.manifest.items() if k != "timings"}
    manifest.pop("total_seconds", None)
    manifest["outputs"] = {
        "poses": "poses.txt",
        "points": "points.ply",
        "report": "report.tsv",
        "labeling": "labeling.txt",
        "disambiguation": "disambiguation.txt",
        "alignment_audit": "alignment_audit.txt",
    }
    if result.recon is not None:
        io.save_poses(out / "poses.txt", result.recon.poses)
        io.export_ply(result.recon, out / "points.ply")
    if result.labeling is not None:
        io.write_labeling(out / "labeling.txt", result.full_label or result.labeling.label)
    io.write_disambiguation_report(
        out / "disambiguation.txt", result.verdicts, result.gsi_reports, result.removed
    )
    io.write_alignment_audit(out / "alignment_audit.txt", result.alignments)
    io.save_manifest(out / "manifest.json", manifest)
    write_report_tsv(out / "report.tsv", result)
    render_figures(out, result, view_by_id)


def _cmd_run(args) -> int:
    config = io.load_config(args.config) if args.config else PipelineConfig()
    if args.threads is not None:
        config = config.with_overrides(threads=args.threads)
    views, matches = io.load_ingest(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run_pipeline(
            views, matches, config, disambiguation=not args.no_disambiguation
        )
    except StageFailed as e:
        io.save_manifest(out / "manifest.json", {"failed_stage": e.stage, "error": str(e.cause)})
        print(f"error: {e}", file=sys.stderr)
        return 1
    _write_run_outputs(out, result, views)
    c = result.manifest["counts"]
    print(
        f"registered {c['n_registered']}/{c['n_views']} views, "
        f"{c['n_points']} points, {c['n_communities']} communities "
        f"({c['n_ambiguous_communities']} ambiguous), outputs in {out}"
    )
    return 0


def _cmd_eval(args) -> int:
    recon = io.load_model(args.model)
    gt = io.load_ground_truth(args.gt)
    metrics = evaluate_against_gt(recon, gt)
    for k in sorted(metrics):
        if k == "center_errors_pct":
            continue
        print(f"{k}\t{metrics[k]}")
    return 0


def _cmd_export(args) -> int:
    recon = io.load_model(args.model)
    io.export_ply(recon, args.ply, with_cameras=args.with_cameras)
    n = len(recon.points) + (len(recon.poses) if args.with_cameras else 0)
    print(f"wrote {args.ply} ({n} vertices)")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "synth": _cmd_synth,
        "run": _cmd_run,
        "eval": _cmd_eval,
        "export": _cmd_export,
    }
    try:
        return handlers[args.command](args)
    except TcsfmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
