"""Run reports: delimited summary plus rendered figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_report_tsv(path, result) -> None:
    """Flat key\tvalue summary of counts, timings, and per-community stats."""
    lines = ["key\tvalue"]
    for k, v in sorted(result.manifest.get("counts", {}).items()):
        lines.append(f"count.{k}\t{v}")
    for k, v in result.manifest.get("timings", {}).items():
        lines.append(f"seconds.{k}\t{v}")
    lines.append(f"seconds.total\t{result.manifest.get('total_seconds', 0.0)}")
    for v in result.verdicts:
        lines.append(
            f"community.{v.community}\tratio={v.erroneous_ratio:.4f}"
            f" ambiguous={int(v.ambiguous)} tracks={v.n_tracks}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def render_figures(out_dir, result, views: dict | None = None) -> list:
    """Renders overview figures next to the delimited report; returns paths."""
    out_dir = Path(out_dir)
    paths = []

    if result.gsi_reports:
        fig, ax = plt.subplots(figsize=(6, 4))
        gsi = [r.gsi for r in result.gsi_reports.values()]
        ax.hist(gsi, bins=40, color="steelblue")
        ax.set_xlabel("Gini-Simpson index")
        ax.set_ylabel("sampled tracks")
        ax.set_title("Track neighborhood diversity")
        p = out_dir / "gsi_histogram.png"
        fig.savefig(p, dpi=110, bbox_inches="tight")
        plt.close(fig)
        paths.append(str(p))

    if result.labeling is not None:
        sizes = sorted(
            (len(m) for m in result.labeling.members().values()), reverse=True
        )
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(sizes)), sizes, color="darkseagreen")
        ax.set_xlabel("community (by size)")
        ax.set_ylabel("sampled tracks")
        ax.set_title("Track communities")
        p = out_dir / "communities.png"
        fig.savefig(p, dpi=110, bbox_inches="tight")
        plt.close(fig)
        paths.append(str(p))

    if result.recon is not None and result.recon.points:
        pts = np.stack(list(result.recon.points.values()))
        cams = np.stack([p.c for p in result.recon.poses.values()])
        fig, ax = plt.subplots(figsize=(6, 6))
        ax.scatter(pts[:, 0], pts[:, 1], s=2, c="gray", label="points")
        ax.scatter(cams[:, 0], cams[:, 1], s=25, c="crimson", marker="^", label="cameras")
        ax.set_aspect("equal")
        ax.legend(loc="upper right")
        ax.set_title("Merged model (top view)")
        p = out_dir / "model_topdown.png"
        fig.savefig(p, dpi=110, bbox_inches="tight")
        plt.close(fig)
        paths.append(str(p))
    return paths
