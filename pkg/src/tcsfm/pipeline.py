"""End-to-end orchestration: correspondence graphs, track communities,
ambiguity correction, per-cluster reconstruction, and model merging."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .community import (
    CommunityLabeling,
    ImageCluster,
    detect_communities,
    extend_labels,
    image_clusters,
)
from .config import PipelineConfig
from .disambiguation import (
    all_gsi_reports,
    correct_ambiguous_cluster,
    flag_ambiguous,
)
from .errors import InitializationFailed, StageFailed, TcsfmError
from .merge import (
    MIN_CROSS_SUPPORT,
    final_bundle_adjust,
    find_cross_model_correspondences,
    initialize_alignment,
    merge_all,
    refine_alignment,
)
from .sfm import merge_overlapping_clusters, reconstruct_cluster
from .tracks import (
    assign_superpixels,
    build_track_graph,
    build_tracks,
    build_view_graph,
    sample_tracks,
)

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    recon: object = None            # merged Reconstruction
    models: list = field(default_factory=list)
    alignments: list = field(default_factory=list)
    tracks: list = field(default_factory=list)
    sampled: list = field(default_factory=list)
    labeling: CommunityLabeling | None = None
    full_label: dict = field(default_factory=dict)
    gsi_reports: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    corrections: dict = field(default_factory=dict)  # segment -> CorrectionResult
    removed: set = field(default_factory=set)
    clusters: list = field(default_factory=list)     # reconstructed clusters
    manifest: dict = field(default_factory=dict)


def _stage(manifest: dict, name: str):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            manifest["timings"][name] = round(time.perf_counter() - self.t0, 4)
            if exc is not None and isinstance(exc, TcsfmError):
                raise StageFailed(name, exc) from exc
            return False

    return _Timer()


def _drop_subset_clusters(clusters: list) -> list:
    """Reconstruction of a cluster fully contained in another adds no
    coverage; keep the maximal clusters only (largest first)."""
    ordered = sorted(clusters, key=lambda c: (-len(c.view_ids), c.segment))
    kept: list = []
    for c in ordered:
        cv = set(c.view_ids)
        if any(cv <= set(k.view_ids) for k in kept):
            continue
        kept.append(c)
    return kept


def run_pipeline(
    views: list,
    matches: list,
    config: PipelineConfig | None = None,
    disambiguation: bool = True,
) -> PipelineResult:
    config = config or PipelineConfig()
    res = PipelineResult()
    m = res.manifest
    m["config"] = config.to_dict()
    m["disambiguation"] = disambiguation
    m["timings"] = {}
    m["counts"] = {"n_views": len(views), "n_matches": sum(len(mt.pairs) for mt in matches)}
    counts = m["counts"]

    with _stage(m, "view_graph"):
        res.tracks = build_tracks(views, matches)
        view_graph = build_view_graph(views, matches)
        counts["n_tracks"] = len(res.tracks)

    with _stage(m, "sampling"):
        views = [assign_superpixels(v, config.cell_size) for v in views]
        view_by_id = {v.id: v for v in views}
        res.sampled = sample_tracks(views, res.tracks, view_graph, config.tau_w)
        counts["n_sampled_tracks"] = len(res.sampled)

    with _stage(m, "track_graph"):
        track_graph = build_track_graph(res.sampled, res.tracks, views)

    with _stage(m, "communities"):
        res.labeling = detect_communities(track_graph, config.seed, config.resolution)
        res.full_label = extend_labels(res.labeling, res.sampled, res.tracks, views)
        counts["n_communities"] = res.labeling.n_communities

    with _stage(m, "clusters"):
        clusters = image_clusters(
            res.full_label, res.tracks, views, res.labeling.n_communities,
            config.min_tracks_per_view,
        )
        counts["n_image_clusters"] = len(clusters)

    track_obs = {tr.id: list(tr.observations) for tr in res.tracks}

    if disambiguation:
        with _stage(m, "gsi"):
            res.gsi_reports = all_gsi_reports(track_graph, res.labeling)
            res.verdicts = flag_ambiguous(res.labeling, res.gsi_reports, config)
            ambiguous = {v.community for v in res.verdicts if v.ambiguous}
            counts["n_ambiguous_communities"] = len(ambiguous)

        with _stage(m, "correction"):
            final_clusters = []
            for cluster in clusters:
                if cluster.segment not in ambiguous:
                    final_clusters.append(cluster)
                    continue
                corr = correct_ambiguous_cluster(
                    cluster, cluster.segment, view_by_id, track_obs,
                    res.full_label, view_graph, config,
                )
                res.corrections[cluster.segment] = corr
                res.removed |= corr.removed
                for sub in corr.sub_clusters:
                    final_clusters.append(
                        ImageCluster(
                            cluster.segment, sub,
                            {v: cluster.tracks_per_view.get(v, 0) for v in sub},
                        )
                    )
            counts["n_removed_matches"] = len(res.removed)
            counts["n_sub_clusters"] = sum(
                len(c.sub_clusters) for c in res.corrections.values()
            )
            clusters = final_clusters
            if res.removed:
                track_obs = {
                    tid: [
                        (v, k)
                        for v, k in obs
                        if (v, k, res.full_label.get(tid)) not in res.removed
                    ]
                    for tid, obs in track_obs.items()
                }
    else:
        counts["n_ambiguous_communities"] = 0
        counts["n_removed_matches"] = 0
        counts["n_sub_clusters"] = 0

    with _stage(m, "cluster_merge"):
        clusters = merge_overlapping_clusters(clusters, config.min_common_images)
        clusters = _drop_subset_clusters(clusters)
        clusters = [c for c in clusters if len(c.view_ids) >= 2]
        res.clusters = clusters
        counts["n_clusters"] = len(clusters)

    with _stage(m, "reconstruction"):
        models = []
        for idx, cluster in enumerate(clusters):
            try:
                recon = reconstruct_cluster(
                    cluster.view_ids, view_by_id, track_obs, view_graph,
                    config, model_id=idx, seed_offset=idx,
                )
            except InitializationFailed as e:
                log.warning("cluster %d failed to initialize: %s", idx, e)
                continue
            if len(recon.poses) >= 2 and recon.points:
                models.append(recon)
        if not models:
            raise InitializationFailed("no cluster produced a model")
        res.models = models
        counts["n_models"] = len(models)

    with _stage(m, "alignment"):
        alignments = []
        for a in range(len(models)):
            for b in range(a + 1, len(models)):
                al = find_cross_model_correspondences(
                    models[a], models[b], view_by_id, view_graph, config
                )
                if al.support < MIN_CROSS_SUPPORT:
                    continue
                try:
                    initialize_alignment(al, models[a].poses, models[b].poses)
                    refine_alignment(al, models[a], models[b], view_by_id)
                except TcsfmError as e:
                    log.warning("alignment (%d, %d) failed: %s", a, b, e)
                    continue
                alignments.append(al)
        res.alignments = alignments
        counts["n_alignments"] = len(alignments)

    with _stage(m, "merge"):
        res.recon = merge_all(models, alignments)

    with _stage(m, "final_ba"):
        final_bundle_adjust(res.recon, view_by_id)
        counts["n_registered"] = len(res.recon.poses)
        counts["n_points"] = len(res.recon.points)
        counts["mean_reprojection_px"] = round(
            res.recon.mean_reprojection_error(view_by_id), 4
        )
    m["total_seconds"] = round(sum(m["timings"].values()), 4)
    return res
