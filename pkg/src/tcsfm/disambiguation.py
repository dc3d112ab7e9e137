"""Ambiguity detection (Gini-Simpson diversity of track neighborhoods) and
correction (dual-pose consistency during per-cluster registration)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .community import CommunityLabeling, ImageCluster
from .config import PipelineConfig
from .errors import (
    InitializationFailed,
    InsufficientAuxiliary,
    TooFewInliers,
    UnknownTrack,
)
from .geometry import CameraPose, rotation_error, translation_direction_error
from .sfm import IncrementalBuilder, sub_view_graph_edges
from .tracks import TrackGraph

log = logging.getLogger(__name__)


@dataclass
class GsiReport:
    track_id: int
    counts: dict  # foreign community id -> adjacent-track count
    gsi: float

    @property
    def n_adjacent(self) -> int:
        return sum(self.counts.values())

    @property
    def n_species(self) -> int:
        return len(self.counts)


@dataclass
class AmbiguityVerdict:
    community: int
    erroneous_ratio: float
    ambiguous: bool
    n_tracks: int = 0


@dataclass
class CorrectionResult:
    sub_clusters: list  # list of sorted view-id lists, one per consistent subset
    removed: set  # (view id, keypoint index, segment id)
    rejected_views: list  # views that never registered in any pass
    warnings: list = field(default_factory=list)


def gini_simpson_index(
    track_id: int, track_graph: TrackGraph, labeling: CommunityLabeling
) -> GsiReport:
    """Diversity of a track's foreign-community neighbors; 0 when all
    neighbors share the track's community (or there are none)."""
    if track_id not in labeling.label or track_id not in set(track_graph.nodes):
        raise UnknownTrack(f"track {track_id} is not a sampled node")
    own = labeling.label[track_id]
    counts: dict = {}
    for (a, b), _ in track_graph.edges.items():
        other = b if a == track_id else a if b == track_id else None
        if other is None:
            continue
        c = labeling.label[other]
        if c != own:
            counts[c] = counts.get(c, 0) + 1
    n_adj = sum(counts.values())
    if n_adj == 0:
        return GsiReport(track_id, {}, 0.0)
    gsi = 1.0 - sum((n / n_adj) ** 2 for n in counts.values())
    return GsiReport(track_id, counts, gsi)


def all_gsi_reports(track_graph: TrackGraph, labeling: CommunityLabeling) -> dict:
    adj = track_graph.adjacency()
    reports = {}
    for tid in track_graph.nodes:
        own = labeling.label[tid]
        counts: dict = {}
        for nb in adj[tid]:
            c = labeling.label[nb]
            if c != own:
                counts[c] = counts.get(c, 0) + 1
        n_adj = sum(counts.values())
        gsi = 0.0 if n_adj == 0 else 1.0 - sum((n / n_adj) ** 2 for n in counts.values())
        reports[tid] = GsiReport(tid, counts, gsi)
    return reports


def flag_ambiguous(
    labeling: CommunityLabeling, reports: dict, config: PipelineConfig
) -> list[AmbiguityVerdict]:
    """A community is ambiguous when more than xi of its tracks have
    gsi > tau_gs."""
    verdicts = []
    for c, members in labeling.members().items():
        scored = [reports[t] for t in members if t in reports]
        if not scored:
            verdicts.append(AmbiguityVerdict(c, 0.0, False, 0))
            continue
        bad = sum(1 for r in scored if r.gsi > config.tau_gs)
        ratio = bad / len(scored)
        verdicts.append(AmbiguityVerdict(c, ratio, ratio > config.xi, len(scored)))
    return verdicts


def check_pose_consistency(
    omega1: CameraPose, omega2: CameraPose, config: PipelineConfig
) -> bool:
    """True iff both the rotation and the translation-direction differences
    are within the configured bounds."""
    if rotation_error(omega1.R, omega2.R) > config.eps_r:
        return False
    return translation_direction_error(omega1.t, omega2.t) <= config.eps_t


def correct_ambiguous_cluster(
    cluster: ImageCluster,
    segment: int,
    views: dict,
    track_obs: dict,
    track_label: dict,
    view_graph,
    config: PipelineConfig,
) -> CorrectionResult:
    """Split an ambiguous image cluster into pose-consistent subsets.

    Registration grows from the strongest view-graph edge. Each candidate's
    pose is estimated twice: from primary points (this segment) and from
    auxiliary points (distinct segments). Inconsistent candidates are
    rejected and their matches to this segment are removed from all
    downstream stages.
    """
    removed: set = set()
    warnings: list = []
    sub_clusters: list = []
    remaining = list(cluster.view_ids)
    any_inconsistent = False

    while len(remaining) >= 2:
        result = _correction_pass(
            remaining, segment, views, track_obs, track_label, view_graph, config,
            removed, warnings,
        )
        if result is None:
            break
        registered, newly_removed, saw_inconsistent = result
        any_inconsistent = any_inconsistent or saw_inconsistent
        removed |= newly_removed
        if registered:
            sub_clusters.append(sorted(registered))
            remaining = [v for v in remaining if v not in registered]
        else:
            break
    return CorrectionResult(
        sub_clusters=sub_clusters,
        removed=removed,
        rejected_views=sorted(remaining),
        warnings=warnings,
    )


def _segment_observations(v: int, track_obs: dict, track_label: dict, segment: int):
    for tid, obs in track_obs.items():
        if track_label.get(tid) != segment:
            continue
        for vv, k in obs:
            if vv == v:
                yield v, k, tid


def _correction_pass(
    pass_views: list,
    segment: int,
    views: dict,
    track_obs: dict,
    track_label: dict,
    view_graph,
    config: PipelineConfig,
    removed: set,
    warnings: list,
):
    """One consistent-subset extraction. Returns (registered views, removed
    triples, saw_inconsistent) or None when initialization is impossible."""
    pass_set = set(pass_views)
    local_obs = {}
    for tid, obs in track_obs.items():
        kept = [
            (v, k)
            for v, k in obs
            if v in pass_set and (v, k, track_label.get(tid)) not in removed
        ]
        if len(kept) >= 2:
            local_obs[tid] = kept

    rng = np.random.default_rng(config.seed + 7919 * (segment + 1) + len(pass_views))
    builder = IncrementalBuilder(views, local_obs, config, rng, model_id=segment)
    try:
        builder.initialize(sub_view_graph_edges(view_graph, pass_views))
    except InitializationFailed:
        return None
    builder.triangulate_new()
    builder.global_ba()

    def is_primary(pid):
        return track_label.get(builder.recon.point_track[pid]) == segment

    def is_auxiliary(pid):
        lab = track_label.get(builder.recon.point_track[pid])
        return lab is not None and lab != segment

    newly_removed: set = set()
    saw_inconsistent = False
    rejected: set = set()
    unverifiable: set = set()
    stalled: set = set()

    while True:
        candidates = [
            v for v in pass_views
            if v not in builder.recon.poses and v not in rejected and v not in stalled
        ]
        if not candidates:
            if stalled and builder.triangulate_new() > 0:
                stalled.clear()
                continue
            break
        scored = [(len(builder.matches_2d3d(v, is_primary)), v) for v in candidates]
        scored.sort(key=lambda x: (-x[0], x[1]))
        n_primary, v = scored[0]
        m1 = builder.matches_2d3d(v, is_primary)
        m2 = builder.matches_2d3d(v, is_auxiliary)

        if n_primary < config.min_pnp_matches:
            # nothing of this segment left to verify against; plain registration
            m_all = builder.matches_2d3d(v)
            if len(m_all) < config.min_pnp_matches:
                stalled.add(v)
                continue
            try:
                pose, inl = builder.pnp_register(v, m_all)
            except TooFewInliers:
                stalled.add(v)
                continue
            builder.commit_registration(v, pose, inl)
        else:
            try:
                omega1, inl1 = builder.pnp_register(v, m1)
            except TooFewInliers:
                stalled.add(v)
                continue
            if len(m2) < config.min_pnp_matches:
                unverifiable.add(v)
                stalled.add(v)
                continue
            try:
                omega2, inl2 = builder.pnp_register(v, m2)
            except TooFewInliers:
                unverifiable.add(v)
                stalled.add(v)
                continue
            unverifiable.discard(v)
            if not check_pose_consistency(omega1, omega2, config):
                saw_inconsistent = True
                rejected.add(v)
                for vv, k, tid in _segment_observations(v, track_obs, track_label, segment):
                    newly_removed.add((vv, k, segment))
                log.info(
                    "view %s rejected in segment %d: poses inconsistent "
                    "(dr=%.3f rad, dt=%.3f rad)",
                    v, segment,
                    rotation_error(omega1.R, omega2.R),
                    translation_direction_error(omega1.t, omega2.t),
                )
                continue
            try:
                pose, inl = builder.pnp_register(v, m1 + m2)
            except TooFewInliers:
                pose, inl = omega2, inl1 + inl2
            builder.commit_registration(v, pose, inl)

        builder.triangulate_new()
        builder.complete_observations()
        builder.local_ba(v)
        builder.maybe_global_ba()
        stalled.clear()

    # views that could never be verified: accept on primary evidence only when
    # this cluster showed no inconsistency at all, else leave them for the
    # next pass so they can anchor their own subset
    if unverifiable and not saw_inconsistent:
        for v in sorted(unverifiable):
            if v in builder.recon.poses:
                continue
            m1 = builder.matches_2d3d(v, is_primary)
            try:
                pose, inl = builder.pnp_register(v, m1)
            except TooFewInliers:
                continue
            builder.commit_registration(v, pose, inl)
            warnings.append(f"view {v} accepted on primary matches alone in segment {segment}")

    return sorted(builder.recon.poses), newly_removed, saw_inconsistent
