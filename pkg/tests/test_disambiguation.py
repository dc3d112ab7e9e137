"""Neighborhood-diversity scoring and flagging of ambiguous communities."""

import math

import numpy as np
import pytest

from tcsfm.community import CommunityLabeling
from tcsfm.config import PipelineConfig
from tcsfm.disambiguation import (
    all_gsi_reports,
    check_pose_consistency,
    flag_ambiguous,
    gini_simpson_index,
)
from tcsfm.errors import UnknownTrack
from tcsfm.geometry import CameraPose, rotvec_to_matrix
from tcsfm.tracks import TrackGraph


def star_graph(center, leaves):
    nodes = [center] + list(leaves)
    edges = {(min(center, l), max(center, l)): 1 for l in leaves}
    return TrackGraph(nodes=nodes, edges=edges)


def test_gsi_zero_when_all_neighbors_share_community():
    g = star_graph(0, [1, 2, 3])
    lab = CommunityLabeling({0: 0, 1: 0, 2: 0, 3: 0}, 1)
    r = gini_simpson_index(0, g, lab)
    assert r.gsi == 0.0 and r.n_adjacent == 0 and r.n_species == 0


def test_gsi_formula_over_foreign_neighbors():
    # neighbors: 2 in community 1, 1 in community 2, 1 in own community
    g = star_graph(0, [1, 2, 3, 4])
    lab = CommunityLabeling({0: 0, 1: 1, 2: 1, 3: 2, 4: 0}, 3)
    r = gini_simpson_index(0, g, lab)
    assert r.counts == {1: 2, 2: 1}
    assert r.n_adjacent == 3 and r.n_species == 2
    assert r.gsi == pytest.approx(1.0 - (2 / 3) ** 2 - (1 / 3) ** 2)


def test_gsi_uniform_spread_approaches_one():
    leaves = list(range(1, 7))
    g = star_graph(0, leaves)
    lab = CommunityLabeling({0: 0, **{l: l for l in leaves}}, 7)
    r = gini_simpson_index(0, g, lab)
    assert r.gsi == pytest.approx(1.0 - 6 * (1 / 6) ** 2)


def test_gsi_unknown_track_raises():
    g = star_graph(0, [1])
    lab = CommunityLabeling({0: 0, 1: 0}, 1)
    with pytest.raises(UnknownTrack):
        gini_simpson_index(99, g, lab)


def test_all_gsi_reports_matches_single_track_scores():
    rng = np.random.default_rng(4)
    nodes = list(range(12))
    edges = {}
    for _ in range(30):
        a, b = sorted(rng.choice(12, size=2, replace=False).tolist())
        edges[(a, b)] = 1
    g = TrackGraph(nodes=nodes, edges=edges)
    lab = CommunityLabeling({n: n % 3 for n in nodes}, 3)
    reports = all_gsi_reports(g, lab)
    for n in nodes:
        single = gini_simpson_index(n, g, lab)
        assert reports[n].gsi == pytest.approx(single.gsi)
        assert reports[n].counts == single.counts


def test_flag_ambiguous_ratio_strictly_above_xi():
    from tcsfm.disambiguation import GsiReport

    lab = CommunityLabeling({i: 0 for i in range(10)}, 1)

    def reports_with(n_bad):
        return {
            i: GsiReport(i, {1: 1} if i < n_bad else {}, 0.9 if i < n_bad else 0.0)
            for i in range(10)
        }

    config = PipelineConfig(xi=0.2, tau_gs=0.5)
    (v,) = flag_ambiguous(lab, reports_with(2), config)
    assert v.erroneous_ratio == pytest.approx(0.2) and not v.ambiguous  # not strict
    (v,) = flag_ambiguous(lab, reports_with(3), config)
    assert v.erroneous_ratio == pytest.approx(0.3) and v.ambiguous
    assert v.n_tracks == 10


def test_flag_ambiguous_empty_community():
    lab = CommunityLabeling({0: 0}, 1)
    (v,) = flag_ambiguous(lab, {}, PipelineConfig())
    assert v.erroneous_ratio == 0.0 and not v.ambiguous and v.n_tracks == 0


def test_check_pose_consistency_bounds():
    config = PipelineConfig(eps_r=0.15, eps_t=0.35)
    base = CameraPose(np.eye(3), np.array([0.0, 0.0, 1.0]))
    same = CameraPose(np.eye(3), np.array([0.0, 0.0, 2.0]))  # same direction
    assert check_pose_consistency(base, same, config)

    rot_bad = CameraPose(
        rotvec_to_matrix(np.array([0.2, 0.0, 0.0])), np.array([0.0, 0.0, 1.0])
    )
    assert not check_pose_consistency(base, rot_bad, config)

    ang = 0.4  # direction off by more than eps_t
    t_bad = CameraPose(np.eye(3), np.array([math.sin(ang), 0.0, math.cos(ang)]))
    assert not check_pose_consistency(base, t_bad, config)

    rot_ok = CameraPose(
        rotvec_to_matrix(np.array([0.1, 0.0, 0.0])), np.array([0.0, 0.0, 1.0])
    )
    assert check_pose_consistency(base, rot_ok, config)
