"""SIM(3) alignment: linear initialization, bidirectional refinement, and
spanning-tree merging, against an exactly constructed two-model fixture."""

import math

import numpy as np
import pytest

from conftest import two_model_fixture
from tcsfm.errors import DisconnectedModels, NoCrossPairs
from tcsfm.geometry import (
    SimilarityTransform,
    apply_sim3,
    rotation_error,
    rotvec_to_matrix,
)
from tcsfm.merge import (
    PairwiseAlignment,
    _BidirectionalProblem,
    _kruskal_mst,
    bidirectional_cost,
    estimate_relative_rotation,
    estimate_scale,
    find_cross_model_correspondences,
    initialize_alignment,
    merge_all,
    refine_alignment,
)
from tcsfm.tracks import Match, build_view_graph


def test_linear_initialization_exact():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=0.0)
    initialize_alignment(al, ra.poses, rb.poses)
    est = al.transform
    assert rotation_error(est.R, T.R) < 1e-6
    assert abs(est.s - T.s) / T.s < 1e-9
    assert np.linalg.norm(est.t - T.t) < 1e-9
    # all solved lambdas are positive
    assert all(cp.lam is None or cp.lam > 0 for cp in al.cross_pairs)


def test_linear_initialization_transports_points():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=0.0)
    initialize_alignment(al, ra.poses, rb.poses)
    moved = apply_sim3(al.transform, pts)
    expected = apply_sim3(T, pts)
    assert np.abs(moved - expected).max() < 1e-8


def test_linear_initialization_with_pixel_noise():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=1.0, seed=3)
    matches = []
    ids = sorted(cams_w)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            matches.append(Match(ids[a], ids[b], tuple((k, k) for k in range(len(pts)))))
    vg = build_view_graph([views[v] for v in ids], matches)
    al_est = find_cross_model_correspondences(ra, rb, views, vg)
    assert al_est.support >= 50
    initialize_alignment(al_est, ra.poses, rb.poses)
    est = al_est.transform

    centers = np.stack([p.c for p in cams_w.values()])
    cloud = np.concatenate([pts, centers])
    diam = float(np.max(np.linalg.norm(cloud[:, None] - cloud[None, :], axis=2)))
    assert math.degrees(rotation_error(est.R, T.R)) < 2.0
    assert abs(est.s - T.s) / T.s < 0.02
    assert np.linalg.norm(est.t - T.t) / (T.s * diam) < 0.02


def test_rotation_estimate_requires_cross_pairs():
    al = PairwiseAlignment(0, 1, [], [])
    with pytest.raises(NoCrossPairs):
        estimate_relative_rotation(al, {}, {})
    with pytest.raises(NoCrossPairs):
        estimate_scale(al, {}, {})


def test_bidirectional_cost_zero_at_ground_truth():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=0.0)
    initialize_alignment(al, ra.poses, rb.poses)
    E = bidirectional_cost(al, ra, rb, views)
    assert E < 1e-12
    assert al.dropped_residuals == 0


def test_bidirectional_cost_increases_under_any_single_parameter():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=0.0)
    initialize_alignment(al, ra.poses, rb.poses)
    prob = _BidirectionalProblem(al, ra, rb, views)
    x0 = prob.x0()
    r0, _, _ = prob.residuals_and_jac(x0, want_jac=False)
    E0 = float(r0 @ r0)
    for k in range(prob.n_params):
        for sign in (1.0, -1.0):
            x = x0.copy()
            x[k] += sign * 1e-3
            r, _, _ = prob.residuals_and_jac(x, want_jac=False)
            assert float(r @ r) > E0 + 1e-6, f"parameter {k} not constrained"


def test_bidirectional_jacobian_matches_finite_differences():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=0.0)
    initialize_alignment(al, ra.poses, rb.poses)
    prob = _BidirectionalProblem(al, ra, rb, views)
    x = prob.x0() + 1e-2 * np.random.default_rng(1).normal(size=prob.n_params)
    r, J, _ = prob.residuals_and_jac(x)
    h = 1e-6
    Jfd = np.empty_like(J)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        rp, _, _ = prob.residuals_and_jac(xp, want_jac=False)
        rm, _, _ = prob.residuals_and_jac(xm, want_jac=False)
        Jfd[:, k] = (rp - rm) / (2 * h)
    scale = max(np.abs(J).max(), 1.0)
    assert np.abs(J - Jfd).max() / scale < 1e-5


def test_refinement_recovers_from_perturbed_start():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=0.0)
    initialize_alignment(al, ra.poses, rb.poses)
    Rp = T.R @ rotvec_to_matrix(np.array([0.0, math.radians(2.0), 0.0]))
    tp = T.t + 0.05 * np.linalg.norm(T.t) * np.array([1.0, -1.0, 0.5]) / 1.5
    al.transform = SimilarityTransform(Rp, tp, T.s * 1.05)
    refine_alignment(al, ra, rb, views)
    est = al.transform
    assert rotation_error(est.R, T.R) < 1e-6
    assert abs(est.s - T.s) / T.s < 1e-6
    assert np.linalg.norm(est.t - T.t) / max(np.linalg.norm(T.t), 1.0) < 1e-6
    assert al.cost < 1e-10


def test_kruskal_mst():
    edges = [
        (1.0, 0, 1, "a"),
        (5.0, 1, 2, "b"),
        (2.0, 0, 2, "c"),
        (0.5, 2, 3, "d"),
    ]
    mst, comps = _kruskal_mst([0, 1, 2, 3], edges)
    assert {p for _, _, _, p in mst} == {"a", "c", "d"}
    assert comps == [[0, 1, 2, 3]]
    mst, comps = _kruskal_mst([0, 1, 2], [(1.0, 0, 1, "a")])
    assert sorted(map(sorted, comps)) == [[0, 1], [2]]


def test_merge_all_places_models_in_one_frame():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=0.0)
    initialize_alignment(al, ra.poses, rb.poses)
    refine_alignment(al, ra, rb, views)
    merged = merge_all([ra, rb], [al])
    # every world camera present once, and consistent with the GT world poses
    # up to the surviving model's gauge
    assert sorted(merged.poses) == sorted(cams_w)
    from tcsfm.synth import umeyama

    est = np.stack([merged.poses[v].c for v in sorted(cams_w)])
    true = np.stack([cams_w[v].c for v in sorted(cams_w)])
    R, t, s = umeyama(est, true)
    aligned = (s * (R @ est.T)).T + t
    assert np.abs(aligned - true).max() < 1e-6
    assert len(merged.points) == len(pts)


def test_merge_all_disconnected_raises():
    al, ra, rb, views, cams_w, T, pts = two_model_fixture(sigma=0.0)
    with pytest.raises(DisconnectedModels):
        merge_all([ra, rb], [])
