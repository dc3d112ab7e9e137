"""Shared fixtures: camera rigs and a two-model similarity fixture."""

import math

import numpy as np
import pytest

from tcsfm.geometry import (
    CameraPose,
    CrossPair,
    Intrinsics,
    SimilarityTransform,
    View,
    apply_sim3,
    rotvec_to_matrix,
)
from tcsfm.merge import CrossCorrespondence, PairwiseAlignment
from tcsfm.sfm import Reconstruction
from tcsfm.synth import SceneSpec


def look_at(c, target):
    """World-to-camera pose of a camera at c looking toward target, z up."""
    z = target - c
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose.from_center(np.stack([x, y, z]), c)


def clean_spec(**overrides):
    """A small duplicate-free scene that the full pipeline handles quickly."""
    kw = dict(
        n_cameras=16, n_central=50, n_ring=200, n_apron=50, n_infill=8,
        n_flank=30, n_duplicate=80, sigma=0.5, rho=0.0, seed=5,
    )
    kw.update(overrides)
    return SceneSpec(**kw)


def two_model_fixture(sigma=0.0, seed=0):
    """Two reconstructions of one rigid scene related by a known similarity.

    Model a lives in the world frame; model b is the same structure carried
    through T = (s=2, Rz(30 deg), t). Cross pairs hold the exact two-view
    geometry; with sigma > 0 the views carry noisy pixel observations so the
    estimation path can be exercised end to end.

    Returns (alignment, recon_a, recon_b, views, world_poses, T, points).
    """
    rng = np.random.default_rng(seed)
    n_pts = 80
    pts = rng.uniform(-3.0, 3.0, size=(n_pts, 3))

    cams_w = {}
    n_cams = 8
    for i in range(n_cams):
        th = math.pi / 3 + i * (math.pi / 3) / (n_cams - 1)
        c = np.array([8 * math.cos(th), 8 * math.sin(th), 0.5 * rng.uniform(-1, 1)])
        cams_w[i] = look_at(c, np.zeros(3))

    s = 2.0
    R_T = rotvec_to_matrix(np.array([0.0, 0.0, math.radians(30.0)]))
    t_T = np.array([0.4, -0.3, 0.25])
    T = SimilarityTransform(R_T, t_T, s)

    cams_a = {i: cams_w[i] for i in range(0, 5)}
    cams_b = {}
    for j in range(3, n_cams):
        Rj, tj = cams_w[j].R, cams_w[j].t
        Rb = Rj @ R_T.T
        cams_b[j] = CameraPose(Rb, s * tj - Rb @ t_T)

    K = Intrinsics(800.0, 800.0, 640.0, 480.0)
    recon_a = Reconstruction(model_id=0)
    recon_b = Reconstruction(model_id=1)
    for tid in range(n_pts):
        pid = recon_a.add_point(pts[tid], tid)
        recon_a.obs[pid] = [(i, tid) for i in cams_a]
        pid = recon_b.add_point(apply_sim3(T, pts[tid]), tid)
        recon_b.obs[pid] = [(j, tid) for j in cams_b]
    recon_a.poses = dict(cams_a)
    recon_b.poses = dict(cams_b)

    views = {}
    for v, pose in cams_w.items():
        pc = pose.transform(pts)
        px = np.stack(
            [K.fx * pc[:, 0] / pc[:, 2] + K.cx, K.fy * pc[:, 1] / pc[:, 2] + K.cy],
            axis=1,
        )
        views[v] = View(v, K, px + sigma * rng.normal(size=px.shape))

    cross_pairs = []
    for i in cams_a:
        for j in cams_b:
            if i == j:
                continue
            Ri, ti = cams_w[i].R, cams_w[i].t
            Rj, tj = cams_w[j].R, cams_w[j].t
            R_ij = Rj @ Ri.T
            cross_pairs.append(
                CrossPair(cam_a=i, cam_b=j, R_ij=R_ij, t_ij=tj - R_ij @ ti)
            )

    correspondences = [
        CrossCorrespondence(
            track_id=tid,
            p_a=pts[tid].copy(),
            p_b=apply_sim3(T, pts[tid]),
            pairs=list(range(len(cross_pairs))),
        )
        for tid in range(n_pts)
    ]
    alignment = PairwiseAlignment(0, 1, cross_pairs, correspondences)
    return alignment, recon_a, recon_b, views, cams_w, T, pts


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def clean_scene_runs():
    """Full pipeline on the small duplicate-free scene, with and without the
    disambiguation stages; shared across tests because each run is costly."""
    from tcsfm.config import PipelineConfig
    from tcsfm.pipeline import run_pipeline
    from tcsfm.synth import evaluate_against_gt, generate_scene

    spec = clean_spec()
    views, matches, gt = generate_scene(spec)
    runs = {}
    for disambiguation in (True, False):
        res = run_pipeline(views, matches, PipelineConfig(), disambiguation=disambiguation)
        runs[disambiguation] = (res, evaluate_against_gt(res.recon, gt))
    return spec, gt, runs
