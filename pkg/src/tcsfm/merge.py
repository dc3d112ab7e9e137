"""Alignment and merging of partial reconstructions.

The relative SIM(3) between two models is initialized from cross-model
camera pairs via three linear systems (rotation, scale, translation), then
refined by a bidirectional consistency cost: a shared 3D point is carried
into the other model both by the model-level similarity and by the
camera-pair relative geometry, and the two projections must agree in both
directions. Models are finally chained over a minimum-cost spanning tree and
polished with a global bundle adjustment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .config import PipelineConfig
from .errors import (
    DegenerateGeometry,
    DisconnectedModels,
    NoCrossPairs,
    SingularSystem,
)
from .geometry import (
    CameraPose,
    CrossPair,
    SimilarityTransform,
    apply_sim3,
    compose_sim3,
    invert_sim3,
    matrix_to_rotvec,
    project_to_so3,
    rotvec_to_matrix,
    skew,
    so3_right_jacobian,
)
from .sfm import BaOptions, Reconstruction, bundle_adjust, initialize_two_view

log = logging.getLogger(__name__)

MIN_CROSS_SUPPORT = 5


@dataclass
class CrossCorrespondence:
    track_id: int
    p_a: np.ndarray  # coordinates in model a
    p_b: np.ndarray  # coordinates in model b
    pairs: list      # indices into the alignment's cross-pair list


@dataclass
class PairwiseAlignment:
    model_a: int
    model_b: int
    cross_pairs: list            # CrossPair
    correspondences: list        # CrossCorrespondence
    transform: SimilarityTransform | None = None
    cost: float | None = None
    dropped_residuals: int = 0

    @property
    def support(self) -> int:
        return len(self.correspondences)


def find_cross_model_correspondences(
    recon_a: Reconstruction,
    recon_b: Reconstruction,
    views: dict,
    view_graph,
    config: PipelineConfig | None = None,
) -> PairwiseAlignment:
    """Tracks triangulated in both models, with one CrossPair per observing
    camera pair that has a verified view-graph edge. Relative geometry is
    recomputed from the shared tracks of the camera pair."""
    config = config or PipelineConfig()
    shared_tracks = sorted(set(recon_a.track_point) & set(recon_b.track_point))
    pair_keys: dict = {}
    cross_pairs: list = []
    correspondences: list = []

    # camera pair -> shared track ids, for relative-geometry estimation
    pair_tracks: dict = {}
    per_track_pairs: dict = {}
    for tid in shared_tracks:
        pid_a = recon_a.track_point[tid]
        pid_b = recon_b.track_point[tid]
        cams_a = {v: k for v, k in recon_a.obs[pid_a]}
        cams_b = {v: k for v, k in recon_b.obs[pid_b]}
        plist = []
        for i in cams_a:
            for j in cams_b:
                if i == j or view_graph.weight(i, j) <= 0.0:
                    continue
                pair_tracks.setdefault((i, j), set()).add(tid)
                plist.append((i, j))
        per_track_pairs[tid] = plist

    geometry: dict = {}
    rng = np.random.default_rng(config.seed + 17)
    for (i, j), tids in sorted(pair_tracks.items()):
        # correspondences between the two cameras over all tracks both observe
        kps_i, kps_j = [], []
        for tid in sorted(set(recon_a.track_point) & set(recon_b.track_point)):
            pid_a = recon_a.track_point[tid]
            pid_b = recon_b.track_point[tid]
            ki = next((k for v, k in recon_a.obs[pid_a] if v == i), None)
            kj = next((k for v, k in recon_b.obs[pid_b] if v == j), None)
            if ki is not None and kj is not None:
                kps_i.append(views[i].keypoints[ki])
                kps_j.append(views[j].keypoints[kj])
        if len(kps_i) < 8:
            continue
        try:
            _, pose_b, _, _ = initialize_two_view(
                np.asarray(kps_i), np.asarray(kps_j),
                views[i].intrinsics, views[j].intrinsics, config, rng,
            )
        except DegenerateGeometry:
            continue
        geometry[(i, j)] = (pose_b.R, pose_b.t)

    for (i, j), (R_ij, t_ij) in sorted(geometry.items()):
        pair_keys[(i, j)] = len(cross_pairs)
        cross_pairs.append(
            CrossPair(cam_a=i, cam_b=j, R_ij=R_ij, t_ij=t_ij, weight=view_graph.weight(i, j))
        )

    for tid in shared_tracks:
        idxs = sorted({pair_keys[p] for p in per_track_pairs[tid] if p in pair_keys})
        if not idxs:
            continue
        correspondences.append(
            CrossCorrespondence(
                track_id=tid,
                p_a=recon_a.points[recon_a.track_point[tid]].copy(),
                p_b=recon_b.points[recon_b.track_point[tid]].copy(),
                pairs=idxs,
            )
        )
    return PairwiseAlignment(
        model_a=recon_a.model_id,
        model_b=recon_b.model_id,
        cross_pairs=cross_pairs,
        correspondences=correspondences,
    )


# ---------------------------------------------------------------------------
# linear initialization (Eqs. 2-4)


def estimate_relative_rotation(alignment: PairwiseAlignment, poses_a: dict, poses_b: dict) -> np.ndarray:
    """Weighted chordal average of per-pair candidates (R_j^b)^T R_ij R_i^a."""
    if not alignment.cross_pairs:
        raise NoCrossPairs("no cross-model camera pairs")
    M = np.zeros((3, 3))
    for cp in alignment.cross_pairs:
        Ri = poses_a[cp.cam_a].R
        Rj = poses_b[cp.cam_b].R
        M += cp.weight * (Rj.T @ cp.R_ij @ Ri)
    return project_to_so3(M)


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values)
    v, w = values[order], weights[order]
    cum = np.cumsum(w)
    return float(v[np.searchsorted(cum, 0.5 * cum[-1])])


def estimate_scale(alignment: PairwiseAlignment, poses_a: dict, poses_b: dict) -> float:
    """Per cross pair, solve the stacked 3-row systems in (s, lambda); the
    global scale is the weighted median of per-pair estimates and the lambdas
    are re-solved with it fixed."""
    if not alignment.correspondences:
        raise NoCrossPairs("no cross-model correspondences")
    per_pair_rows: dict = {idx: ([], []) for idx in range(len(alignment.cross_pairs))}
    for corr in alignment.correspondences:
        for idx in corr.pairs:
            cp = alignment.cross_pairs[idx]
            pa, pb = poses_a[cp.cam_a], poses_b[cp.cam_b]
            u = cp.R_ij @ (pa.R @ corr.p_a + pa.t)
            rhs = pb.R @ corr.p_b + pb.t
            per_pair_rows[idx][0].append(u)
            per_pair_rows[idx][1].append(rhs)

    s_vals, s_weights = [], []
    for idx, (us, rhss) in per_pair_rows.items():
        if not us:
            continue
        cp = alignment.cross_pairs[idx]
        n = len(us)
        A = np.zeros((3 * n, 2))
        b = np.zeros(3 * n)
        for m, (u, rhs) in enumerate(zip(us, rhss)):
            A[3 * m : 3 * m + 3, 0] = u
            A[3 * m : 3 * m + 3, 1] = cp.t_ij
            b[3 * m : 3 * m + 3] = rhs
        if np.linalg.matrix_rank(A, tol=1e-10) < 2:
            raise SingularSystem(f"rank-deficient scale system for pair {(cp.cam_a, cp.cam_b)}")
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        if sol[0] > 0:
            s_vals.append(sol[0])
            s_weights.append(cp.weight)
    if not s_vals:
        raise SingularSystem("no cross pair produced a positive scale estimate")
    s_ab = _weighted_median(np.asarray(s_vals), np.asarray(s_weights))

    for idx, (us, rhss) in per_pair_rows.items():
        if not us:
            continue
        cp = alignment.cross_pairs[idx]
        resid = [cp.t_ij @ (rhs - s_ab * u) for u, rhs in zip(us, rhss)]
        lam = float(np.mean(resid))
        cp.lam = max(lam, 1e-9)
    return s_ab


def estimate_relative_translation(
    alignment: PairwiseAlignment, poses_a: dict, poses_b: dict, R_ab: np.ndarray, s_ab: float
) -> np.ndarray:
    """Weighted least squares of t_ab = c_j^b - s R_ab c_i^a + lambda (R_j^b)^T t_ij."""
    num = np.zeros(3)
    den = 0.0
    for cp in alignment.cross_pairs:
        if cp.lam is None:
            continue
        pa, pb = poses_a[cp.cam_a], poses_b[cp.cam_b]
        t_ab = pb.c - s_ab * (R_ab @ pa.c) + cp.lam * (pb.R.T @ cp.t_ij)
        num += cp.weight * t_ab
        den += cp.weight
    if den <= 0:
        raise NoCrossPairs("no cross pair with a solved lambda")
    return num / den


def initialize_alignment(alignment: PairwiseAlignment, poses_a: dict, poses_b: dict) -> PairwiseAlignment:
    R_ab = estimate_relative_rotation(alignment, poses_a, poses_b)
    s_ab = estimate_scale(alignment, poses_a, poses_b)
    t_ab = estimate_relative_translation(alignment, poses_a, poses_b, R_ab, s_ab)
    alignment.transform = SimilarityTransform(R_ab, t_ab, s_ab)
    return alignment


# ---------------------------------------------------------------------------
# bidirectional consistency (Eqs. 5-8)


_right_jacobian = so3_right_jacobian


class _BidirectionalProblem:
    """Residuals and analytic Jacobian for one pairwise alignment.

    Parameters: [theta (3, local rotation update), t_ab (3), log s,
    log lambda per cross pair]. Residual blocks are sqrt(w) * (projection of
    the similarity-transported point minus projection of the relative-pose
    transported point), in both directions.
    """

    def __init__(self, alignment, recon_a, recon_b, views):
        self.al = alignment
        self.views = views
        self.R0 = alignment.transform.R
        self.terms = []  # (corr, pair idx)
        for corr in alignment.correspondences:
            for idx in corr.pairs:
                if alignment.cross_pairs[idx].lam is not None:
                    self.terms.append((corr, idx))
        self.poses_a = recon_a.poses
        self.poses_b = recon_b.poses
        self.pair_param = {
            idx: 7 + n
            for n, idx in enumerate(
                sorted({idx for _, idx in self.terms})
            )
        }
        self.n_params = 7 + len(self.pair_param)

    def x0(self) -> np.ndarray:
        x = np.zeros(self.n_params)
        x[3:6] = self.al.transform.t
        x[6] = math.log(self.al.transform.s)
        for idx, slot in self.pair_param.items():
            x[slot] = math.log(self.al.cross_pairs[idx].lam)
        return x

    def unpack(self, x):
        R_ab = self.R0 @ rotvec_to_matrix(x[:3])
        t_ab = x[3:6]
        s = math.exp(x[6])
        lam = {idx: math.exp(x[slot]) for idx, slot in self.pair_param.items()}
        return R_ab, t_ab, s, lam

    @staticmethod
    def _proj(K, X):
        z = X[2]
        return np.array([K.fx * X[0] / z + K.cx, K.fy * X[1] / z + K.cy]), z

    @staticmethod
    def _proj_jac(K, X):
        x, y, z = X
        return np.array(
            [[K.fx / z, 0.0, -K.fx * x / z**2], [0.0, K.fy / z, -K.fy * y / z**2]]
        )

    def residuals_and_jac(self, x, want_jac=True):
        R_ab, t_ab, s, lam = self.unpack(x)
        theta = x[:3]
        Jr = _right_jacobian(theta)
        Jr_neg = _right_jacobian(-theta)
        exp_t = rotvec_to_matrix(theta)
        exp_nt = rotvec_to_matrix(-theta)

        res = []
        rows = []
        dropped = 0
        for corr, idx in self.terms:
            cp = self.al.cross_pairs[idx]
            w = math.sqrt(cp.weight)
            pa = self.poses_a[cp.cam_a]
            pb = self.poses_b[cp.cam_b]
            Ki = self.views[cp.cam_a].intrinsics
            Kj = self.views[cp.cam_b].intrinsics
            l = lam[idx]
            slot = self.pair_param[idx]

            # forward: carry p_a into camera j of model b
            p_fwd = pb.R @ (s * (R_ab @ corr.p_a) + t_ab) + pb.t
            y_i = pa.R @ corr.p_a + pa.t
            q_fwd = s * (cp.R_ij @ y_i) + l * cp.t_ij
            if p_fwd[2] > 1e-9 and q_fwd[2] > 1e-9:
                pi_p, _ = self._proj(Kj, p_fwd)
                pi_q, _ = self._proj(Kj, q_fwd)
                res.append(w * (pi_p - pi_q))
                if want_jac:
                    row = np.zeros((2, self.n_params))
                    Jp = self._proj_jac(Kj, p_fwd)
                    Jq = self._proj_jac(Kj, q_fwd)
                    dtheta = -s * (pb.R @ self.R0 @ exp_t @ skew(corr.p_a) @ Jr)
                    row[:, 0:3] = Jp @ dtheta
                    row[:, 3:6] = Jp @ pb.R
                    row[:, 6] = Jp @ (pb.R @ (s * (R_ab @ corr.p_a))) - Jq @ (
                        s * (cp.R_ij @ y_i)
                    )
                    row[:, slot] = -(Jq @ (l * cp.t_ij))
                    rows.append(w * row)
            else:
                dropped += 1

            # reverse: carry p_b into camera i of model a
            v = self.R0.T @ (corr.p_b - t_ab)
            p_rev = (1.0 / s) * (pa.R @ (exp_nt @ v)) + pa.t
            z_j = pb.R @ corr.p_b + pb.t
            q_rev = (1.0 / s) * (cp.R_ij.T @ z_j) - (l / s) * (cp.R_ij.T @ cp.t_ij)
            if p_rev[2] > 1e-9 and q_rev[2] > 1e-9:
                pi_p, _ = self._proj(Ki, p_rev)
                pi_q, _ = self._proj(Ki, q_rev)
                res.append(w * (pi_p - pi_q))
                if want_jac:
                    row = np.zeros((2, self.n_params))
                    Jp = self._proj_jac(Ki, p_rev)
                    Jq = self._proj_jac(Ki, q_rev)
                    dtheta = (1.0 / s) * (pa.R @ (exp_nt @ skew(v) @ Jr_neg))
                    row[:, 0:3] = Jp @ dtheta
                    row[:, 3:6] = Jp @ (-(1.0 / s) * (pa.R @ exp_nt @ self.R0.T))
                    row[:, 6] = Jp @ (-(p_rev - pa.t)) - Jq @ (-q_rev)
                    row[:, slot] = -(Jq @ (-(l / s) * (cp.R_ij.T @ cp.t_ij)))
                    rows.append(w * row)
            else:
                dropped += 1

        if not res:
            r = np.zeros(0)
            J = np.zeros((0, self.n_params))
        else:
            r = np.concatenate(res)
            J = np.concatenate(rows) if want_jac else None
        return r, J, dropped


def bidirectional_cost(
    alignment: PairwiseAlignment, recon_a: Reconstruction, recon_b: Reconstruction, views: dict
) -> float:
    """Sum over correspondences and cross pairs of the weighted squared
    projected discrepancies, both directions."""
    prob = _BidirectionalProblem(alignment, recon_a, recon_b, views)
    r, _, dropped = prob.residuals_and_jac(prob.x0(), want_jac=False)
    alignment.dropped_residuals = dropped
    return float(np.dot(r, r))


def refine_alignment(
    alignment: PairwiseAlignment,
    recon_a: Reconstruction,
    recon_b: Reconstruction,
    views: dict,
    max_iterations: int = 100,
) -> PairwiseAlignment:
    """LM over (rotation tangent, translation, log scale, log lambdas)."""
    prob = _BidirectionalProblem(alignment, recon_a, recon_b, views)
    x0 = prob.x0()
    r0, _, _ = prob.residuals_and_jac(x0, want_jac=False)
    cost0 = float(np.dot(r0, r0))
    if r0.size == 0:
        alignment.cost = cost0
        return alignment

    sol = least_squares(
        lambda x: prob.residuals_and_jac(x, want_jac=False)[0],
        x0,
        jac=lambda x: prob.residuals_and_jac(x)[1],
        method="lm" if r0.size >= x0.size else "trf",
        xtol=1e-14,
        ftol=1e-14,
        gtol=1e-14,
        max_nfev=max_iterations * 4,
    )
    r1 = sol.fun
    cost1 = float(np.dot(r1, r1))
    if cost1 <= cost0:
        R_ab, t_ab, s, lam = prob.unpack(sol.x)
        alignment.transform = SimilarityTransform(project_to_so3(R_ab), t_ab, s)
        for idx, l in lam.items():
            alignment.cross_pairs[idx].lam = l
        alignment.cost = cost1
    else:
        alignment.cost = cost0
    return alignment


# ---------------------------------------------------------------------------
# MST merging


def _kruskal_mst(nodes: list, edges: list):
    """edges: (cost, u, v, payload). Returns (mst edges, components)."""
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    mst = []
    for cost, u, v, payload in sorted(edges, key=lambda e: (e[0], e[1], e[2])):
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
            mst.append((cost, u, v, payload))
    comps: dict = {}
    for n in nodes:
        comps.setdefault(find(n), []).append(n)
    return mst, list(comps.values())


def _transform_model(recon: Reconstruction, T: SimilarityTransform) -> None:
    for pid in recon.points:
        recon.points[pid] = apply_sim3(T, recon.points[pid])
    for v in list(recon.poses):
        pose = recon.poses[v]
        recon.poses[v] = CameraPose.from_center(
            project_to_so3(pose.R @ T.R.T), apply_sim3(T, pose.c)
        )


def _fuse_into(host: Reconstruction, guest: Reconstruction) -> None:
    """Guest already in the host frame. Duplicate tracks are averaged;
    duplicate views keep the host pose when the host is the larger model."""
    host_larger = len(host.poses) >= len(guest.poses)
    for v, pose in guest.poses.items():
        if v not in host.poses or not host_larger:
            host.poses[v] = pose
    for pid_g, tid in guest.point_track.items():
        if tid in host.track_point:
            pid_h = host.track_point[tid]
            host.points[pid_h] = 0.5 * (host.points[pid_h] + guest.points[pid_g])
            seen = set(host.obs[pid_h])
            for o in guest.obs[pid_g]:
                if o not in seen:
                    host.obs[pid_h].append(o)
        else:
            pid_h = host.add_point(guest.points[pid_g], tid)
            host.obs[pid_h] = list(guest.obs[pid_g])


def merge_all(
    reconstructions: list[Reconstruction],
    alignments: list[PairwiseAlignment],
    min_support: int = MIN_CROSS_SUPPORT,
) -> Reconstruction:
    """Compose all models into one frame along the minimum-cost spanning tree
    of refined alignments, smaller model merged into larger at each leaf."""
    models = {r.model_id: r for r in reconstructions}
    if len(models) == 1:
        return next(iter(models.values()))
    usable = [
        al for al in alignments
        if al.transform is not None and al.cost is not None and al.support >= min_support
    ]
    edges = [(al.cost, al.model_a, al.model_b, al) for al in usable]
    mst, comps = _kruskal_mst(sorted(models), edges)
    if len(comps) > 1:
        raise DisconnectedModels(comps)

    # adjacency of the remaining tree; to_current maps a node's original
    # frame into the frame its current model lives in
    adj: dict = {n: [] for n in models}
    for cost, u, v, al in mst:
        adj[u].append((v, al))
        adj[v].append((u, al))
    to_current = {n: SimilarityTransform.identity() for n in models}
    alive = set(models)

    while len(alive) > 1:
        leaves = sorted(n for n in alive if len(adj[n]) == 1)
        for leaf in leaves:
            if leaf not in alive or len(adj[leaf]) != 1:
                continue
            nbr, al = adj[leaf][0]
            # transform from leaf's original frame to nbr's original frame
            T_edge = al.transform if al.model_a == leaf else invert_sim3(al.transform)
            # current-frame transform leaf -> nbr
            T = compose_sim3(
                to_current[nbr], compose_sim3(T_edge, invert_sim3(to_current[leaf]))
            )
            m_leaf, m_nbr = models[leaf], models[nbr]
            if len(m_leaf.poses) <= len(m_nbr.poses):
                _transform_model(m_leaf, T)
                _fuse_into(m_nbr, m_leaf)
            else:
                _transform_model(m_nbr, invert_sim3(T))
                _fuse_into(m_leaf, m_nbr)
                models[nbr] = m_leaf
                to_current[nbr] = compose_sim3(invert_sim3(T), to_current[nbr])
            alive.discard(leaf)
            adj[nbr] = [(n, a) for n, a in adj[nbr] if n != leaf]
            adj[leaf] = []
    root = next(iter(alive))
    merged = models[root]
    merged.model_id = root
    return merged


def final_bundle_adjust(
    merged: Reconstruction, views: dict, opts: BaOptions | None = None
) -> Reconstruction:
    """Global reprojection minimization over the merged model."""
    return bundle_adjust(merged, views, opts or BaOptions(max_iterations=100))
