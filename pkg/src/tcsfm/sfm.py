"""Incremental reconstruction: two-view initialization, PnP registration,
triangulation, and bundle adjustment.

The minimal P3P solver is OpenCV's; RANSAC loops are our own and seeded, so
reconstruction is deterministic for a fixed config seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix

from .config import PipelineConfig
from .errors import (
    CheiralityViolation,
    DegenerateGeometry,
    HighResidual,
    InitializationFailed,
    LowParallax,
    TooFewInliers,
)
from .geometry import (
    CameraPose,
    Intrinsics,
    matrix_to_rotvec,
    project_many,
    rotvec_to_matrix,
    skew,
    so3_right_jacobian,
)

log = logging.getLogger(__name__)

MIN_TRIANGULATION_ANGLE = math.radians(1.0)


@dataclass
class BaOptions:
    max_iterations: int = 50
    ftol: float = 1e-10
    huber_scale: float = 2.0  # px
    fix_first_camera: bool = True

    def __post_init__(self):
        if self.max_iterations <= 0 or self.ftol <= 0 or self.huber_scale <= 0:
            raise ValueError("BA options must be positive")


@dataclass
class Reconstruction:
    model_id: int = 0
    poses: dict = field(default_factory=dict)       # view id -> CameraPose
    points: dict = field(default_factory=dict)      # point id -> (3,) xyz
    point_track: dict = field(default_factory=dict)  # point id -> track id
    track_point: dict = field(default_factory=dict)  # track id -> point id
    obs: dict = field(default_factory=dict)         # point id -> [(view, kp)]
    ba_converged: bool = True
    _next_pid: int = 0

    def add_point(self, xyz: np.ndarray, track_id: int) -> int:
        pid = self._next_pid
        self._next_pid += 1
        self.points[pid] = np.asarray(xyz, dtype=float).reshape(3)
        self.point_track[pid] = track_id
        self.track_point[track_id] = pid
        self.obs[pid] = []
        return pid

    def remove_point(self, pid: int) -> None:
        tid = self.point_track.pop(pid)
        self.track_point.pop(tid, None)
        self.points.pop(pid)
        self.obs.pop(pid)

    @property
    def registered_views(self) -> list:
        return sorted(self.poses)

    def n_observations(self) -> int:
        return sum(len(o) for o in self.obs.values())

    def observation_triples(self):
        for pid in sorted(self.obs):
            for v, k in self.obs[pid]:
                yield v, k, pid

    def mean_reprojection_error(self, views: dict) -> float:
        total, n = 0.0, 0
        for pid in self.obs:
            xyz = self.points[pid]
            for v, k in self.obs[pid]:
                view = views[v]
                px, z = project_many(self.poses[v], view.intrinsics, xyz[None, :])
                if z[0] > 0:
                    total += float(np.linalg.norm(px[0] - view.keypoints[k]))
                    n += 1
        return total / n if n else float("nan")


# ---------------------------------------------------------------------------
# two-view initialization


def _normalize(K: Intrinsics, px: np.ndarray) -> np.ndarray:
    x = (px[:, 0] - K.cx) / K.fx
    y = (px[:, 1] - K.cy) / K.fy
    return np.stack([x, y], axis=1)


def _eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Essential matrix from normalized correspondences (>= 8), with the
    (1, 1, 0) singular-value constraint enforced."""
    n = x1.shape[0]
    A = np.empty((n, 9))
    u1, v1 = x1[:, 0], x1[:, 1]
    u2, v2 = x2[:, 0], x2[:, 1]
    A[:, 0] = u2 * u1
    A[:, 1] = u2 * v1
    A[:, 2] = u2
    A[:, 3] = v2 * u1
    A[:, 4] = v2 * v1
    A[:, 5] = v2
    A[:, 6] = u1
    A[:, 7] = v1
    A[:, 8] = 1.0
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    U, _, Vt2 = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt2


def _sampson_sq(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1 = np.concatenate([x1, np.ones((x1.shape[0], 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((x2.shape[0], 1))], axis=1)
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.einsum("ij,ij->i", h2, Ex1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return num / np.maximum(den, 1e-18)


def _triangulate_pair(P1: np.ndarray, P2: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Linear DLT for normalized-coordinate projection matrices, vectorized."""
    n = x1.shape[0]
    out = np.empty((n, 3))
    for i in range(n):
        A = np.stack(
            [
                x1[i, 0] * P1[2] - P1[0],
                x1[i, 1] * P1[2] - P1[1],
                x2[i, 0] * P2[2] - P2[0],
                x2[i, 1] * P2[2] - P2[1],
            ]
        )
        _, _, Vt = np.linalg.svd(A)
        X = Vt[-1]
        out[i] = X[:3] / X[3]
    return out


def _ray_angle(c1: np.ndarray, c2: np.ndarray, X: np.ndarray) -> np.ndarray:
    d1 = X - c1
    d2 = X - c2
    n1 = np.linalg.norm(d1, axis=1)
    n2 = np.linalg.norm(d2, axis=1)
    cosang = np.einsum("ij,ij->i", d1, d2) / np.maximum(n1 * n2, 1e-18)
    return np.arccos(np.clip(cosang, -1.0, 1.0))


def initialize_two_view(
    px_a: np.ndarray,
    px_b: np.ndarray,
    k_a: Intrinsics,
    k_b: Intrinsics,
    config: PipelineConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[CameraPose, CameraPose, np.ndarray, np.ndarray]:
    """Relative pose + triangulated points from matched pixel coordinates.

    Returns (pose_a = identity, pose_b, points (n,3) with NaN rows for
    outliers, inlier mask). The baseline is scaled to unit norm.
    """
    config = config or PipelineConfig()
    rng = rng or np.random.default_rng(config.seed)
    px_a = np.asarray(px_a, dtype=float).reshape(-1, 2)
    px_b = np.asarray(px_b, dtype=float).reshape(-1, 2)
    n = px_a.shape[0]
    if n < 8:
        raise DegenerateGeometry(f"need >= 8 correspondences, got {n}")
    x1 = _normalize(k_a, px_a)
    x2 = _normalize(k_b, px_b)
    thresh = (config.ransac_threshold / ((k_a.fx + k_a.fy + k_b.fx + k_b.fy) / 4.0)) ** 2

    best_inl, best_E = None, None
    max_iters = config.ransac_max_iters
    it = 0
    while it < max_iters:
        it += 1
        idx = rng.choice(n, size=8, replace=False)
        try:
            E = _eight_point(x1[idx], x2[idx])
        except np.linalg.LinAlgError:
            continue
        inl = _sampson_sq(E, x1, x2) < thresh
        if best_inl is None or inl.sum() > best_inl.sum():
            best_inl, best_E = inl, E
            ratio = max(inl.sum() / n, 1e-3)
            denom = math.log(max(1.0 - ratio**8, 1e-12))
            if denom < 0.0:
                needed = math.log(1.0 - config.ransac_confidence) / denom
                max_iters = min(config.ransac_max_iters, max(int(needed) + 1, 10))
    if best_inl is None or best_inl.sum() < 8:
        raise DegenerateGeometry("essential RANSAC found no model")
    E = _eight_point(x1[best_inl], x2[best_inl])
    inl = _sampson_sq(E, x1, x2) < thresh
    if inl.sum() / n < 0.5:
        raise DegenerateGeometry(f"inlier ratio {inl.sum() / n:.2f} < 0.5")

    # decompose; pick the candidate with the most points in front of both cameras
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    candidates = [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    best = None
    for R, tt in candidates:
        P2 = np.hstack([R, tt[:, None]])
        X = _triangulate_pair(P1, P2, x1[inl], x2[inl])
        z1 = X[:, 2]
        z2 = (X @ R.T + tt)[:, 2]
        front = int(np.sum((z1 > 0) & (z2 > 0)))
        if best is None or front > best[0]:
            best = (front, R, tt, X, (z1 > 0) & (z2 > 0))
    front, R, tt, X, cheir = best
    if front < max(8, 0.5 * inl.sum()):
        raise DegenerateGeometry("cheirality test rejected all decompositions")

    pose_a = CameraPose.identity()
    pose_b = CameraPose(R, tt / np.linalg.norm(tt))
    # rescale the triangulation to the unit baseline
    X = X / np.linalg.norm(tt)

    ang = _ray_angle(pose_a.c[None, :], pose_b.c[None, :], X[cheir])
    if cheir.sum() == 0 or np.median(ang) < MIN_TRIANGULATION_ANGLE:
        raise DegenerateGeometry("median triangulation angle below 1 degree")

    points = np.full((n, 3), np.nan)
    inl_idx = np.flatnonzero(inl)
    keep = np.zeros(n, dtype=bool)
    keep[inl_idx[cheir]] = True
    points[inl_idx[cheir]] = X[cheir]
    return pose_a, pose_b, points, keep


# ---------------------------------------------------------------------------
# PnP


def _reproj_errors(pose: CameraPose, K: Intrinsics, pts3d: np.ndarray, pts2d: np.ndarray) -> np.ndarray:
    px, z = project_many(pose, K, pts3d)
    err = np.linalg.norm(px - pts2d, axis=1)
    err[z <= 0] = np.inf
    return err


def _refine_pose(pose: CameraPose, K: Intrinsics, pts3d: np.ndarray, pts2d: np.ndarray) -> CameraPose:
    x0 = np.concatenate([matrix_to_rotvec(pose.R), pose.t])

    def resid(x):
        p = CameraPose(rotvec_to_matrix(x[:3]), x[3:])
        px, z = project_many(p, K, pts3d)
        r = (px - pts2d).ravel()
        r[np.repeat(z <= 0, 2)] = 1e3
        return r

    sol = least_squares(resid, x0, method="lm", xtol=1e-14, ftol=1e-14, max_nfev=200)
    return CameraPose(rotvec_to_matrix(sol.x[:3]), sol.x[3:])


def estimate_pose_pnp(
    pts2d: np.ndarray,
    pts3d: np.ndarray,
    K: Intrinsics,
    config: PipelineConfig | None = None,
    rng: np.random.Generator | None = None,
    min_inliers: int | None = None,
) -> tuple[CameraPose, np.ndarray]:
    """P3P-RANSAC followed by nonlinear refinement on the inliers.

    Returns (pose, inlier index array). Raises TooFewInliers below the
    registration minimum so callers can move on to another image.
    """
    config = config or PipelineConfig()
    rng = rng or np.random.default_rng(config.seed)
    if min_inliers is None:
        min_inliers = config.min_pnp_matches
    pts2d = np.asarray(pts2d, dtype=float).reshape(-1, 2)
    pts3d = np.asarray(pts3d, dtype=float).reshape(-1, 3)
    n = pts2d.shape[0]
    if n < 4:
        raise TooFewInliers(f"PnP needs >= 4 correspondences, got {n}")
    Kmat = K.as_matrix()

    best_inl = None
    max_iters = config.ransac_max_iters
    it = 0
    while it < max_iters:
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        ok, rvecs, tvecs = cv2.solveP3P(
            pts3d[idx[:3]].reshape(-1, 1, 3),
            pts2d[idx[:3]].reshape(-1, 1, 2),
            Kmat,
            None,
            flags=cv2.SOLVEPNP_P3P,
        )
        if not ok:
            continue
        for rvec, tvec in zip(rvecs, tvecs):
            R = cv2.Rodrigues(rvec)[0]
            pose = CameraPose(R, tvec.reshape(3))
            err = _reproj_errors(pose, K, pts3d, pts2d)
            # disambiguate P3P solutions with the 4th sampled point
            if err[idx[3]] > config.ransac_threshold:
                continue
            inl = err < config.ransac_threshold
            if best_inl is None or inl.sum() > best_inl[0].sum():
                best_inl = (inl, pose)
                ratio = max(inl.sum() / n, 1e-3)
                needed = math.log(1.0 - config.ransac_confidence) / math.log(
                    max(1.0 - ratio**4, 1e-12)
                )
                max_iters = min(config.ransac_max_iters, max(int(needed) + 1, 10))
    if best_inl is None or best_inl[0].sum() < min_inliers:
        found = 0 if best_inl is None else int(best_inl[0].sum())
        raise TooFewInliers(f"{found} PnP inliers < {min_inliers}")
    inl, pose = best_inl
    pose = _refine_pose(pose, K, pts3d[inl], pts2d[inl])
    err = _reproj_errors(pose, K, pts3d, pts2d)
    inl = err < config.ransac_threshold
    if inl.sum() < min_inliers:
        raise TooFewInliers(f"{int(inl.sum())} PnP inliers < {min_inliers} after refinement")
    return pose, np.flatnonzero(inl)


# ---------------------------------------------------------------------------
# triangulation


def triangulate_track(
    observations: list[tuple[CameraPose, Intrinsics, np.ndarray]],
    max_error: float = 4.0,
) -> np.ndarray:
    """DLT estimate refined by total squared reprojection error.

    Raises LowParallax / CheiralityViolation / HighResidual when the point is
    not supported by the observations.
    """
    if len(observations) < 2:
        raise LowParallax("need at least two observations")
    A = []
    for pose, K, px in observations:
        P = np.hstack([pose.R, pose.t[:, None]])
        x = (px[0] - K.cx) / K.fx
        y = (px[1] - K.cy) / K.fy
        A.append(x * P[2] - P[0])
        A.append(y * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.asarray(A))
    X = Vt[-1]
    if abs(X[3]) < 1e-14:
        raise LowParallax("point at infinity")
    X = X[:3] / X[3]

    centers = np.stack([pose.c for pose, _, _ in observations])
    best_ang = 0.0
    for i in range(len(observations)):
        for j in range(i + 1, len(observations)):
            ang = float(_ray_angle(centers[i][None], centers[j][None], X[None])[0])
            best_ang = max(best_ang, ang)
    if best_ang < MIN_TRIANGULATION_ANGLE:
        raise LowParallax(f"max triangulation angle {math.degrees(best_ang):.3f} deg < 1 deg")

    def resid(x):
        r = []
        for pose, K, px in observations:
            p, z = project_many(pose, K, x[None, :])
            if z[0] <= 0:
                r.extend([1e3, 1e3])
            else:
                r.extend(p[0] - px)
        return np.asarray(r)

    sol = least_squares(resid, X, method="lm", xtol=1e-14, ftol=1e-14, max_nfev=100)
    X = sol.x
    for pose, K, px in observations:
        p, z = project_many(pose, K, X[None, :])
        if z[0] <= 0:
            raise CheiralityViolation("refined point behind a camera")
        if np.linalg.norm(p[0] - px) >= max_error:
            raise HighResidual(f"reprojection {np.linalg.norm(p[0] - px):.2f} px >= {max_error}")
    return X


# ---------------------------------------------------------------------------
# bundle adjustment


def _ba_cost(f: np.ndarray, scale: float) -> float:
    """Huber cost matching scipy's loss='huber' with f_scale=scale."""
    z = (f / scale) ** 2
    rho = np.where(z <= 1.0, z, 2.0 * np.sqrt(z) - 1.0)
    return 0.5 * scale**2 * float(np.sum(rho))


def bundle_adjust(
    recon: Reconstruction,
    views: dict,
    opts: BaOptions | None = None,
    fixed_views: set | None = None,
) -> Reconstruction:
    """Joint LM refinement of poses and points; mutates and returns recon.

    fixed_views holds cameras kept constant (the first registered camera is
    always fixed when opts.fix_first_camera).
    """
    opts = opts or BaOptions()
    view_ids = recon.registered_views
    if not view_ids or not recon.points:
        return recon
    fixed = set(fixed_views or ())
    if opts.fix_first_camera:
        fixed.add(view_ids[0])
    free_views = [v for v in view_ids if v not in fixed]
    pids = sorted(recon.points)
    pid_index = {p: i for i, p in enumerate(pids)}
    view_index = {v: i for i, v in enumerate(free_views)}

    obs_v, obs_p, obs_px = [], [], []
    for pid in pids:
        for v, k in recon.obs[pid]:
            obs_v.append(v)
            obs_p.append(pid)
            obs_px.append(views[v].keypoints[k])
    if not obs_v:
        return recon
    obs_px = np.asarray(obs_px)
    n_obs = len(obs_v)

    # group observations by view so residuals vectorize per camera
    by_view: dict = {}
    for m, v in enumerate(obs_v):
        by_view.setdefault(v, []).append(m)
    view_slices = {
        v: (np.asarray(ms), np.asarray([obs_p[m] for m in ms]))
        for v, ms in by_view.items()
    }

    x0 = np.empty(6 * len(free_views) + 3 * len(pids))
    for v, i in view_index.items():
        pose = recon.poses[v]
        x0[6 * i : 6 * i + 3] = matrix_to_rotvec(pose.R)
        x0[6 * i + 3 : 6 * i + 6] = pose.t
    base = 6 * len(free_views)
    for p, i in pid_index.items():
        x0[base + 3 * i : base + 3 * i + 3] = recon.points[p]

    fixed_poses = {v: recon.poses[v] for v in fixed if v in recon.poses}

    def unpack(x):
        poses = dict(fixed_poses)
        for v, i in view_index.items():
            poses[v] = CameraPose(rotvec_to_matrix(x[6 * i : 6 * i + 3]), x[6 * i + 3 : 6 * i + 6])
        pts = x[base:].reshape(-1, 3)
        return poses, pts

    pid_rows = {v: np.asarray([pid_index[p] for p in ps]) for v, (ms, ps) in view_slices.items()}

    def unpack_raw(x):
        poses = {v: (p.R, p.t) for v, p in fixed_poses.items()}
        for v, i in view_index.items():
            poses[v] = (rotvec_to_matrix(x[6 * i : 6 * i + 3]), x[6 * i + 3 : 6 * i + 6])
        return poses, x[base:].reshape(-1, 3)

    def resid(x):
        poses, pts = unpack_raw(x)
        r = np.empty((n_obs, 2))
        for v, (ms, _) in view_slices.items():
            R, t = poses[v]
            K = views[v].intrinsics
            pc = pts[pid_rows[v]] @ R.T + t
            z = pc[:, 2]
            zs = np.where(z > 0, z, 1.0)
            d = np.stack(
                [K.fx * pc[:, 0] / zs + K.cx, K.fy * pc[:, 1] / zs + K.cy], axis=1
            ) - obs_px[ms]
            d[z <= 0] = 1e3
            r[ms] = d
        return r.ravel()

    # static sparsity pattern: per observation a 2x6 camera block (free views)
    # and a 2x3 point block, in a fixed view-major order
    vs_order = sorted(view_slices)
    rows_parts, cols_parts = [], []
    for v in vs_order:
        ms, _ = view_slices[v]
        n = ms.size
        rows2 = np.stack([2 * ms, 2 * ms + 1], axis=1)  # (n, 2)
        if v in view_index:
            i = view_index[v]
            rows_parts.append(np.repeat(rows2, 6, axis=1).ravel())
            cols_parts.append(np.tile(np.arange(6 * i, 6 * i + 6), (n, 2)).ravel())
        rows_parts.append(np.repeat(rows2, 3, axis=1).ravel())
        pc0 = (base + 3 * pid_rows[v])[:, None] + np.arange(3)[None, :]
        cols_parts.append(np.tile(pc0, (1, 2)).ravel())
    jac_rows = np.concatenate(rows_parts)
    jac_cols = np.concatenate(cols_parts)

    def jac(x):
        poses, pts = unpack_raw(x)
        data = []
        for v in vs_order:
            ms, _ = view_slices[v]
            R, t = poses[v]
            K = views[v].intrinsics
            X = pts[pid_rows[v]]
            pc = X @ R.T + t
            z = pc[:, 2]
            ok = z > 0
            zs = np.where(ok, z, 1.0)
            n = ms.size
            A = np.zeros((n, 2, 3))
            A[:, 0, 0] = K.fx / zs
            A[:, 0, 2] = -K.fx * pc[:, 0] / zs**2
            A[:, 1, 1] = K.fy / zs
            A[:, 1, 2] = -K.fy * pc[:, 1] / zs**2
            A[~ok] = 0.0
            if v in view_index:
                i = view_index[v]
                Jr = so3_right_jacobian(x[6 * i : 6 * i + 3])
                S = np.zeros((n, 3, 3))
                S[:, 0, 1] = -X[:, 2]
                S[:, 0, 2] = X[:, 1]
                S[:, 1, 0] = X[:, 2]
                S[:, 1, 2] = -X[:, 0]
                S[:, 2, 0] = -X[:, 1]
                S[:, 2, 1] = X[:, 0]
                drot = -np.einsum("nij,njk->nik", A @ R, S @ Jr)
                data.append(np.concatenate([drot, A], axis=2).ravel())
            data.append((A @ R).ravel())
        return coo_matrix(
            (np.concatenate(data), (jac_rows, jac_cols)), shape=(2 * n_obs, x0.size)
        ).tocsr()

    f0 = resid(x0)
    cost0 = _ba_cost(f0, opts.huber_scale)
    sol = least_squares(
        resid,
        x0,
        jac=jac,
        method="trf",
        loss="huber",
        f_scale=opts.huber_scale,
        ftol=opts.ftol,
        xtol=1e-12,
        max_nfev=opts.max_iterations,
        x_scale="jac",
    )
    cost1 = _ba_cost(sol.fun, opts.huber_scale)
    if cost1 <= cost0:
        poses, pts = unpack(sol.x)
        recon.poses.update({v: poses[v] for v in free_views})
        for p, i in pid_index.items():
            recon.points[p] = pts[i].copy()
        recon.ba_converged = sol.status > 0
    else:  # trust-region should never accept an uphill step; keep the best iterate
        recon.ba_converged = False
    return recon


# ---------------------------------------------------------------------------
# cluster bookkeeping and incremental reconstruction


def merge_overlapping_clusters(clusters: list, min_common_images: int = 20) -> list:
    """Greedy union of clusters sharing more than min_common_images views,
    iterated to a fixpoint. Input order: image count descending, ties by
    segment id."""
    from .community import ImageCluster

    items = sorted(clusters, key=lambda c: (-len(c.view_ids), c.segment))
    merged = [
        ImageCluster(c.segment, list(c.view_ids), dict(c.tracks_per_view)) for c in items
    ]
    changed = True
    while changed:
        changed = False
        out = []
        while merged:
            cur = merged.pop(0)
            rest = []
            for other in merged:
                if len(set(cur.view_ids) & set(other.view_ids)) > min_common_images:
                    cur = ImageCluster(
                        min(cur.segment, other.segment),
                        sorted(set(cur.view_ids) | set(other.view_ids)),
                        {
                            v: max(cur.tracks_per_view.get(v, 0), other.tracks_per_view.get(v, 0))
                            for v in set(cur.tracks_per_view) | set(other.tracks_per_view)
                        },
                    )
                    changed = True
                else:
                    rest.append(other)
            merged = rest
            out.append(cur)
        merged = out
    return sorted(merged, key=lambda c: (-len(c.view_ids), c.segment))


class IncrementalBuilder:
    """Shared machinery for growing one reconstruction over a view set.

    track_obs maps track id -> list of (view, kp) restricted to usable
    observations (removed matches already filtered by the caller).
    """

    def __init__(self, views: dict, track_obs: dict, config: PipelineConfig, rng: np.random.Generator, model_id: int = 0):
        self.views = views
        self.track_obs = track_obs
        self.config = config
        self.rng = rng
        self.recon = Reconstruction(model_id=model_id)
        self.opts = BaOptions(huber_scale=2.0)
        self._last_global_ba = 0
        # view id -> list of (track, kp)
        self.view_tracks: dict = {}
        for tid, obs in track_obs.items():
            for v, k in obs:
                self.view_tracks.setdefault(v, []).append((tid, k))

    # -- initialization ----------------------------------------------------
    def initialize(self, candidate_edges: list, max_trials: int = 16) -> tuple[int, int]:
        """Pick the initial pair among the strongest candidate edges.

        Each viable edge gets a trial two-view model; among models whose
        support is at least half of the best, the widest median triangulation
        angle wins. Narrow-baseline pairs give shallow, warp-prone geometry,
        and low-support pairs are typically contaminated."""
        trials = []
        for i, j in candidate_edges:
            shared = self._shared_tracks(i, j)
            if len(shared) < 8:
                continue
            kp_i = np.stack([self.views[i].keypoints[ki] for _, ki, _ in shared])
            kp_j = np.stack([self.views[j].keypoints[kj] for _, _, kj in shared])
            try:
                pose_a, pose_b, pts, keep = initialize_two_view(
                    kp_i, kp_j, self.views[i].intrinsics, self.views[j].intrinsics,
                    self.config, self.rng,
                )
            except DegenerateGeometry:
                continue
            if keep.sum() < 8:
                continue
            kept = pts[keep]
            ang = _ray_angle(
                np.tile(pose_a.c, (kept.shape[0], 1)),
                np.tile(pose_b.c, (kept.shape[0], 1)),
                kept,
            )
            trials.append((i, j, pose_a, pose_b, pts, keep, float(np.median(ang))))
            if len(trials) >= max_trials:
                break
        if not trials:
            raise InitializationFailed("no edge yielded a valid two-view model")
        best_n = max(int(t[5].sum()) for t in trials)
        viable = [t for t in trials if int(t[5].sum()) >= max(8, best_n // 2)]
        i, j, pose_a, pose_b, pts, keep, _ = max(viable, key=lambda t: t[6])
        shared = self._shared_tracks(i, j)
        self.recon.poses[i] = pose_a
        self.recon.poses[j] = pose_b
        for (tid, ki, kj), ok, xyz in zip(shared, keep, pts):
            if not ok:
                continue
            pid = self.recon.add_point(xyz, tid)
            self.recon.obs[pid] = [(i, ki), (j, kj)]
        log.debug(
            "initialized from pair (%s, %s) with %d points", i, j, len(self.recon.points)
        )
        return i, j

    def _shared_tracks(self, i: int, j: int) -> list:
        out = []
        ti = {tid: k for tid, k in self.view_tracks.get(i, [])}
        for tid, kj in self.view_tracks.get(j, []):
            if tid in ti:
                out.append((tid, ti[tid], kj))
        return out

    # -- registration ------------------------------------------------------
    def matches_2d3d(self, v: int, point_filter=None) -> list:
        """(kp index, point id) pairs between view v and the current model."""
        out = []
        for tid, k in self.view_tracks.get(v, []):
            pid = self.recon.track_point.get(tid)
            if pid is None:
                continue
            if point_filter is not None and not point_filter(pid):
                continue
            out.append((k, pid))
        return out

    def pnp_register(self, v: int, matches: list, min_inliers: int | None = None) -> tuple[CameraPose, list]:
        pts2d = np.stack([self.views[v].keypoints[k] for k, _ in matches])
        pts3d = np.stack([self.recon.points[pid] for _, pid in matches])
        pose, inl = estimate_pose_pnp(
            pts2d, pts3d, self.views[v].intrinsics, self.config, self.rng, min_inliers
        )
        return pose, [matches[i] for i in inl]

    def commit_registration(self, v: int, pose: CameraPose, inlier_matches: list) -> None:
        self.recon.poses[v] = pose
        for k, pid in inlier_matches:
            if (v, k) not in self.recon.obs[pid]:
                self.recon.obs[pid].append((v, k))

    def triangulate_new(self) -> int:
        """Create points for tracks with >= 2 registered observations."""
        added = 0
        for tid, obs in self.track_obs.items():
            if tid in self.recon.track_point:
                continue
            reg = [(v, k) for v, k in obs if v in self.recon.poses]
            if len(reg) < 2:
                continue
            triples = [
                (self.recon.poses[v], self.views[v].intrinsics, self.views[v].keypoints[k])
                for v, k in reg
            ]
            try:
                xyz = triangulate_track(triples, max_error=self.config.ransac_threshold)
            except (LowParallax, CheiralityViolation, HighResidual):
                continue
            pid = self.recon.add_point(xyz, tid)
            self.recon.obs[pid] = list(reg)
            added += 1
        return added

    def complete_observations(self) -> None:
        """Attach registered-view observations consistent with existing points."""
        for v in self.recon.poses:
            for tid, k in self.view_tracks.get(v, []):
                pid = self.recon.track_point.get(tid)
                if pid is None or (v, k) in self.recon.obs[pid]:
                    continue
                px, z = project_many(
                    self.recon.poses[v], self.views[v].intrinsics, self.recon.points[pid][None, :]
                )
                if z[0] > 0 and np.linalg.norm(px[0] - self.views[v].keypoints[k]) < self.config.ransac_threshold:
                    self.recon.obs[pid].append((v, k))

    def prune_points(self) -> None:
        """Drop observations with large residuals, then points with < 2
        observations or a cheirality violation."""
        for pid in list(self.recon.points):
            xyz = self.recon.points[pid]
            kept = []
            for v, k in self.recon.obs[pid]:
                px, z = project_many(self.recon.poses[v], self.views[v].intrinsics, xyz[None, :])
                if z[0] > 0 and np.linalg.norm(px[0] - self.views[v].keypoints[k]) < self.config.ransac_threshold:
                    kept.append((v, k))
            self.recon.obs[pid] = kept
            if len(kept) < 2:
                self.recon.remove_point(pid)

    def local_ba(self, new_view: int) -> None:
        """Newest camera plus covisible cameras (>= 20 shared points); other
        cameras are held fixed."""
        shared: dict = {}
        new_pids = {pid for pid in self.recon.obs if any(v == new_view for v, _ in self.recon.obs[pid])}
        for pid in new_pids:
            for v, _ in self.recon.obs[pid]:
                if v != new_view:
                    shared[v] = shared.get(v, 0) + 1
        window = {new_view} | {v for v, n in shared.items() if n >= 20}
        fixed = set(self.recon.poses) - window
        bundle_adjust(self.recon, self.views, self.opts, fixed_views=fixed)
        self.prune_points()

    def global_ba(self) -> None:
        bundle_adjust(self.recon, self.views, self.opts)
        self.prune_points()
        self._last_global_ba = len(self.recon.poses)

    def maybe_global_ba(self) -> None:
        if len(self.recon.poses) >= 1.1 * max(self._last_global_ba, 2):
            self.global_ba()


def sub_view_graph_edges(view_graph, view_ids: list) -> list:
    """Edges inside the view subset, sorted by weight descending (ties by id)."""
    ids = set(view_ids)
    edges = [
        (e["w"], i, j)
        for (i, j), e in view_graph.edges.items()
        if i in ids and j in ids
    ]
    edges.sort(key=lambda x: (-x[0], x[1], x[2]))
    return [(i, j) for _, i, j in edges]


def reconstruct_cluster(
    cluster_views: list,
    views: dict,
    track_obs: dict,
    view_graph,
    config: PipelineConfig,
    model_id: int = 0,
    seed_offset: int = 0,
) -> Reconstruction:
    """Standard incremental loop over one consistency-corrected cluster."""
    rng = np.random.default_rng(config.seed + 1000 * (seed_offset + 1))
    cluster_set = set(cluster_views)
    local_obs = {
        tid: [(v, k) for v, k in obs if v in cluster_set]
        for tid, obs in track_obs.items()
    }
    local_obs = {tid: obs for tid, obs in local_obs.items() if len(obs) >= 2}
    builder = IncrementalBuilder(views, local_obs, config, rng, model_id)
    builder.initialize(sub_view_graph_edges(view_graph, cluster_views))
    builder.triangulate_new()
    builder.global_ba()

    failed: set = set()
    while True:
        remaining = [v for v in cluster_views if v not in builder.recon.poses and v not in failed]
        if not remaining:
            if failed and builder.triangulate_new() > 0:
                failed.clear()
                continue
            break
        scored = [(len(builder.matches_2d3d(v)), v) for v in remaining]
        scored.sort(key=lambda x: (-x[0], x[1]))
        n_matches, v = scored[0]
        if n_matches < config.min_pnp_matches:
            failed.add(v)
            continue
        try:
            pose, inliers = builder.pnp_register(v, builder.matches_2d3d(v))
        except TooFewInliers:
            failed.add(v)
            continue
        builder.commit_registration(v, pose, inliers)
        builder.triangulate_new()
        builder.complete_observations()
        builder.local_ba(v)
        builder.maybe_global_ba()
        failed.clear()
    builder.global_ba()
    return builder.recon
