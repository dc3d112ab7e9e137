"""Synthetic scenes with duplicated structure and injected cross-instance
mismatches; the verification oracle for the whole pipeline.

Layout: cameras on a ring facing inward; a small central backdrop visible
from everywhere; a ring backdrop at mid radius; two congruent facade patches
related by a known rigid transform, placed so no camera sees both; a clean
"apron" of instance-specific points around each patch. Visual similarity of
the duplicates is modeled purely as injected false matches between paired
points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InvalidSpec, TooFewCommonViews
from .geometry import CameraPose, Intrinsics, rotation_error, rotvec_to_matrix
from .tracks import Match


@dataclass(frozen=True)
class SceneSpec:
    n_cameras: int = 40
    n_central: int = 60
    n_ring: int = 260
    n_apron: int = 80        # context points per duplicate instance (4 blocks)
    n_infill: int = 10       # clean margin points per duplicate instance
    n_flank: int = 50        # freestanding points flanking each patch (2 groups)
    n_duplicate: int = 200   # per instance
    camera_radius: float = 10.0
    backdrop_radius: float = 6.0
    height_jitter: float = 0.3
    duplicate_angles: tuple = (0.0, math.pi)
    sigma: float = 1.0
    rho: float = 0.1
    fov_deg: float = 60.0
    min_depth: float = 1.0
    max_depth: float = 12.0
    image_width: int = 1280
    image_height: int = 960
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rho < 1.0):
            raise InvalidSpec("rho must lie in [0, 1)")
        for name in ("n_cameras", "n_central", "n_ring", "n_apron", "n_duplicate"):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive")
        if not (0.0 < self.fov_deg < 180.0):
            raise InvalidSpec("fov_deg must lie in (0, 180)")
        if not (0.0 < self.min_depth < self.max_depth):
            raise InvalidSpec("need 0 < min_depth < max_depth")
        if len(self.duplicate_angles) != 2:
            raise InvalidSpec("exactly two duplicate instances are modeled")

    @property
    def n_points(self) -> int:
        return (
            self.n_central
            + self.n_ring
            + 2 * (self.n_apron + self.n_infill + self.n_flank)
            + 2 * self.n_duplicate
        )

    def intrinsics(self) -> Intrinsics:
        f = (self.image_width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)
        return Intrinsics(f, f, self.image_width / 2.0, self.image_height / 2.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["duplicate_angles"] = list(self.duplicate_angles)
        return d


@dataclass
class GroundTruth:
    poses: dict                 # view id -> CameraPose
    points: np.ndarray          # (n, 3)
    tracks: dict                # point index -> [(view id, kp index)]
    pairing: list               # (index of instance-A point, paired B point)
    injected: list = field(default_factory=list)  # (view_i, kp_i, view_j, kp_j)
    scene_diameter: float = 0.0
    spec: SceneSpec | None = None

    def keypoint_of(self, point: int, view: int) -> int | None:
        for v, k in self.tracks.get(point, ()):
            if v == view:
                return k
        return None


def _rotz(a: float) -> np.ndarray:
    return rotvec_to_matrix(np.array([0.0, 0.0, a]))


def _look_at(c: np.ndarray, target: np.ndarray) -> CameraPose:
    z = target - c
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose.from_center(np.stack([x, y, z]), c)


def generate_scene(spec: SceneSpec):
    """Returns (views, matches, GroundTruth). Deterministic under spec.seed."""
    from .geometry import View

    rng = np.random.default_rng(spec.seed)
    K = spec.intrinsics()
    ang_a, ang_b = spec.duplicate_angles

    poses: dict = {}
    for i in range(spec.n_cameras):
        theta = 2.0 * math.pi * i / spec.n_cameras
        c = np.array(
            [
                spec.camera_radius * math.cos(theta),
                spec.camera_radius * math.sin(theta),
                spec.height_jitter * rng.uniform(-1.0, 1.0),
            ]
        )
        poses[i] = _look_at(c, np.zeros(3))

    # duplicate assembly geometry, in scene units on the facade plane
    patch_z0 = 0.8        # vertical offset keeps the patch clear of the backdrop
    patch_half = 0.12
    margin_outer = 0.22

    def on_plane(angle, ys, zs):
        local = np.stack(
            [
                spec.backdrop_radius + rng.uniform(-0.08, 0.08, size=len(ys)),
                np.asarray(ys),
                patch_z0 + np.asarray(zs),
            ],
            axis=1,
        )
        return local @ _rotz(angle).T

    pts = []
    # central backdrop below the duplicate assemblies, visible to every camera
    phi = rng.uniform(0.0, 2.0 * math.pi, size=spec.n_central)
    r = 1.5 * np.sqrt(rng.uniform(0.0, 1.0, size=spec.n_central))
    pts.append(
        np.stack(
            [r * np.cos(phi), r * np.sin(phi), rng.uniform(-3.2, -2.4, size=spec.n_central)],
            axis=1,
        )
    )

    # ring backdrop: two wide arcs centered on the duplicate placements, with
    # a gap between them so the halves share no clean co-visible structure
    # besides the central backdrop; windows at the patch angles are left for
    # the instance-specific context points
    arc_half = 0.96
    ring = []
    while len(ring) < spec.n_ring:
        phi = rng.uniform(0.0, 2.0 * math.pi)
        off = min(
            abs((phi - a + math.pi) % (2 * math.pi) - math.pi)
            for a in (ang_a, ang_b)
        )
        if off < 0.2 or off > arc_half:
            continue
        rr = spec.backdrop_radius + rng.uniform(-0.3, 0.3)
        ring.append([rr * math.cos(phi), rr * math.sin(phi), rng.uniform(0.3, 1.5)])
    pts.append(np.asarray(ring))

    # context: instance-specific clean points filling the ring window around
    # each patch, contiguous with the ring band so they join its communities;
    # an empty moat separates them from the duplicate strip
    def context(angle):
        off = rng.uniform(0.45 / spec.backdrop_radius, 0.2, size=spec.n_apron)
        off *= rng.choice([-1.0, 1.0], size=spec.n_apron)
        phi = angle + off
        rr = spec.backdrop_radius + rng.uniform(-0.3, 0.3, size=spec.n_apron)
        z = rng.uniform(-0.6, 1.5, size=spec.n_apron)
        return np.stack([rr * np.cos(phi), rr * np.sin(phi), z], axis=1)

    pts.append(context(ang_a))
    pts.append(context(ang_b))

    # clean instance-specific infill mixed into (and slightly past) the patch
    def infill(angle):
        ys = rng.uniform(-patch_half, patch_half, size=spec.n_infill)
        zs = rng.uniform(-0.6, 1.5, size=spec.n_infill) - patch_z0
        return on_plane(angle, ys, zs)

    pts.append(infill(ang_a))
    pts.append(infill(ang_b))

    # freestanding flank groups left and right of each patch; omnidirectional
    # visibility gives them long tracks, so they anchor their own communities
    def flank(angle):
        half = spec.n_flank // 2
        ys = np.concatenate(
            [
                rng.uniform(0.6, 1.0, size=half),
                rng.uniform(-1.0, -0.6, size=spec.n_flank - half),
            ]
        )
        zs = rng.uniform(-0.25, 0.25, size=spec.n_flank)
        return on_plane(angle, ys, zs)

    pts.append(flank(ang_a))
    pts.append(flank(ang_b))

    # duplicate patches: congruent full-height pilasters, B = Rz(ang_b - ang_a) @ A;
    # the strip splits each window into left and right halves that only touch
    # through it
    ys = rng.uniform(-patch_half, patch_half, size=spec.n_duplicate)
    zs = rng.uniform(-0.6, 1.5, size=spec.n_duplicate)
    local = np.stack(
        [spec.backdrop_radius + rng.uniform(-0.08, 0.08, size=spec.n_duplicate), ys, zs],
        axis=1,
    )
    patch_a = local @ _rotz(ang_a).T
    patch_b = local @ _rotz(ang_b).T
    pts.append(patch_a)
    pts.append(patch_b)
    points = np.concatenate(pts)

    def radial_normals(arr):
        n = arr.copy()
        n[:, 2] = 0.0
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    # facade-style visibility: surfaces face outward and are only seen from
    # cameras in front of them; the central backdrop and the flank groups are
    # omnidirectional
    omni = np.full((1, 3), np.nan)
    normals = np.concatenate(
        [np.broadcast_to(omni, (spec.n_central, 3))]
        + [radial_normals(p) for p in pts[1:6]]
        + [np.broadcast_to(omni, (spec.n_flank, 3))] * 2
        + [radial_normals(p) for p in pts[8:]]
    )

    base_a = spec.n_central + spec.n_ring + 2 * (
        spec.n_apron + spec.n_infill + spec.n_flank
    )
    base_b = base_a + spec.n_duplicate
    pairing = [(base_a + k, base_b + k) for k in range(spec.n_duplicate)]

    # the recessed duplicate patches face a narrower cone than the flat band,
    # so merged cross-instance tracks stay comparable in length to clean ones
    facing_min = np.full(points.shape[0], 0.25)
    facing_min[base_a:] = 0.6

    # visibility + noisy keypoints
    tan_h = (spec.image_width / 2.0) / K.fx
    tan_v = (spec.image_height / 2.0) / K.fy
    views = []
    tracks: dict = {p: [] for p in range(points.shape[0])}
    for v in sorted(poses):
        pc = poses[v].transform(points)
        z = pc[:, 2]
        to_cam = poses[v].c[None, :] - points
        to_cam = to_cam / np.maximum(np.linalg.norm(to_cam, axis=1, keepdims=True), 1e-12)
        facing = np.einsum("ij,ij->i", to_cam, normals)
        vis = (
            (z > spec.min_depth)
            & (z < spec.max_depth)
            & (np.abs(pc[:, 0]) < tan_h * z)
            & (np.abs(pc[:, 1]) < tan_v * z)
            & (np.isnan(facing) | (facing > facing_min))
        )
        idx = np.flatnonzero(vis)
        px = np.stack(
            [K.fx * pc[idx, 0] / z[idx] + K.cx, K.fy * pc[idx, 1] / z[idx] + K.cy],
            axis=1,
        )
        px = px + spec.sigma * rng.normal(size=px.shape)
        for k, p in enumerate(idx):
            tracks[int(p)].append((v, k))
        views.append(View(v, K, px))

    tracks = {p: obs for p, obs in tracks.items() if len(obs) >= 2}

    # true matches: every co-visible pair of observations of the same point
    pair_matches: dict = {}
    for p, obs in tracks.items():
        for a in range(len(obs)):
            for b in range(a + 1, len(obs)):
                (vi, ki), (vj, kj) = obs[a], obs[b]
                pair_matches.setdefault((vi, vj), []).append((ki, kj))
    matches = [
        Match(vi, vj, tuple(pairs)) for (vi, vj), pairs in sorted(pair_matches.items())
    ]

    centers = np.stack([poses[v].c for v in sorted(poses)])
    cloud = np.concatenate([points, centers])
    diameter = float(
        np.max(np.linalg.norm(cloud[:, None, :] - cloud[None, :, :], axis=2))
    )
    gt = GroundTruth(
        poses=poses,
        points=points,
        tracks=tracks,
        pairing=pairing,
        scene_diameter=diameter,
        spec=spec,
    )
    return views, matches, gt


def inject_mismatches(matches: list, gt: GroundTruth, rho: float, seed: int = 0) -> list:
    """Add false matches between keypoints of paired duplicate points for a
    fraction rho of the eligible cross-instance observation pairs."""
    if not gt.pairing:
        raise InvalidSpec("ground truth has no duplicate pairing")
    if rho <= 0.0:
        return matches
    eligible = []
    for pa, pb in gt.pairing:
        for va, ka in gt.tracks.get(pa, ()):
            for vb, kb in gt.tracks.get(pb, ()):
                if va == vb:
                    continue
                if va < vb:
                    eligible.append((va, ka, vb, kb))
                else:
                    eligible.append((vb, kb, va, ka))
    eligible.sort()
    rng = np.random.default_rng(seed)
    n_inject = int(round(rho * len(eligible)))
    chosen = sorted(rng.choice(len(eligible), size=n_inject, replace=False).tolist())

    extra: dict = {}
    for c in chosen:
        vi, ki, vj, kj = eligible[c]
        extra.setdefault((vi, vj), []).append((ki, kj))
        gt.injected.append(eligible[c])

    by_pair = {(m.view_i, m.view_j): list(m.pairs) for m in matches}
    for key, pairs in extra.items():
        by_pair.setdefault(key, []).extend(pairs)
    return [Match(vi, vj, tuple(pairs)) for (vi, vj), pairs in sorted(by_pair.items())]


def umeyama(src: np.ndarray, dst: np.ndarray):
    """Closed-form similarity aligning src to dst (least squares).

    Returns (R, t, s) with dst ~= s R src + t.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = float(np.mean(np.sum(xs**2, axis=1)))
    s = float(np.trace(np.diag(D) @ S)) / max(var_s, 1e-18)
    t = mu_d - s * (R @ mu_s)
    return R, t, s


def evaluate_against_gt(recon, gt: GroundTruth) -> dict:
    """Gauge-invariant pose accuracy: Umeyama-align estimated camera centers
    to the true centers, then report per-camera rotation / center errors."""
    common = sorted(set(recon.poses) & set(gt.poses))
    if len(common) < 3:
        raise TooFewCommonViews(f"{len(common)} common views < 3")
    est = np.stack([recon.poses[v].c for v in common])
    true = np.stack([gt.poses[v].c for v in common])
    R, t, s = umeyama(est, true)

    rot_deg, cen = [], []
    for v in common:
        rot_deg.append(
            math.degrees(rotation_error(gt.poses[v].R, recon.poses[v].R @ R.T))
        )
        cen.append(float(np.linalg.norm(s * (R @ recon.poses[v].c) + t - gt.poses[v].c)))
    rot_deg = np.asarray(rot_deg)
    cen = np.asarray(cen)
    diam = gt.scene_diameter if gt.scene_diameter > 0 else 1.0
    return {
        "n_registered": len(recon.poses),
        "n_common": len(common),
        "rotation_mean_deg": float(rot_deg.mean()),
        "rotation_median_deg": float(np.median(rot_deg)),
        "rotation_max_deg": float(rot_deg.max()),
        "center_mean": float(cen.mean()),
        "center_median": float(np.median(cen)),
        "center_max": float(cen.max()),
        "center_mean_pct": float(100.0 * cen.mean() / diam),
        "center_median_pct": float(100.0 * np.median(cen) / diam),
        "center_errors_pct": (100.0 * cen / diam).tolist(),
        "scene_diameter": float(diam),
    }
