"""Core geometric types and predicates: cameras, poses, SIM(3) transforms.

Conventions: x_cam = R @ x_world + t, camera center c = -R.T @ t. Rotations
are stored as 3x3 matrices; quaternions are converted at I/O boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, ZeroVector

DEPTH_EPS = 1e-9
ORTHO_TOL = 1e-9


def _check_rotation(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol) or np.linalg.det(R) < 0:
        raise ValueError("matrix is not a proper rotation")
    return R


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera pose. c is derived from (R, t) and kept consistent."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.R)
        t = np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def c(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def from_center(cls, R: np.ndarray, c: np.ndarray) -> "CameraPose":
        R = np.asarray(R, dtype=float)
        c = np.asarray(c, dtype=float).reshape(3)
        return cls(R, -R @ c)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, p: np.ndarray) -> np.ndarray:
        """World point(s) -> camera frame. p is (3,) or (n, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t


@dataclass(frozen=True, eq=False)
class View:
    id: int
    intrinsics: Intrinsics
    keypoints: np.ndarray  # (n, 2) pixel coordinates
    superpixel_label: np.ndarray | None = None  # (n,) int labels, optional on ingest

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(kp)):
            raise ValueError("keypoint coordinates must be finite")
        object.__setattr__(self, "keypoints", kp)
        if self.superpixel_label is not None:
            lab = np.asarray(self.superpixel_label, dtype=int).reshape(-1)
            if lab.shape[0] != kp.shape[0]:
                raise ValueError("labels must cover every keypoint")
            object.__setattr__(self, "superpixel_label", lab)

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """p -> s * R @ p + t."""

    R: np.ndarray
    t: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        R = _check_rotation(self.R)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if self.s <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", float(self.s))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)


@dataclass
class CrossPair:
    """Relative two-view geometry between a camera in model a and one in model b."""

    cam_a: int
    cam_b: int
    R_ij: np.ndarray
    t_ij: np.ndarray  # unit translation direction
    weight: float = 1.0
    lam: float | None = None  # unknown positive scale, solved during alignment

    def __post_init__(self):
        self.R_ij = _check_rotation(self.R_ij)
        t = np.asarray(self.t_ij, dtype=float).reshape(3)
        n = np.linalg.norm(t)
        if n < 1e-12:
            raise ZeroVector("relative translation direction has zero norm")
        self.t_ij = t / n


def project(pose: CameraPose, k: Intrinsics, p: np.ndarray) -> np.ndarray:
    """Pinhole projection of a world point; raises NonPositiveDepth behind the camera."""
    pc = pose.transform(np.asarray(p, dtype=float).reshape(3))
    if pc[2] <= DEPTH_EPS:
        raise NonPositiveDepth(f"depth {pc[2]:.3e} <= {DEPTH_EPS}")
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def project_many(pose: CameraPose, k: Intrinsics, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (pixels, depth) without raising; caller
    filters on depth."""
    pc = pose.transform(np.asarray(pts, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    zsafe = np.where(np.abs(z) < DEPTH_EPS, DEPTH_EPS, z)
    px = np.stack([k.fx * pc[:, 0] / zsafe + k.cx, k.fy * pc[:, 1] / zsafe + k.cy], axis=1)
    return px, z


def rotation_error(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angle of R1^T R2 in radians, in [0, pi]. Symmetric in its arguments.

    Computed through the quaternion, which stays well-conditioned near pi
    where the trace formula loses half the significant digits.
    """
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(np.asarray(R1).T @ np.asarray(R2)).as_quat()
    return 2.0 * float(np.arctan2(np.linalg.norm(q[:3]), abs(q[3])))


def translation_direction_error(t1: np.ndarray, t2: np.ndarray) -> float:
    """Angle between two direction vectors in radians; scale invariant.

    atan2 of (cross, dot) keeps full precision at 0 and pi, where the arccos
    of the normalized dot product degrades to sqrt(eps).
    """
    t1 = np.asarray(t1, dtype=float).reshape(3)
    t2 = np.asarray(t2, dtype=float).reshape(3)
    n1, n2 = np.linalg.norm(t1), np.linalg.norm(t2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise ZeroVector("cannot take direction of zero vector")
    u1, u2 = t1 / n1, t2 / n2
    return float(np.arctan2(np.linalg.norm(np.cross(u1, u2)), np.dot(u1, u2)))


def apply_sim3(T: SimilarityTransform, p: np.ndarray) -> np.ndarray:
    """s * R @ p + t for a single point or an (n, 3) array."""
    p = np.asarray(p, dtype=float)
    return T.s * (p @ T.R.T) + T.t


def invert_sim3(T: SimilarityTransform) -> SimilarityTransform:
    Rinv = T.R.T
    return SimilarityTransform(Rinv, -(1.0 / T.s) * (Rinv @ T.t), 1.0 / T.s)


def compose_sim3(T2: SimilarityTransform, T1: SimilarityTransform) -> SimilarityTransform:
    """Composition T2 after T1: p -> T2(T1(p))."""
    return SimilarityTransform(T2.R @ T1.R, T2.s * (T2.R @ T1.t) + T2.t, T2.s * T1.s)


def rotvec_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map."""
    v = np.asarray(v, dtype=float).reshape(3)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        K = skew(v)
        return np.eye(3) + K + 0.5 * (K @ K)
    axis = v / angle
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Logarithm map of SO(3)."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> rotation matrix."""
    from scipy.spatial.transform import Rotation

    w, x, y, z = np.asarray(q, dtype=float).reshape(4)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q


def so3_right_jacobian(theta: np.ndarray) -> np.ndarray:
    """SO(3) right Jacobian J_r(theta)."""
    phi = float(np.linalg.norm(theta))
    K = skew(theta)
    if phi < 1e-8:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        - (1.0 - np.cos(phi)) / phi**2 * K
        + (phi - np.sin(phi)) / phi**3 * (K @ K)
    )


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a random axis-angle."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.pi)
    return rotvec_to_matrix(axis * angle)


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD with determinant correction."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt
