"""File formats: ingest documents, ground-truth sidecars, model exports.

Ingest is a single JSON document:

    {
      "views":   [{"id", "intrinsics" {fx, fy, cx, cy},
                   "keypoints" [[x, y], ...],
                   "superpixel_labels" [...]   (optional)}],
      "matches": [{"view_i", "view_j", "pairs" [[ki, kj], ...]}]
    }

All coordinates are pixels. A model directory holds poses.txt (view id,
quaternion w x y z, translation x y z per line), points.ply (binary
little-endian, float32 xyz + uint8 rgb) and manifest.json.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IoError, InvalidSpec
from .geometry import CameraPose, Intrinsics, View, matrix_to_quat, quat_to_matrix
from .config import PipelineConfig
from .synth import GroundTruth, SceneSpec
from .tracks import Match

PLY_CAMERA_COLOR = (255, 64, 64)
PLY_POINT_COLOR = (255, 255, 255)


# ---------------------------------------------------------------------------
# ingest


def save_ingest(path, views: list, matches: list) -> None:
    doc = {
        "views": [
            {
                "id": v.id,
                "intrinsics": {
                    "fx": v.intrinsics.fx,
                    "fy": v.intrinsics.fy,
                    "cx": v.intrinsics.cx,
                    "cy": v.intrinsics.cy,
                },
                "keypoints": np.round(v.keypoints, 6).tolist(),
                **(
                    {"superpixel_labels": v.superpixel_label.tolist()}
                    if v.superpixel_label is not None
                    else {}
                ),
            }
            for v in views
        ],
        "matches": [
            {"view_i": m.view_i, "view_j": m.view_j, "pairs": [list(p) for p in m.pairs]}
            for m in matches
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_ingest(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read ingest file {path}: {e}") from e
    views = []
    for d in doc.get("views", []):
        ki = d["intrinsics"]
        views.append(
            View(
                int(d["id"]),
                Intrinsics(ki["fx"], ki["fy"], ki["cx"], ki["cy"]),
                np.asarray(d["keypoints"], dtype=float).reshape(-1, 2),
                np.asarray(d["superpixel_labels"], dtype=int)
                if "superpixel_labels" in d
                else None,
            )
        )
    matches = [
        Match(int(d["view_i"]), int(d["view_j"]), tuple(map(tuple, d["pairs"])))
        for d in doc.get("matches", [])
    ]
    return views, matches


# ---------------------------------------------------------------------------
# ground truth sidecar


def save_ground_truth(path, gt: GroundTruth) -> None:
    doc = {
        "poses": [
            {
                "id": v,
                "quaternion": np.round(matrix_to_quat(p.R), 12).tolist(),
                "translation": np.round(p.t, 9).tolist(),
            }
            for v, p in sorted(gt.poses.items())
        ],
        "points": np.round(gt.points, 9).tolist(),
        "tracks": {str(p): [list(o) for o in obs] for p, obs in sorted(gt.tracks.items())},
        "pairing": [list(p) for p in gt.pairing],
        "injected": [list(m) for m in gt.injected],
        "scene_diameter": gt.scene_diameter,
        **({"spec": gt.spec.to_dict()} if gt.spec is not None else {}),
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_ground_truth(path) -> GroundTruth:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read ground-truth file {path}: {e}") from e
    poses = {
        int(d["id"]): CameraPose(quat_to_matrix(d["quaternion"]), np.asarray(d["translation"]))
        for d in doc["poses"]
    }
    spec = None
    if "spec" in doc:
        sd = dict(doc["spec"])
        sd["duplicate_angles"] = tuple(sd.get("duplicate_angles", (0.0, np.pi)))
        spec = SceneSpec(**sd)
    return GroundTruth(
        poses=poses,
        points=np.asarray(doc["points"], dtype=float),
        tracks={int(p): [tuple(o) for o in obs] for p, obs in doc["tracks"].items()},
        pairing=[tuple(p) for p in doc["pairing"]],
        injected=[tuple(m) for m in doc.get("injected", [])],
        scene_diameter=float(doc.get("scene_diameter", 0.0)),
        spec=spec,
    )


def load_scene_spec(path) -> SceneSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read scene spec {path}: {e}") from e
    if not isinstance(doc, dict):
        raise InvalidSpec("scene spec must be a JSON object")
    if "duplicate_angles" in doc:
        doc["duplicate_angles"] = tuple(doc["duplicate_angles"])
    try:
        return SceneSpec(**doc)
    except TypeError as e:
        raise InvalidSpec(f"unknown scene spec field: {e}") from e


# ---------------------------------------------------------------------------
# PLY


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = points.shape[0]
    if colors is None:
        colors = np.tile(np.asarray(PLY_POINT_COLOR, dtype=np.uint8), (n, 1))
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for i in range(n):
            f.write(struct.pack("<fffBBB", *points[i], *colors[i]))


def read_ply(path):
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise IoError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if not header or header[0] != "ply":
        raise IoError(f"{path}: not a PLY file")
    n = 0
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    body = data[end + len(b"end_header\n"):]
    points = np.empty((n, 3), dtype=np.float32)
    colors = np.empty((n, 3), dtype=np.uint8)
    stride = struct.calcsize("<fffBBB")
    if len(body) < n * stride:
        raise IoError(f"{path}: truncated PLY body")
    for i in range(n):
        x, y, z, r, g, b = struct.unpack_from("<fffBBB", body, i * stride)
        points[i] = (x, y, z)
        colors[i] = (r, g, b)
    return points, colors


def export_ply(recon, path, with_cameras: bool = False) -> None:
    pids = sorted(recon.points)
    pts = [recon.points[p] for p in pids]
    cols = [PLY_POINT_COLOR] * len(pids)
    if with_cameras:
        for v in recon.registered_views:
            pts.append(recon.poses[v].c)
            cols.append(PLY_CAMERA_COLOR)
    pts = np.asarray(pts, dtype=np.float32).reshape(-1, 3)
    cols = np.asarray(cols, dtype=np.uint8).reshape(-1, 3)
    write_ply(path, pts, cols)


# ---------------------------------------------------------------------------
# poses / model directory


def save_poses(path, poses: dict) -> None:
    lines = ["# view_id qw qx qy qz tx ty tz"]
    for v in sorted(poses):
        q = matrix_to_quat(poses[v].R)
        t = poses[v].t
        lines.append(
            f"{v} " + " ".join(f"{x:.12f}" for x in (*q, *t))
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> dict:
    poses = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read poses file {path}: {e}") from e
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise IoError(f"malformed pose line: {line!r}")
        v = int(parts[0])
        q = np.asarray([float(x) for x in parts[1:5]])
        t = np.asarray([float(x) for x in parts[5:8]])
        poses[v] = CameraPose(quat_to_matrix(q / np.linalg.norm(q)), t)
    return poses


def load_model(model_dir):
    """Reconstruction from a model directory (poses.txt + points.ply)."""
    from .sfm import Reconstruction

    model_dir = Path(model_dir)
    recon = Reconstruction()
    recon.poses = load_poses(model_dir / "poses.txt")
    ply = model_dir / "points.ply"
    if ply.exists():
        pts, cols = read_ply(ply)
        keep = np.all(cols == np.asarray(PLY_POINT_COLOR, dtype=np.uint8), axis=1)
        for i, xyz in enumerate(np.asarray(pts[keep], dtype=float)):
            recon.add_point(xyz, -(i + 1))
    return recon


# ---------------------------------------------------------------------------
# config


def save_config(path, config: PipelineConfig) -> None:
    lines = [f"{k} = {v}" for k, v in config.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read config file {path}: {e}") from e
    defaults = PipelineConfig().to_dict()
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IoError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise IoError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = type(defaults[key])
        overrides[key] = kind(float(value)) if kind in (int, float) else kind(value)
    return PipelineConfig(**{**defaults, **overrides})


# ---------------------------------------------------------------------------
# reports


def save_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read manifest {path}: {e}") from e


def write_labeling(path, label: dict) -> None:
    lines = [f"{tid} {c}" for tid, c in sorted(label.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def write_disambiguation_report(path, verdicts: list, reports: dict, removed: set) -> None:
    lines = ["# community n_tracks erroneous_ratio ambiguous"]
    for v in verdicts:
        lines.append(f"{v.community} {v.n_tracks} {v.erroneous_ratio:.4f} {int(v.ambiguous)}")
    lines.append("# track_id gsi n_adjacent n_species")
    for tid in sorted(reports):
        r = reports[tid]
        lines.append(f"{tid} {r.gsi:.4f} {r.n_adjacent} {r.n_species}")
    lines.append("# removed: view_id keypoint segment")
    for v, k, seg in sorted(removed):
        lines.append(f"{v} {k} {seg}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_alignment_audit(path, alignments: list) -> None:
    lines = ["# model_a model_b qw qx qy qz tx ty tz scale cost support"]
    for al in alignments:
        if al.transform is None:
            lines.append(f"{al.model_a} {al.model_b} failed")
            continue
        q = matrix_to_quat(al.transform.R)
        t = al.transform.t
        cost = -1.0 if al.cost is None else al.cost
        lines.append(
            f"{al.model_a} {al.model_b} "
            + " ".join(f"{x:.9f}" for x in (*q, *t))
            + f" {al.transform.s:.9f} {cost:.6f} {al.support}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
