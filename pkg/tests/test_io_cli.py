"""File formats, round trips, and the command-line interface."""

import json

import numpy as np
import pytest

from tcsfm import io
from tcsfm.cli import main
from tcsfm.config import PipelineConfig
from tcsfm.errors import IoError, InvalidSpec
from tcsfm.geometry import CameraPose, Intrinsics, View, random_rotation
from tcsfm.sfm import Reconstruction
from tcsfm.synth import SceneSpec, generate_scene
from tcsfm.tracks import Match


def test_ingest_round_trip(tmp_path, rng):
    K = Intrinsics(500.0, 510.0, 320.0, 240.0)
    views = [
        View(0, K, rng.uniform(0, 600, size=(5, 2))),
        View(1, K, rng.uniform(0, 600, size=(4, 2)), np.array([1, 1, 2, 2])),
    ]
    matches = [Match(0, 1, ((0, 0), (2, 3)))]
    path = tmp_path / "scene.json"
    io.save_ingest(path, views, matches)
    v2, m2 = io.load_ingest(path)
    assert [v.id for v in v2] == [0, 1]
    assert np.allclose(v2[0].keypoints, views[0].keypoints, atol=1e-6)
    assert v2[0].superpixel_label is None
    assert list(v2[1].superpixel_label) == [1, 1, 2, 2]
    assert m2 == matches


def test_load_ingest_bad_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(IoError):
        io.load_ingest(bad)


def test_ground_truth_round_trip(tmp_path):
    spec = SceneSpec(
        n_cameras=8, n_central=15, n_ring=40, n_apron=10, n_infill=2,
        n_flank=6, n_duplicate=15,
    )
    _, _, gt = generate_scene(spec)
    path = tmp_path / "gt.json"
    io.save_ground_truth(path, gt)
    gt2 = io.load_ground_truth(path)
    assert sorted(gt2.poses) == sorted(gt.poses)
    for v in gt.poses:
        assert np.allclose(gt2.poses[v].R, gt.poses[v].R, atol=1e-9)
        assert np.allclose(gt2.poses[v].t, gt.poses[v].t, atol=1e-8)
    assert np.allclose(gt2.points, gt.points, atol=1e-8)
    assert gt2.tracks == gt.tracks
    assert gt2.pairing == gt.pairing
    assert gt2.spec == spec


def test_ply_round_trip_exact(tmp_path, rng):
    pts = rng.normal(size=(100, 3)).astype(np.float32)
    cols = rng.integers(0, 256, size=(100, 3)).astype(np.uint8)
    path = tmp_path / "pts.ply"
    io.write_ply(path, pts, cols)
    p2, c2 = io.read_ply(path)
    assert np.array_equal(p2, pts)
    assert np.array_equal(c2, cols)


def test_read_ply_rejects_garbage(tmp_path):
    path = tmp_path / "x.ply"
    path.write_bytes(b"not a ply at all")
    with pytest.raises(IoError):
        io.read_ply(path)


def test_poses_round_trip(tmp_path, rng):
    poses = {
        v: CameraPose(random_rotation(rng), rng.normal(size=3)) for v in (0, 3, 7)
    }
    path = tmp_path / "poses.txt"
    io.save_poses(path, poses)
    p2 = io.load_poses(path)
    assert sorted(p2) == [0, 3, 7]
    for v in poses:
        assert np.allclose(p2[v].R, poses[v].R, atol=1e-9)
        assert np.allclose(p2[v].t, poses[v].t, atol=1e-9)


def test_model_directory_round_trip(tmp_path, rng):
    recon = Reconstruction()
    recon.poses = {v: CameraPose(random_rotation(rng), rng.normal(size=3)) for v in range(4)}
    for tid in range(20):
        recon.add_point(rng.normal(size=3), tid)
    io.save_poses(tmp_path / "poses.txt", recon.poses)
    io.export_ply(recon, tmp_path / "points.ply", with_cameras=True)
    loaded = io.load_model(tmp_path)
    assert sorted(loaded.poses) == list(range(4))
    # camera vertices are color-tagged and excluded from the point cloud
    assert len(loaded.points) == 20
    orig = np.stack([recon.points[p] for p in sorted(recon.points)]).astype(np.float32)
    got = np.stack([loaded.points[p] for p in sorted(loaded.points)]).astype(np.float32)
    assert np.array_equal(got, orig)


def test_config_round_trip(tmp_path):
    config = PipelineConfig(tau_w=0.05, min_pnp_matches=20, seed=42)
    path = tmp_path / "config.txt"
    io.save_config(path, config)
    assert io.load_config(path) == config


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "config.txt"
    path.write_text("no_such_knob = 3\n")
    with pytest.raises(IoError):
        io.load_config(path)


def test_scene_spec_validation(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text("[1, 2]")
    with pytest.raises(InvalidSpec):
        io.load_scene_spec(path)
    path.write_text('{"bogus_field": 1}')
    with pytest.raises(InvalidSpec):
        io.load_scene_spec(path)
    path.write_text("{}")
    assert io.load_scene_spec(path) == SceneSpec()


def test_cli_synth_writes_scene_and_gt(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({
        "n_cameras": 16, "n_central": 15, "n_ring": 40, "n_apron": 10,
        "n_infill": 2, "n_flank": 6, "n_duplicate": 15, "rho": 0.05,
    }))
    out = tmp_path / "scene"
    assert main(["synth", "--spec", str(spec_path), "--out", str(out)]) == 0
    views, matches = io.load_ingest(out / "scene.json")
    gt = io.load_ground_truth(out / "ground_truth.json")
    assert len(views) == 16
    assert len(gt.injected) > 0


def test_cli_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["run"])  # missing required arguments
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 2


def test_cli_missing_input_returns_one(tmp_path):
    assert main(["run", "--input", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    assert main(["eval", "--model", str(tmp_path), "--gt", str(tmp_path / "nope.json")]) == 1


def test_cli_export(tmp_path, rng):
    recon = Reconstruction()
    recon.poses = {v: CameraPose(random_rotation(rng), rng.normal(size=3)) for v in range(3)}
    for tid in range(10):
        recon.add_point(rng.normal(size=3), tid)
    io.save_poses(tmp_path / "poses.txt", recon.poses)
    io.export_ply(recon, tmp_path / "points.ply")
    ply = tmp_path / "out.ply"
    assert main(["export", "--model", str(tmp_path), "--ply", str(ply), "--with-cameras"]) == 0
    pts, cols = io.read_ply(ply)
    assert pts.shape == (13, 3)  # 10 points + 3 camera centers
