import json

import numpy as np
import pytest

from fuse4d.fusion import Masklet2D, Masklet3D, VoxelMasklet
from fuse4d.geometry import CameraIntrinsics, Pose
from fuse4d.io.config import Config, apply_overrides, load_config, save_config
from fuse4d.io.formats import (
    FormatError,
    read_grid,
    read_point_masklet,
    read_scan,
    read_table,
    read_voxel_masklet,
    write_grid,
    write_point_masklet,
    write_scan,
    write_table,
    write_voxel_masklet,
)
from fuse4d.io.manifest import (
    CameraSpec,
    ManifestError,
    MaskletRef,
    SequenceManifest,
    parse_manifest,
    read_masklet2d,
    write_manifest,
    write_masklet2d,
)
from fuse4d.io.rle import RleMask, rle_decode, rle_encode
from fuse4d.recon import BACKGROUND_TAG, SparseVoxelGrid, TableSlice


class TestRle:
    def test_all_zero(self):
        rle = rle_encode(np.zeros((2, 4), dtype=bool))
        assert rle.counts == (8,)

    def test_all_one(self):
        rle = rle_encode(np.ones((2, 4), dtype=bool))
        assert rle.counts == (0, 8)

    def test_known_pattern(self):
        m = np.array([[0, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
        rle = rle_encode(m)
        assert rle.counts == (1, 2, 1, 2, 2)
        assert np.array_equal(rle_decode(rle), m)

    def test_random_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            h = int(rng.integers(1, 12))
            w = int(rng.integers(1, 12))
            m = rng.random((h, w)) < rng.random()
            assert np.array_equal(rle_decode(rle_encode(m)), m)

    def test_bad_sum_rejected(self):
        with pytest.raises(ValueError, match="sum to"):
            RleMask(4, 2, (3,))

    def test_dict_round_trip(self):
        rle = rle_encode(np.eye(5, dtype=bool))
        again = RleMask.from_dict(json.loads(json.dumps(rle.to_dict())))
        assert again == rle


class TestBinaryFormats:
    def test_scan_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(137, 3)).astype(np.float32).astype(np.float64)
        p = tmp_path / "scan.bin"
        write_scan(p, pts)
        assert np.array_equal(read_scan(p), pts)

    def test_scan_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(FormatError, match="magic"):
            read_scan(p)

    def test_grid_round_trip(self, tmp_path):
        g = SparseVoxelGrid(0.25, "object:7")
        g.integrate(np.random.default_rng(2).uniform(-4, 4, size=(200, 3)))
        p = tmp_path / "g.grid"
        write_grid(p, g)
        back = read_grid(p)
        assert back.voxel_size == g.voxel_size
        assert back.frame_tag == g.frame_tag
        assert back.cells == g.cells

    def test_table_round_trip(self, tmp_path):
        sl = TableSlice(
            pixels=np.array([[3, 1], [0, 0], [2, 5]], dtype=np.int64),
            tags=np.array([0, 1, 0], dtype=np.int64),
            keys=np.array([[1, 2, 3], [-4, 0, 9], [7, 7, 7]], dtype=np.int64),
            distances=np.array([2.5, 1.25, 9.75]),
            tag_names=(BACKGROUND_TAG, "object:3"),
        )
        p = tmp_path / "t.table"
        write_table(p, "cam0", 4, sl)
        cam, frame, back = read_table(p)
        assert (cam, frame) == ("cam0", 4)
        assert back.as_dict() == sl.as_dict()

    def test_voxel_masklet_round_trip(self, tmp_path):
        vm = VoxelMasklet(5, frozenset(["cam0", "cam1"]))
        for i in range(6):
            v = (BACKGROUND_TAG, (i, 2 * i, -i))
            vm.votes[v] = i + 1
            vm.observations[v] = i + 3
            vm.bev[v] = (0.1 * i, -0.2 * i)
        vm.image_votes[("cam0", 0)] = frozenset(list(vm.votes)[:3])
        vm.image_votes[("cam1", 2)] = frozenset(list(vm.votes)[2:])
        p = tmp_path / "m.vm"
        write_voxel_masklet(p, vm)
        back = read_voxel_masklet(p)
        assert back.masklet_id == vm.masklet_id
        assert back.cameras == vm.cameras
        assert back.votes == vm.votes
        assert back.observations == vm.observations
        assert back.bev == vm.bev
        assert back.image_votes == vm.image_votes

    def test_point_masklet_round_trip(self, tmp_path):
        m = Masklet3D(9, {0: np.array([3, 1, 4]), 5: np.array([10])})
        p = tmp_path / "m.pm"
        write_point_masklet(p, m)
        back = read_point_masklet(p)
        assert back.masklet_id == 9
        assert {f: v.tolist() for f, v in back.frames.items()} == \
               {0: [1, 3, 4], 5: [10]}


def minimal_manifest(tmp_path, frames=2):
    intr = CameraIntrinsics(fx=40.0, fy=40.0, cx=8.0, cy=6.0, width=16, height=12)
    cam = CameraSpec("cam0", intr, Pose.identity())
    (tmp_path / "scans").mkdir(exist_ok=True)
    (tmp_path / "masklets").mkdir(exist_ok=True)
    scan_paths = []
    for f in range(frames):
        rel = f"scans/frame{f:04d}.bin"
        write_scan(tmp_path / rel, np.zeros((4, 3)))
        scan_paths.append(rel)
    mask = np.zeros((12, 16), dtype=bool)
    mask[4:8, 4:8] = True
    write_masklet2d(tmp_path / "masklets/obj1_cam0.json",
                    Masklet2D(1, "cam0", {f: mask for f in range(frames)}))
    return SequenceManifest(
        sequence_id="seq-0", frame_count=frames, voxel_size=0.2,
        ego_poses=[Pose.identity() for _ in range(frames)],
        cameras={"cam0": cam}, scan_paths=scan_paths,
        objects=[], masklets=[MaskletRef(1, "cam0", "masklets/obj1_cam0.json")],
        root=tmp_path)


class TestManifest:
    def test_minimal_fixture_parses(self, tmp_path):
        m = minimal_manifest(tmp_path)
        write_manifest(tmp_path / "manifest.json", m)
        back = parse_manifest(tmp_path / "manifest.json")
        assert back.frame_count == 2
        assert back.sequence_id == "seq-0"
        assert "cam0" in back.cameras

    def test_pose_count_mismatch_named(self, tmp_path):
        m = minimal_manifest(tmp_path)
        raw = m.to_dict()
        raw["ego_poses"].append(raw["ego_poses"][0])
        (tmp_path / "manifest.json").write_text(json.dumps(raw))
        with pytest.raises(ManifestError) as err:
            parse_manifest(tmp_path / "manifest.json")
        assert any("3" in e and "2" in e for e in err.value.errors)

    def test_all_errors_reported_in_one_pass(self, tmp_path):
        m = minimal_manifest(tmp_path)
        raw = m.to_dict()
        raw["ego_poses"].append(raw["ego_poses"][0])          # pose count
        raw["scans"][0] = "scans/missing.bin"                  # dangling file
        raw["masklets"][0]["camera_id"] = "nope"               # unknown camera
        (tmp_path / "manifest.json").write_text(json.dumps(raw))
        with pytest.raises(ManifestError) as err:
            parse_manifest(tmp_path / "manifest.json")
        assert len(err.value.errors) >= 3

    def test_random_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        for trial in range(5):
            frames = int(rng.integers(1, 5))
            m = minimal_manifest(tmp_path, frames=frames)
            write_manifest(tmp_path / "manifest.json", m)
            back = parse_manifest(tmp_path / "manifest.json")
            assert back.to_dict() == m.to_dict()

    def test_masklet2d_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        frames = {f: rng.random((6, 9)) < 0.5 for f in range(3)}
        m = Masklet2D(3, "cam1", frames)
        write_masklet2d(tmp_path / "m.json", m)
        back = read_masklet2d(tmp_path / "m.json")
        assert back.object_id == 3 and back.camera_id == "cam1"
        for f in frames:
            assert np.array_equal(back.frames[f], frames[f])


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.engine.voxel_size == 0.1
        assert cfg.fusion.eps == 0.5
        assert cfg.fusion.min_pts == 5
        assert cfg.fusion.overlap_threshold == 0.5
        assert cfg.fusion.transfer_radius_voxels == 1.5
        assert cfg.memory.unprompted_capacity == 6
        assert cfg.memory.prompted_capacity == 2
        assert cfg.protocol.iou_threshold == 0.75
        assert cfg.metrics.boundary_tolerance_fraction == 0.008

    def test_save_load_round_trip(self, tmp_path):
        cfg = Config()
        cfg.fusion.eps = 0.75
        cfg.engine.seed = 42
        save_config(cfg, tmp_path / "c.ini")
        back = load_config(tmp_path / "c.ini")
        assert back.to_dict() == cfg.to_dict()

    def test_overrides(self):
        cfg = Config()
        apply_overrides(cfg, {"fusion.eps": "1.25", "memory.attention_heads": "2"})
        assert cfg.fusion.eps == 1.25
        assert cfg.memory.attention_heads == 2

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "c.ini").write_text("[fusion]\nbogus = 1\n")
        with pytest.raises(ValueError, match="unknown key"):
            load_config(tmp_path / "c.ini")
        with pytest.raises(ValueError, match="unknown config section"):
            apply_overrides(Config(), {"nope.eps": "1"})

    def test_transfer_radius_scales_with_voxel(self):
        cfg = Config()
        assert cfg.fusion.transfer_radius(0.2) == pytest.approx(0.3)
