"""Sequence manifest: the single JSON entry point describing a recording.

A manifest names the calibration, ego poses, LiDAR scan files, object boxes
and ingested 2D masklet files for one sequence. Validation is exhaustive:
every problem is collected and reported together, not just the first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..fusion import Masklet2D
from ..geometry import CameraIntrinsics, Pose
from ..recon import ObjectBox
from .rle import RleMask, rle_decode, rle_encode

MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Carries every validation failure found in one pass."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("manifest invalid:\n" + "\n".join(f"  - {e}" for e in errors))


def pose_to_rows(pose: Pose) -> list[float]:
    return [float(x) for x in pose.matrix().reshape(-1)]


def pose_from_rows(rows, where: str, errors: list[str]) -> Pose | None:
    arr = np.asarray(rows, dtype=np.float64).reshape(-1)
    if arr.shape != (16,):
        errors.append(f"{where}: expected 16 row-major matrix entries, got {arr.shape[0]}")
        return None
    m = arr.reshape(4, 4)
    if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
        errors.append(f"{where}: last matrix row must be [0, 0, 0, 1]")
        return None
    try:
        return Pose.from_matrix(m)
    except ValueError as exc:
        errors.append(f"{where}: {exc}")
        return None


@dataclass(frozen=True)
class CameraSpec:
    camera_id: str
    intrinsics: CameraIntrinsics
    cam_to_lidar: Pose


@dataclass(frozen=True)
class MaskletRef:
    object_id: int
    camera_id: str
    path: str


@dataclass
class SequenceManifest:
    sequence_id: str
    frame_count: int
    voxel_size: float
    ego_poses: list[Pose]
    cameras: dict[str, CameraSpec]
    scan_paths: list[str]
    objects: list[ObjectBox]
    masklets: list[MaskletRef]
    root: Path = field(default_factory=Path)

    def camera_world_pose(self, camera_id: str, frame: int) -> Pose:
        """Camera-to-world pose: ego pose composed with the mount extrinsic."""
        return self.ego_poses[frame].compose(self.cameras[camera_id].cam_to_lidar)

    def scan_file(self, frame: int) -> Path:
        return self.root / self.scan_paths[frame]

    def masklet_file(self, ref: MaskletRef) -> Path:
        return self.root / ref.path

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "sequence_id": self.sequence_id,
            "frame_count": self.frame_count,
            "voxel_size": self.voxel_size,
            "ego_poses": [pose_to_rows(p) for p in self.ego_poses],
            "cameras": {
                cid: {
                    "intrinsics": spec.intrinsics.to_dict(),
                    "cam_to_lidar": pose_to_rows(spec.cam_to_lidar),
                }
                for cid, spec in sorted(self.cameras.items())
            },
            "scans": list(self.scan_paths),
            "objects": [
                {
                    "id": box.object_id,
                    "half_extents": [float(x) for x in box.half_extents],
                    "poses": {str(f): pose_to_rows(p) for f, p in sorted(box.poses.items())},
                }
                for box in self.objects
            ],
            "masklets": [
                {"object_id": r.object_id, "camera_id": r.camera_id, "path": r.path}
                for r in self.masklets
            ],
        }


def write_manifest(path: Path, manifest: SequenceManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def parse_manifest(path) -> SequenceManifest:
    """Parse and fully validate; raises ManifestError listing every failure."""
    path = Path(path)
    errors: list[str] = []
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError([f"manifest file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ManifestError([f"manifest is not valid JSON: {exc}"]) from None

    for fld in ("version", "sequence_id", "frame_count", "voxel_size",
                "ego_poses", "cameras", "scans", "objects", "masklets"):
        if fld not in raw:
            errors.append(f"missing field {fld!r}")
    if errors:
        raise ManifestError(errors)

    if raw["version"] != MANIFEST_VERSION:
        errors.append(f"unsupported manifest version {raw['version']}")
    frame_count = int(raw["frame_count"])
    if frame_count < 1:
        errors.append(f"frame_count must be positive, got {frame_count}")
    voxel_size = float(raw["voxel_size"])
    if voxel_size <= 0:
        errors.append(f"voxel_size must be positive, got {voxel_size}")

    ego_poses = []
    if len(raw["ego_poses"]) != frame_count:
        errors.append(
            f"ego pose count {len(raw['ego_poses'])} does not match "
            f"frame_count {frame_count}")
    for i, rows in enumerate(raw["ego_poses"]):
        p = pose_from_rows(rows, f"ego_poses[{i}]", errors)
        if p is not None:
            ego_poses.append(p)

    cameras: dict[str, CameraSpec] = {}
    for cid, spec in raw["cameras"].items():
        where = f"cameras[{cid}]"
        if "intrinsics" not in spec or "cam_to_lidar" not in spec:
            errors.append(f"{where}: needs intrinsics and cam_to_lidar")
            continue
        try:
            intr = CameraIntrinsics.from_dict(spec["intrinsics"])
        except (ValueError, KeyError) as exc:
            errors.append(f"{where}: bad intrinsics ({exc})")
            continue
        pose = pose_from_rows(spec["cam_to_lidar"], f"{where}.cam_to_lidar", errors)
        if pose is not None:
            cameras[cid] = CameraSpec(cid, intr, pose)

    scan_paths = [str(s) for s in raw["scans"]]
    if len(scan_paths) != frame_count:
        errors.append(
            f"scan count {len(scan_paths)} does not match frame_count {frame_count}")
    for i, rel in enumerate(scan_paths):
        if not (path.parent / rel).is_file():
            errors.append(f"scans[{i}]: missing file {rel}")

    objects: list[ObjectBox] = []
    seen_ids: set[int] = set()
    for j, ob in enumerate(raw["objects"]):
        where = f"objects[{j}]"
        try:
            oid = int(ob["id"])
            half = np.asarray(ob["half_extents"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"{where}: {exc}")
            continue
        if oid in seen_ids:
            errors.append(f"{where}: duplicate object id {oid}")
            continue
        seen_ids.add(oid)
        poses = {}
        for fs, rows in ob.get("poses", {}).items():
            f = int(fs)
            if not 0 <= f < frame_count:
                errors.append(f"{where}: pose frame {f} outside [0, {frame_count})")
                continue
            p = pose_from_rows(rows, f"{where}.poses[{f}]", errors)
            if p is not None:
                poses[f] = p
        try:
            objects.append(ObjectBox(oid, half, poses))
        except ValueError as exc:
            errors.append(f"{where}: {exc}")

    masklets: list[MaskletRef] = []
    for j, mk in enumerate(raw["masklets"]):
        where = f"masklets[{j}]"
        try:
            ref = MaskletRef(int(mk["object_id"]), str(mk["camera_id"]), str(mk["path"]))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"{where}: {exc}")
            continue
        if ref.camera_id not in raw["cameras"]:
            errors.append(f"{where}: unknown camera {ref.camera_id!r}")
        if not (path.parent / ref.path).is_file():
            errors.append(f"{where}: missing file {ref.path}")
        masklets.append(ref)

    if errors:
        raise ManifestError(errors)
    return SequenceManifest(
        sequence_id=str(raw["sequence_id"]), frame_count=frame_count,
        voxel_size=voxel_size, ego_poses=ego_poses, cameras=cameras,
        scan_paths=scan_paths, objects=objects, masklets=masklets,
        root=path.parent)


# 2D masklet files ----------------------------------------------------------

def write_masklet2d(path: Path, masklet: Masklet2D) -> None:
    payload = {
        "version": MANIFEST_VERSION,
        "object_id": masklet.object_id,
        "camera_id": masklet.camera_id,
        "frames": {str(f): rle_encode(m).to_dict()
                   for f, m in sorted(masklet.frames.items())},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_masklet2d(path: Path) -> Masklet2D:
    raw = json.loads(Path(path).read_text())
    frames = {int(f): rle_decode(RleMask.from_dict(d))
              for f, d in raw["frames"].items()}
    return Masklet2D(int(raw["object_id"]), str(raw["camera_id"]), frames)
