"""Synthetic desk-scale scenes with exactly consistent cross-modal labels.

The scene is a ground lattice plus plate-shaped objects whose points sit
exactly on voxel centers: occupancy, masks, and point transfer are then
float-exact, so a noise-free run of the full pipeline must score 1.0
everywhere. Objects face the camera path so every occupied voxel is hit by
some ray across the sequence; ground-truth 2D masks are the pixels whose
first ray hit lands in the object's voxel set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import Masklet2D
from .geometry import CameraIntrinsics, Pose
from .io.manifest import CameraSpec, MaskletRef, SequenceManifest
from .protocol import TrackSet
from .recon import (
    BACKGROUND_TAG,
    ObjectBox,
    SparseVoxelGrid,
    TableSlice,
    object_tag,
    raycast_table,
    split_foreground,
)

Array = np.ndarray

VoxelId = tuple[str, tuple[int, int, int]]


def _lattice(xs, ys, zs, voxel_size) -> Array:
    """Points at the centers of the voxel cells indexed by xs/ys/zs."""
    xx, yy, zz = np.meshgrid(np.asarray(xs), np.asarray(ys), np.asarray(zs),
                             indexing="ij")
    cells = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    return (cells + 0.5) * voxel_size


def _cells_around(lo: float, hi: float, voxel_size: float) -> np.ndarray:
    first = int(np.floor(lo / voxel_size))
    last = int(np.floor(hi / voxel_size))
    return np.arange(first, last + 1)


@dataclass
class SyntheticScene:
    voxel_size: float
    n_frames: int
    ego_poses: list[Pose]
    cameras: dict[str, CameraSpec]
    scans: list[Array]                       # per frame, ego frame
    boxes: list[ObjectBox]                   # moving objects only
    object_ids: list[int]
    gt_voxels: dict[int, frozenset[VoxelId]]
    gt_points: dict[int, dict[int, Array]]   # object -> frame -> scan indices
    masklets: dict[tuple[int, str], Masklet2D] = field(default_factory=dict)
    grids: dict[str, SparseVoxelGrid] = field(default_factory=dict)
    tables: dict[tuple[str, int], TableSlice] = field(default_factory=dict)
    max_range: float = 40.0

    def background_grid(self) -> SparseVoxelGrid:
        return self.grids[BACKGROUND_TAG]

    def foreground_grids(self) -> dict[int, SparseVoxelGrid]:
        return {b.object_id: self.grids[object_tag(b.object_id)] for b in self.boxes}

    def box_poses(self, frame: int) -> dict[int, Pose]:
        return {b.object_id: b.pose_at(frame) for b in self.boxes}


def build_scene(n_frames: int = 20, voxel_size: float = 0.2,
                image_size: tuple[int, int] = (112, 64),
                focal: float = 80.0, max_range: float = 40.0) -> SyntheticScene:
    """Ground plane, three static plates, one moving plate, two cameras."""
    w, h = image_size
    intr = CameraIntrinsics(fx=focal, fy=focal, cx=w / 2, cy=h / 2, width=w, height=h)

    # Camera axes in ego coordinates: x right -> -y, y down -> -z, z forward -> +x.
    r_cam = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    cam0 = CameraSpec("cam0", intr, Pose(r_cam, np.array([0.2, 0.0, 1.6])))
    yaw1 = -0.06
    r1 = Pose.from_yaw(yaw1).rotation @ r_cam
    cam1 = CameraSpec("cam1", intr, Pose(r1, np.array([0.0, 0.5, 1.6])))
    cameras = {"cam0": cam0, "cam1": cam1}

    ego_poses = [Pose(np.eye(3), np.array([0.05 * f, 0.0, 0.0]))
                 for f in range(n_frames)]

    vs = voxel_size
    ground = _lattice(_cells_around(2.0, 13.0, vs), _cells_around(-4.0, 4.0, vs),
                      [0], vs)

    # Static plates: one voxel thick along x, facing the camera path.
    z_cells = _cells_around(0.7, 1.7, vs)

    def plate(x: float, y_center: float) -> Array:
        return _lattice([int(np.floor(x / vs))],
                        _cells_around(y_center - 0.31, y_center + 0.31, vs),
                        z_cells, vs)

    # Lanes are spaced so the moving plate's box never contains another
    # object's points and inter-object point gaps stay above the transfer
    # radius throughout the trajectory.
    statics = {1: plate(5.5, -2.0), 2: plate(7.5, 1.5), 3: plate(11.0, 0.6)}

    # Moving plate in its own body frame (object id 4).
    body = _lattice([0], _cells_around(-0.31, 0.31, vs), _cells_around(-0.5, 0.5, vs), vs)
    moving_id = 4
    poses = {f: Pose.from_yaw(0.02 * f, (4.0 + 0.27 * f, -0.9, 1.2))
             for f in range(n_frames)}
    box = ObjectBox(moving_id, (0.25, 0.55, 0.65), poses)

    # Ground-truth voxel sets from the construction lattices.
    def world_keys(pts):
        return frozenset((BACKGROUND_TAG, tuple(int(c) for c in k))
                         for k in np.floor(pts / vs).astype(int))

    gt_voxels: dict[int, frozenset[VoxelId]] = {
        oid: world_keys(pts) for oid, pts in statics.items()
    }
    gt_voxels[moving_id] = frozenset(
        (object_tag(moving_id), tuple(int(c) for c in k))
        for k in np.floor(body / vs).astype(int))

    # Per-frame scans in the ego frame; remember each object's point indices.
    scans: list[Array] = []
    gt_points: dict[int, dict[int, Array]] = {oid: {} for oid in (1, 2, 3, moving_id)}
    for f in range(n_frames):
        world_parts = [ground]
        offsets = {}
        cursor = len(ground)
        for oid in (1, 2, 3):
            world_parts.append(statics[oid])
            offsets[oid] = (cursor, cursor + len(statics[oid]))
            cursor += len(statics[oid])
        moving_world = poses[f].apply(body)
        world_parts.append(moving_world)
        offsets[moving_id] = (cursor, cursor + len(moving_world))
        world = np.vstack(world_parts)
        scans.append(ego_poses[f].invert().apply(world))
        for oid, (a, b) in offsets.items():
            gt_points[oid][f] = np.arange(a, b)

    scene = SyntheticScene(
        voxel_size=vs, n_frames=n_frames, ego_poses=ego_poses, cameras=cameras,
        scans=scans, boxes=[box], object_ids=[1, 2, 3, moving_id],
        gt_voxels=gt_voxels, gt_points=gt_points, max_range=max_range)
    _reconstruct(scene)
    _raycast(scene)
    _derive_masks(scene)
    return scene


def _reconstruct(scene: SyntheticScene) -> None:
    background = SparseVoxelGrid(scene.voxel_size, BACKGROUND_TAG)
    foreground = {b.object_id: SparseVoxelGrid(scene.voxel_size, object_tag(b.object_id))
                  for b in scene.boxes}
    for f in range(scene.n_frames):
        bg_pts, fg_pts = split_foreground(scene.scans[f], scene.ego_poses[f],
                                          scene.boxes, f)
        background.integrate(bg_pts)
        for oid, pts in fg_pts.items():
            foreground[oid].integrate(pts)
    scene.grids = {BACKGROUND_TAG: background}
    for oid, g in foreground.items():
        scene.grids[object_tag(oid)] = g


def _raycast(scene: SyntheticScene) -> None:
    fg = scene.foreground_grids()
    for f in range(scene.n_frames):
        fg_poses = scene.box_poses(f)
        for cam_id, spec in scene.cameras.items():
            cam_pose = scene.ego_poses[f].compose(spec.cam_to_lidar)
            scene.tables[(cam_id, f)] = raycast_table(
                scene.background_grid(), fg, fg_poses, cam_pose,
                spec.intrinsics, scene.max_range)


def _packed_targets(sl: TableSlice, targets: frozenset[VoxelId]) -> Array:
    from .recon import pack_keys, qualify_packed

    tag_index = {t: i for i, t in enumerate(sl.tag_names)}
    rows = [(tag_index[tag], key) for tag, key in targets if tag in tag_index]
    if not rows:
        return np.empty(0, dtype=np.int64)
    tags = np.array([r[0] for r in rows], dtype=np.int64)
    keys = np.array([r[1] for r in rows], dtype=np.int64)
    return np.sort(qualify_packed(tags, pack_keys(keys)))


def _derive_masks(scene: SyntheticScene) -> None:
    qualified = {key: sl.packed_voxels() for key, sl in scene.tables.items()}
    for oid in scene.object_ids:
        targets = scene.gt_voxels[oid]
        for cam_id, spec in scene.cameras.items():
            frames = {}
            packed = None
            for f in range(scene.n_frames):
                sl = scene.tables[(cam_id, f)]
                if packed is None:
                    packed = _packed_targets(sl, targets)
                mask = np.zeros((spec.intrinsics.height, spec.intrinsics.width),
                                dtype=bool)
                hit = np.isin(qualified[(cam_id, f)], packed)
                mask[sl.pixels[hit, 1], sl.pixels[hit, 0]] = True
                frames[f] = mask
            scene.masklets[(oid, cam_id)] = Masklet2D(oid, cam_id, frames)


def scene_trackset(scene: SyntheticScene) -> TrackSet:
    """Protocol ground truth: cam0 masks paired with per-object point indices."""
    spec = scene.cameras["cam0"]
    shape = (spec.intrinsics.height, spec.intrinsics.width)
    objects: dict[int, dict[int, dict[str, object]]] = {}
    for oid in scene.object_ids:
        frames = {}
        m2d = scene.masklets[(oid, "cam0")]
        for f in range(scene.n_frames):
            frames[f] = {"image": m2d.frames.get(f),
                         "lidar": scene.gt_points[oid][f]}
        objects[oid] = frames
    lidar_points = {f: scene.scans[f] for f in range(scene.n_frames)}
    return TrackSet(scene.n_frames, shape, objects, lidar_points)


def inject_mask_noise(scene: SyntheticScene, masklet: Masklet2D,
                      fraction: float = 0.05, min_distance: float = 3.0,
                      seed: int = 0) -> tuple[Masklet2D, set[VoxelId]]:
    """Corrupt a masklet with spurious pixels mapping far from the object.

    Adds fraction * |mask| pixels per frame, drawn from pixels whose first
    hit is a voxel more than min_distance (BEV) from every voxel of the
    object. Returns the corrupted masklet and the set of injected voxels.
    """
    rng = np.random.default_rng(seed)
    targets = scene.gt_voxels[masklet.object_id]
    target_bev = np.array([
        _bev_of(scene, v) for v in sorted(targets)
    ])
    injected: set[VoxelId] = set()
    frames = {}
    for f, mask in sorted(masklet.frames.items()):
        sl = scene.tables[(masklet.camera_id, f)]
        bev = slice_bev(scene, sl)
        d = np.linalg.norm(bev[:, None, :] - target_bev[None, :, :], axis=2).min(axis=1)
        candidates = np.flatnonzero(d > min_distance)
        n_extra = int(round(fraction * mask.sum()))
        out = mask.copy()
        if len(candidates) and n_extra:
            pick = rng.choice(candidates, size=min(n_extra, len(candidates)),
                              replace=False)
            for j in pick:
                u, v = sl.pixels[j]
                out[v, u] = True
                k = sl.keys[j]
                injected.add((sl.tag_names[sl.tags[j]],
                              (int(k[0]), int(k[1]), int(k[2]))))
        frames[f] = out
    return Masklet2D(masklet.object_id, masklet.camera_id, frames), injected


def _bev_of(scene: SyntheticScene, v: VoxelId) -> tuple[float, float]:
    tag, key = v
    grid = scene.grids[tag]
    center = grid.center(np.asarray(key))
    if tag != BACKGROUND_TAG:
        oid = int(tag.split(":", 1)[1])
        center = next(b for b in scene.boxes if b.object_id == oid).poses[0].apply(center)[0]
    return float(center[0]), float(center[1])


def slice_bev(scene: SyntheticScene, sl: TableSlice) -> Array:
    """Vectorized BEV coordinates for every entry of a table slice
    (foreground voxels placed with the object's first-frame pose)."""
    out = np.zeros((len(sl), 2))
    for tag_idx, tag in enumerate(sl.tag_names):
        sel = sl.tags == tag_idx
        if not sel.any():
            continue
        centers = scene.grids[tag].centers(sl.keys[sel])
        if tag != BACKGROUND_TAG:
            oid = int(tag.split(":", 1)[1])
            pose = next(b for b in scene.boxes if b.object_id == oid).poses[0]
            centers = pose.apply(centers)
        out[sel] = centers[:, :2]
    return out


def scene_manifest(scene: SyntheticScene, root, sequence_id: str = "synthetic-0",
                   ) -> SequenceManifest:
    """Assemble the manifest structure (file writing is the caller's job)."""
    refs = [MaskletRef(oid, cam, f"masklets/obj{oid}_{cam}.json")
            for (oid, cam) in sorted(scene.masklets)]
    return SequenceManifest(
        sequence_id=sequence_id,
        frame_count=scene.n_frames,
        voxel_size=scene.voxel_size,
        ego_poses=list(scene.ego_poses),
        cameras=dict(scene.cameras),
        scan_paths=[f"scans/frame{f:04d}.bin" for f in range(scene.n_frames)],
        objects=list(scene.boxes),
        masklets=refs,
        root=root,
    )


def write_fixture(scene: SyntheticScene, root) -> SequenceManifest:
    """Write the scene to disk as a manifest plus scan and masklet files."""
    from pathlib import Path

    from .io.formats import write_scan
    from .io.manifest import write_manifest, write_masklet2d

    root = Path(root)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    (root / "masklets").mkdir(parents=True, exist_ok=True)
    manifest = scene_manifest(scene, root)
    for f in range(scene.n_frames):
        write_scan(root / manifest.scan_paths[f], scene.scans[f])
    for ref in manifest.masklets:
        write_masklet2d(root / ref.path, scene.masklets[(ref.object_id, ref.camera_id)])
    write_manifest(root / "manifest.json", manifest)
    return manifest
