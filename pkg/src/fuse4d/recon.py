"""4D sparse-voxel reconstruction and the pixel-voxel table.

One background occupancy grid lives in the world frame; each boxed foreground
object gets its own grid in the object's body frame, so its occupied voxel
set never changes as the object moves. Ray casting marches every image pixel
against all grids and records the nearest occupied hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import CameraIntrinsics, Pose, as_points

Array = np.ndarray

BACKGROUND_TAG = "world"

# Voxel indices are packed into int64 with 16 bits per axis, leaving the high
# bits free for a grid-tag index. +-32768 voxels per axis is +-3.2 km at the
# default 0.1 m resolution.
_KEY_BITS = 16
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1
_TAG_SHIFT = 3 * _KEY_BITS


def object_tag(object_id: int) -> str:
    return f"object:{object_id}"


def pack_keys(keys: Array) -> Array:
    """Pack (N, 3) integer voxel keys into sortable int64 values."""
    k = np.asarray(keys, dtype=np.int64)
    if np.any(np.abs(k) >= _KEY_OFFSET):
        raise ValueError("voxel index out of packable range")
    return (((k[:, 0] + _KEY_OFFSET) << (2 * _KEY_BITS))
            | ((k[:, 1] + _KEY_OFFSET) << _KEY_BITS)
            | (k[:, 2] + _KEY_OFFSET))


def unpack_keys(packed: Array) -> Array:
    p = np.asarray(packed, dtype=np.int64)
    ix = (p >> (2 * _KEY_BITS)) - _KEY_OFFSET
    iy = ((p >> _KEY_BITS) & _KEY_MASK) - _KEY_OFFSET
    iz = (p & _KEY_MASK) - _KEY_OFFSET
    return np.stack([ix, iy, iz], axis=1)


class SparseVoxelGrid:
    """Hash-addressed occupancy grid; weight = accumulated hit count."""

    def __init__(self, voxel_size: float, frame_tag: str = BACKGROUND_TAG):
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.frame_tag = frame_tag
        self.cells: dict[tuple[int, int, int], int] = {}
        self._packed_cache: Array | None = None

    def __len__(self) -> int:
        return len(self.cells)

    def keys_of(self, points) -> Array:
        """Integer voxel keys (exact floor of position / voxel_size)."""
        pts = as_points(points)
        return np.floor(pts / self.voxel_size).astype(np.int64)

    def integrate(self, points) -> "SparseVoxelGrid":
        pts = as_points(points)
        if len(pts) == 0:
            return self
        keys = self.keys_of(pts)
        packed, counts = np.unique(pack_keys(keys), return_counts=True)
        for p, c in zip(unpack_keys(packed), counts):
            k = (int(p[0]), int(p[1]), int(p[2]))
            self.cells[k] = self.cells.get(k, 0) + int(c)
        self._packed_cache = None
        return self

    def occupied(self, key: tuple[int, int, int]) -> bool:
        return tuple(key) in self.cells

    def center(self, key) -> Array:
        return (np.asarray(key, dtype=np.float64) + 0.5) * self.voxel_size

    def centers(self, keys) -> Array:
        return (np.asarray(keys, dtype=np.float64) + 0.5) * self.voxel_size

    def packed_keys(self) -> Array:
        """Sorted packed occupancy set (cached until the next integrate)."""
        if self._packed_cache is None:
            if self.cells:
                keys = np.array(sorted(self.cells.keys()), dtype=np.int64)
                self._packed_cache = np.sort(pack_keys(keys))
            else:
                self._packed_cache = np.empty(0, dtype=np.int64)
        return self._packed_cache

    def bounds(self) -> tuple[Array, Array] | None:
        """(lo, hi) metric corners of the occupied bounding box, or None."""
        if not self.cells:
            return None
        keys = np.array(sorted(self.cells.keys()), dtype=np.int64)
        return (keys.min(axis=0) * self.voxel_size,
                (keys.max(axis=0) + 1) * self.voxel_size)

    def sorted_items(self) -> list[tuple[tuple[int, int, int], int]]:
        return sorted(self.cells.items())


def integrate_scan(grid: SparseVoxelGrid, points) -> SparseVoxelGrid:
    """Increment the containing voxel of each point (points in the grid frame)."""
    return grid.integrate(points)


@dataclass(frozen=True)
class ObjectBox:
    """Per-frame posed box; pose maps the body frame into the world frame."""

    object_id: int
    half_extents: Array
    poses: Mapping[int, Pose]

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if not np.all(he > 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "half_extents", he)
        object.__setattr__(self, "poses", dict(self.poses))

    def pose_at(self, frame: int) -> Pose:
        try:
            return self.poses[frame]
        except KeyError:
            raise ValueError(
                f"object {self.object_id} has no pose for frame {frame}") from None


def split_foreground(scan, ego_pose: Pose, boxes: Sequence[ObjectBox], frame: int,
                     ) -> tuple[Array, dict[int, Array]]:
    """Partition a sweep into world-frame background and body-frame object points.

    A point inside at least one box goes to the nearest box center (ties to
    the lowest object id) expressed in that box's body frame; everything else
    becomes background in the world frame. Exhaustive and disjoint.
    """
    pts_world = ego_pose.apply(as_points(scan))
    n = len(pts_world)
    if not boxes:
        return pts_world, {}
    poses = [b.pose_at(frame) for b in boxes]  # raises before any work if missing
    inside = np.zeros((n, len(boxes)), dtype=bool)
    bodies = []
    for j, (box, pose) in enumerate(zip(boxes, poses)):
        body = pose.invert().apply(pts_world)
        bodies.append(body)
        inside[:, j] = np.all(np.abs(body) <= box.half_extents, axis=1)
    any_inside = inside.any(axis=1)
    centers = np.stack([p.translation for p in poses])
    d2 = ((pts_world[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    d2[~inside] = np.inf
    # argmin breaks distance ties toward the earlier (lower-id) box because
    # boxes are ordered by object_id below.
    order = np.argsort([b.object_id for b in boxes], kind="stable")
    d2 = d2[:, order]
    chosen = np.argmin(d2, axis=1)
    per_object: dict[int, Array] = {}
    for slot, j in enumerate(order):
        sel = any_inside & (chosen == slot)
        if sel.any():
            per_object[boxes[j].object_id] = bodies[j][sel]
    return pts_world[~any_inside], per_object


@dataclass
class TableSlice:
    """Pixel-to-voxel hits for one (camera, frame): parallel arrays sorted by pixel."""

    pixels: Array     # (N, 2) int64 (u, v)
    tags: Array       # (N,) int index into tag_names
    keys: Array       # (N, 3) int64 voxel keys, in the tag's grid frame
    distances: Array  # (N,) meters, ray entry distance of the hit voxel
    tag_names: tuple[str, ...]

    def __post_init__(self):
        if np.any(self.distances <= 0):
            raise ValueError("hit distances must be positive")

    def __len__(self) -> int:
        return len(self.pixels)

    def as_dict(self) -> dict[tuple[int, int], tuple[str, tuple[int, int, int], float]]:
        out = {}
        for px, t, k, d in zip(self.pixels, self.tags, self.keys, self.distances):
            out[(int(px[0]), int(px[1]))] = (
                self.tag_names[t], (int(k[0]), int(k[1]), int(k[2])), float(d))
        return out

    def packed_voxels(self) -> Array:
        """Tag-qualified packed voxel ids, one per table entry."""
        return qualify_packed(self.tags, pack_keys(self.keys))


def qualify_packed(tag_index, packed) -> Array:
    """Combine a grid-tag index and packed voxel key into one int64 id."""
    tag = np.asarray(tag_index, dtype=np.int64)
    if np.any(tag < 0) or np.any(tag >= (1 << (62 - _TAG_SHIFT))):
        raise ValueError("tag index out of packable range")
    return (tag << _TAG_SHIFT) | np.asarray(packed, dtype=np.int64)


def unqualify_packed(qualified) -> tuple[Array, Array]:
    """Split qualified ids back into (tag index, packed key) arrays."""
    q = np.asarray(qualified, dtype=np.int64)
    return q >> _TAG_SHIFT, q & ((1 << _TAG_SHIFT) - 1)


def _traverse_grid(origins: Array, dirs: Array, grid: SparseVoxelGrid,
                   max_range: float) -> tuple[Array, Array, Array]:
    """Vectorized integer voxel traversal of many rays through one grid.

    Rays are in the grid's own frame; directions unit length. Returns
    (hit mask, (N, 3) keys, entry distances). The voxel containing the ray
    origin is never reported (entry distance would be zero).
    """
    n = len(origins)
    hit = np.zeros(n, dtype=bool)
    hit_keys = np.zeros((n, 3), dtype=np.int64)
    hit_t = np.full(n, np.inf)
    occupied = grid.packed_keys()
    if len(occupied) == 0:
        return hit, hit_keys, hit_t

    vs = grid.voxel_size
    moving = dirs != 0.0
    safe = np.where(moving, dirs, 1.0)

    # Slab test against the occupied bounding box: rays that miss it are done
    # immediately; the rest fast-forward to one voxel before entry and stop
    # at their box exit.
    lo, hi = grid.bounds()
    with np.errstate(invalid="ignore"):
        t0 = np.where(moving, (lo - origins) / safe, -np.inf)
        t1 = np.where(moving, (hi - origins) / safe, np.inf)
    # A ray parallel to an axis with its origin outside that slab never
    # meets the box: force t_enter to +inf for it.
    never = (~moving) & ((origins < lo) | (origins > hi))
    t0[never] = np.inf
    t1[never] = np.inf
    t_enter = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    t_exit = np.minimum(np.maximum(t0, t1).min(axis=1), max_range)
    active = t_exit >= t_enter
    t_stop = t_exit + vs  # slack so boundary hits at the exit are not lost

    t_offset = np.where(active, np.maximum(t_enter - vs, 0.0), 0.0)
    start = origins + t_offset[:, None] * dirs

    cur = np.floor(start / vs).astype(np.int64)
    step = np.sign(dirs).astype(np.int64)
    next_boundary = (cur + (step > 0)) * vs
    tmax = np.where(moving, (next_boundary - start) / safe, np.inf)
    tdelta = np.where(moving, vs / np.abs(safe), np.inf)

    rows = np.arange(n)
    while active.any():
        ai = rows[active]
        axis = np.argmin(tmax[ai], axis=1)
        t_new = t_offset[ai] + tmax[ai, axis]
        cur[ai, axis] += step[ai, axis]
        tmax[ai, axis] += tdelta[ai, axis]
        out_of_range = t_new > t_stop[ai]
        if out_of_range.any():
            active[ai[out_of_range]] = False
            ai = ai[~out_of_range]
            t_new = t_new[~out_of_range]
        if len(ai) == 0:
            continue
        k = cur[ai]
        packed = (((k[:, 0] + _KEY_OFFSET) << (2 * _KEY_BITS))
                  | ((k[:, 1] + _KEY_OFFSET) << _KEY_BITS)
                  | (k[:, 2] + _KEY_OFFSET))
        pos = np.searchsorted(occupied, packed)
        pos_clipped = np.minimum(pos, len(occupied) - 1)
        is_hit = (occupied[pos_clipped] == packed) & (t_new <= max_range)
        if is_hit.any():
            hi_rows = ai[is_hit]
            hit[hi_rows] = True
            hit_keys[hi_rows] = cur[hi_rows]
            hit_t[hi_rows] = t_new[is_hit]
            active[hi_rows] = False
    return hit, hit_keys, hit_t


def raycast_table(background: SparseVoxelGrid,
                  foreground: Mapping[int, SparseVoxelGrid],
                  foreground_poses: Mapping[int, Pose],
                  cam_pose: Pose,
                  intrinsics: CameraIntrinsics,
                  max_range: float = 100.0) -> TableSlice:
    """March a ray through every pixel and record the nearest occupied voxel.

    cam_pose maps the camera frame into the world frame. Foreground grids are
    traversed in their own body frames via the per-frame pose. Equal-distance
    ties go to foreground over background, then to the lowest object id.
    """
    for oid in foreground:
        if oid not in foreground_poses:
            raise ValueError(f"missing pose for foreground grid object {oid}")
    h, w = intrinsics.height, intrinsics.width
    us, vs_ = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([us.ravel(), vs_.ravel()], axis=1).astype(np.int64)
    dirs_cam = intrinsics.pixel_rays(pixels.astype(np.float64))
    origins_world = np.tile(cam_pose.translation, (len(pixels), 1))
    dirs_world = dirs_cam @ cam_pose.rotation.T

    tag_names = [BACKGROUND_TAG] + [object_tag(oid) for oid in sorted(foreground)]
    n = len(pixels)
    best_t = np.full(n, np.inf)
    best_tag = np.full(n, -1, dtype=np.int64)
    best_key = np.zeros((n, 3), dtype=np.int64)

    grids: list[tuple[int, SparseVoxelGrid, Pose | None]] = [(0, background, None)]
    for idx, oid in enumerate(sorted(foreground), start=1):
        grids.append((idx, foreground[oid], foreground_poses[oid]))

    # Iterate background first, then foreground in ascending object id; the
    # strict ">" on equal distances lets later (foreground, lower-id-first)
    # grids take precedence over background while keeping the first
    # foreground winner on exact foreground-foreground ties.
    for tag_idx, grid, pose in grids:
        if pose is None:
            o, d = origins_world, dirs_world
        else:
            inv = pose.invert()
            o = inv.apply(origins_world)
            d = dirs_world @ inv.rotation.T
        hit, keys, t = _traverse_grid(o, d, grid, max_range)
        if tag_idx == 0:
            better = hit & (t < best_t)
        else:
            better = hit & ((t < best_t) | ((t == best_t) & (best_tag == 0)))
        best_t[better] = t[better]
        best_tag[better] = tag_idx
        best_key[better] = keys[better]

    found = (best_tag >= 0) & (best_t > 0)
    return TableSlice(pixels[found], best_tag[found], best_key[found],
                      best_t[found], tuple(tag_names))


def _so3_exp(w: Array) -> Array:
    """Rodrigues formula: rotation matrix for an axis-angle 3-vector."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        k = _skew(w)
        return np.eye(3) + k + 0.5 * k @ k
    axis = w / theta
    k = _skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def _skew(v: Array) -> Array:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _orthonormalize(m: Array) -> Array:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def _reproject(points_world: Array, r: Array, t: Array,
               intrinsics: CameraIntrinsics) -> tuple[Array, Array]:
    cam = points_world @ r.T + t
    z = cam[:, 2]
    u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return np.stack([u, v], axis=1), cam


def solve_pnp(correspondences, intrinsics: CameraIntrinsics,
              max_iterations: int = 30) -> tuple[Pose, float]:
    """World-to-camera pose from 3D-2D correspondences.

    DLT on normalized coordinates seeds a Gauss-Newton refinement of the
    reprojection error over SE(3). Returns the pose and the mean reprojection
    error in pixels. Requires >= 6 non-degenerate correspondences.
    """
    pts = np.asarray([c[0] for c in correspondences], dtype=np.float64)
    uv = np.asarray([c[1] for c in correspondences], dtype=np.float64)
    n = len(pts)
    if n < 6:
        raise ValueError(f"need at least 6 correspondences, got {n}")

    xn = np.stack([(uv[:, 0] - intrinsics.cx) / intrinsics.fx,
                   (uv[:, 1] - intrinsics.cy) / intrinsics.fy], axis=1)

    # Hartley conditioning of the 3D points.
    centroid = pts.mean(axis=0)
    spread = np.linalg.norm(pts - centroid, axis=1).mean()
    scale = np.sqrt(3.0) / spread if spread > 0 else 1.0
    xh = np.hstack([(pts - centroid) * scale, np.ones((n, 1))])

    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -xn[:, 0:1] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -xn[:, 1:2] * xh
    _, s, vt = np.linalg.svd(a)
    if s[10] < 1e-9 * s[0]:
        raise ValueError(
            "degenerate correspondences: the linear system is rank-deficient "
            "(points likely coplanar or collinear)")
    p_norm = vt[-1].reshape(3, 4)
    # Undo the conditioning similarity.
    t3d = np.eye(4)
    t3d[:3, :3] *= scale
    t3d[:3, 3] = -scale * centroid
    p = p_norm @ t3d

    m = p[:, :3]
    if np.linalg.det(m) < 0:
        p = -p
        m = p[:, :3]
    sv = np.linalg.svd(m, compute_uv=False)
    m_scale = sv.mean()
    r = _orthonormalize(m / m_scale)
    t = p[:, 3] / m_scale

    # Keep points in front of the camera.
    if np.median(pts @ r.T + t, axis=0)[2] < 0:
        # 180-degree flip about the optical axis cannot fix cheirality for a
        # projective solution with this sign; negating the whole P does.
        r = _orthonormalize(-m / m_scale)
        t = -p[:, 3] / m_scale

    for _ in range(max_iterations):
        proj, cam = _reproject(pts, r, t, intrinsics)
        residual = (proj - uv).ravel()
        z = cam[:, 2]
        if np.any(z <= 1e-9):
            raise ValueError("refinement placed points behind the camera")
        # d(pixel)/d(camera point), then chain through the se(3) perturbation
        # (rotation update on the left: R <- exp(w) R).
        j = np.zeros((2 * n, 6))
        fx, fy = intrinsics.fx, intrinsics.fy
        inv_z = 1.0 / z
        du = np.stack([fx * inv_z, np.zeros(n), -fx * cam[:, 0] * inv_z ** 2], axis=1)
        dv = np.stack([np.zeros(n), fy * inv_z, -fy * cam[:, 1] * inv_z ** 2], axis=1)
        rp = cam - t  # R @ X
        for i in range(n):
            dxc_dw = -_skew(rp[i])
            j[2 * i, :3] = du[i] @ dxc_dw
            j[2 * i, 3:] = du[i]
            j[2 * i + 1, :3] = dv[i] @ dxc_dw
            j[2 * i + 1, 3:] = dv[i]
        h = j.T @ j + 1e-12 * np.eye(6)
        delta = np.linalg.solve(h, -j.T @ residual)
        r = _orthonormalize(_so3_exp(delta[:3]) @ r)
        t = t + delta[3:]
        if np.linalg.norm(delta) < 1e-14:
            break

    proj, _ = _reproject(pts, r, t, intrinsics)
    mean_err = float(np.linalg.norm(proj - uv, axis=1).mean())
    return Pose(r, t), mean_err
