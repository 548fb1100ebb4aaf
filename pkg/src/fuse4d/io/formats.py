"""Binary artifact codecs: scans, grid dumps, pixel-voxel tables, masklets.

Every format is little-endian with a 4-byte magic and a uint32 version, and
writes records in sorted order so identical inputs always produce identical
bytes. Masklets additionally get a JSON debug form.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..fusion import Masklet3D, VoxelMasklet
from ..recon import SparseVoxelGrid, TableSlice

SCAN_MAGIC = b"F4SC"
GRID_MAGIC = b"F4VG"
TABLE_MAGIC = b"F4PT"
VOXEL_MASKLET_MAGIC = b"F4VM"
POINT_MASKLET_MAGIC = b"F4M3"
VERSION = 1


class FormatError(ValueError):
    pass


def _check_header(data: bytes, magic: bytes, what: str) -> int:
    if data[:4] != magic:
        raise FormatError(f"not a {what} file (bad magic {data[:4]!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported {what} version {version}")
    return 8


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(data: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", data, off)
    off += 2
    return data[off:off + n].decode("utf-8"), off + n


# scans ---------------------------------------------------------------------

def write_scan(path: Path, points) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(SCAN_MAGIC + struct.pack("<II", VERSION, len(pts)))
        fh.write(pts.tobytes())


def read_scan(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    off = _check_header(data, SCAN_MAGIC, "scan")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    expected = count * 12
    if len(data) - off != expected:
        raise FormatError(f"scan payload is {len(data) - off} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", count=count * 3, offset=off
                         ).reshape(count, 3).astype(np.float64)


# voxel grids ---------------------------------------------------------------

def write_grid(path: Path, grid: SparseVoxelGrid) -> None:
    items = grid.sorted_items()
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<I", VERSION))
        fh.write(struct.pack("<d", grid.voxel_size))
        fh.write(_pack_str(grid.frame_tag))
        fh.write(struct.pack("<Q", len(items)))
        rec = np.empty(len(items), dtype="<i4, <i4, <i4, <u4")
        for i, (key, weight) in enumerate(items):
            rec[i] = (key[0], key[1], key[2], weight)
        fh.write(rec.tobytes())


def read_grid(path: Path) -> SparseVoxelGrid:
    data = Path(path).read_bytes()
    off = _check_header(data, GRID_MAGIC, "voxel grid")
    (voxel_size,) = struct.unpack_from("<d", data, off)
    off += 8
    tag, off = _unpack_str(data, off)
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    grid = SparseVoxelGrid(voxel_size, tag)
    rec = np.frombuffer(data, dtype="<i4, <i4, <i4, <u4", count=count, offset=off)
    for ix, iy, iz, w in rec:
        grid.cells[(int(ix), int(iy), int(iz))] = int(w)
    return grid


def grid_debug_text(grid: SparseVoxelGrid) -> str:
    lines = [f"voxel_size {grid.voxel_size!r}", f"frame_tag {grid.frame_tag}",
             f"count {len(grid)}"]
    for (ix, iy, iz), w in grid.sorted_items():
        lines.append(f"{ix} {iy} {iz} {w}")
    return "\n".join(lines) + "\n"


# pixel-voxel tables --------------------------------------------------------

def write_table(path: Path, camera_id: str, frame: int, sl: TableSlice) -> None:
    order = np.lexsort((sl.pixels[:, 0], sl.pixels[:, 1]))  # row-major (v, u)
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC + struct.pack("<I", VERSION))
        fh.write(_pack_str(camera_id))
        fh.write(struct.pack("<I", frame))
        fh.write(struct.pack("<H", len(sl.tag_names)))
        for t in sl.tag_names:
            fh.write(_pack_str(t))
        fh.write(struct.pack("<Q", len(sl)))
        rec = np.empty(len(sl), dtype="<i4, <i4, <u2, <i4, <i4, <i4, <f8")
        for i, j in enumerate(order):
            u, v = sl.pixels[j]
            k = sl.keys[j]
            rec[i] = (u, v, sl.tags[j], k[0], k[1], k[2], sl.distances[j])
        fh.write(rec.tobytes())


def read_table(path: Path) -> tuple[str, int, TableSlice]:
    data = Path(path).read_bytes()
    off = _check_header(data, TABLE_MAGIC, "pixel-voxel table")
    camera_id, off = _unpack_str(data, off)
    (frame,) = struct.unpack_from("<I", data, off)
    off += 4
    (n_tags,) = struct.unpack_from("<H", data, off)
    off += 2
    tags = []
    for _ in range(n_tags):
        t, off = _unpack_str(data, off)
        tags.append(t)
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    rec = np.frombuffer(data, dtype="<i4, <i4, <u2, <i4, <i4, <i4, <f8",
                        count=count, offset=off)
    pixels = np.stack([rec["f0"], rec["f1"]], axis=1).astype(np.int64)
    tag_idx = rec["f2"].astype(np.int64)
    keys = np.stack([rec["f3"], rec["f4"], rec["f5"]], axis=1).astype(np.int64)
    dists = rec["f6"].astype(np.float64)
    sl = TableSlice(pixels, tag_idx, keys, dists, tuple(tags))
    return camera_id, frame, sl


# voxel masklets ------------------------------------------------------------

def write_voxel_masklet(path: Path, vm: VoxelMasklet) -> None:
    tags = sorted({tag for tag, _ in vm.votes} |
                  {tag for img in vm.image_votes.values() for tag, _ in img})
    tag_idx = {t: i for i, t in enumerate(tags)}
    with open(path, "wb") as fh:
        fh.write(VOXEL_MASKLET_MAGIC + struct.pack("<I", VERSION))
        fh.write(struct.pack("<q", vm.masklet_id))
        cameras = sorted(vm.cameras)
        fh.write(struct.pack("<H", len(cameras)))
        for c in cameras:
            fh.write(_pack_str(c))
        fh.write(struct.pack("<H", len(tags)))
        for t in tags:
            fh.write(_pack_str(t))
        voxels = vm.ordered_voxels()
        fh.write(struct.pack("<Q", len(voxels)))
        for tag, key in voxels:
            bx, by = vm.bev[(tag, key)]
            fh.write(struct.pack("<H3i2I2d", tag_idx[tag], key[0], key[1], key[2],
                                 vm.votes[(tag, key)], vm.observations[(tag, key)],
                                 bx, by))
        images = sorted(vm.image_votes)
        fh.write(struct.pack("<I", len(images)))
        for cam, frame in images:
            fh.write(_pack_str(cam))
            fh.write(struct.pack("<I", frame))
            voted = sorted(vm.image_votes[(cam, frame)])
            fh.write(struct.pack("<Q", len(voted)))
            for tag, key in voted:
                fh.write(struct.pack("<H3i", tag_idx[tag], key[0], key[1], key[2]))


def read_voxel_masklet(path: Path) -> VoxelMasklet:
    data = Path(path).read_bytes()
    off = _check_header(data, VOXEL_MASKLET_MAGIC, "voxel masklet")
    (masklet_id,) = struct.unpack_from("<q", data, off)
    off += 8
    (n_cams,) = struct.unpack_from("<H", data, off)
    off += 2
    cameras = []
    for _ in range(n_cams):
        c, off = _unpack_str(data, off)
        cameras.append(c)
    (n_tags,) = struct.unpack_from("<H", data, off)
    off += 2
    tags = []
    for _ in range(n_tags):
        t, off = _unpack_str(data, off)
        tags.append(t)
    vm = VoxelMasklet(masklet_id, frozenset(cameras))
    (n_vox,) = struct.unpack_from("<Q", data, off)
    off += 8
    rec_size = struct.calcsize("<H3i2I2d")
    for _ in range(n_vox):
        ti, ix, iy, iz, votes, obs, bx, by = struct.unpack_from("<H3i2I2d", data, off)
        off += rec_size
        v = (tags[ti], (ix, iy, iz))
        vm.votes[v] = votes
        vm.observations[v] = obs
        vm.bev[v] = (bx, by)
    (n_images,) = struct.unpack_from("<I", data, off)
    off += 4
    vref = struct.calcsize("<H3i")
    for _ in range(n_images):
        cam, off = _unpack_str(data, off)
        (frame,) = struct.unpack_from("<I", data, off)
        off += 4
        (n_voted,) = struct.unpack_from("<Q", data, off)
        off += 8
        voted = set()
        for _ in range(n_voted):
            ti, ix, iy, iz = struct.unpack_from("<H3i", data, off)
            off += vref
            voted.add((tags[ti], (ix, iy, iz)))
        vm.image_votes[(cam, frame)] = frozenset(voted)
    return vm


def voxel_masklet_debug_json(vm: VoxelMasklet) -> str:
    return json.dumps({
        "masklet_id": vm.masklet_id,
        "cameras": sorted(vm.cameras),
        "voxels": [
            {"tag": tag, "key": list(key), "votes": vm.votes[(tag, key)],
             "observations": vm.observations[(tag, key)],
             "vote_rate": vm.vote_rate((tag, key)),
             "bev": list(vm.bev[(tag, key)])}
            for tag, key in vm.ordered_voxels()
        ],
    }, indent=2, sort_keys=True)


# point masklets ------------------------------------------------------------

def write_point_masklet(path: Path, m: Masklet3D) -> None:
    with open(path, "wb") as fh:
        fh.write(POINT_MASKLET_MAGIC + struct.pack("<I", VERSION))
        fh.write(struct.pack("<q", m.masklet_id))
        frames = sorted(m.frames)
        fh.write(struct.pack("<I", len(frames)))
        for f in frames:
            idx = np.ascontiguousarray(m.frames[f], dtype="<i8")
            fh.write(struct.pack("<IQ", f, len(idx)))
            fh.write(idx.tobytes())


def read_point_masklet(path: Path) -> Masklet3D:
    data = Path(path).read_bytes()
    off = _check_header(data, POINT_MASKLET_MAGIC, "point masklet")
    (masklet_id,) = struct.unpack_from("<q", data, off)
    off += 8
    (n_frames,) = struct.unpack_from("<I", data, off)
    off += 4
    frames = {}
    for _ in range(n_frames):
        f, count = struct.unpack_from("<IQ", data, off)
        off += 12
        frames[f] = np.frombuffer(data, dtype="<i8", count=count, offset=off).copy()
        off += count * 8
    return Masklet3D(masklet_id, frames)


def point_masklet_debug_json(m: Masklet3D) -> str:
    return json.dumps({
        "masklet_id": m.masklet_id,
        "frames": {str(f): m.frames[f].tolist() for f in sorted(m.frames)},
    }, indent=2, sort_keys=True)
