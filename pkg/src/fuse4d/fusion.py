"""Cross-modal masklet fusion: pixels to voxels to LiDAR points.

A masklet's 2D masks vote on the voxels their pixels map to; the vote rate of
a voxel is votes / observations, both binarized per frame so a voxel can
collect at most one of each per (camera, frame). BEV clustering keeps only
the cluster with the highest mean vote rate, overlapping masklets from
different cameras merge, and the surviving voxels transfer to per-frame
LiDAR points by distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose
from .recon import BACKGROUND_TAG, TableSlice, object_tag

Array = np.ndarray

VoxelId = tuple[str, tuple[int, int, int]]

NOISE = -1


@dataclass(frozen=True)
class Masklet2D:
    """Per-object, per-camera track of binary masks, one per frame."""

    object_id: int
    camera_id: str
    frames: Mapping[int, Array]  # frame -> (H, W) bool

    def __post_init__(self):
        frames = {}
        for f, m in self.frames.items():
            m = np.asarray(m, dtype=bool)
            if m.ndim != 2:
                raise ValueError("masks must be 2D")
            frames[int(f)] = m
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class Masklet3D:
    """Per-frame LiDAR point indices belonging to one masklet."""

    masklet_id: int
    frames: Mapping[int, Array]  # frame -> sorted unique indices

    def __post_init__(self):
        frames = {}
        for f, idx in self.frames.items():
            idx = np.asarray(idx, dtype=np.int64).reshape(-1)
            uniq = np.unique(idx)
            if len(uniq) != len(idx):
                raise ValueError(f"duplicate point indices in frame {f}")
            frames[int(f)] = uniq
        object.__setattr__(self, "frames", frames)


@dataclass
class VoxelMasklet:
    """Voted voxels of one masklet with per-voxel vote bookkeeping.

    votes[v] counts frames in which some masked pixel mapped to v;
    observations[v] counts frames in which v was visible at all (some ray hit
    it), restricted to frames of the cameras that produced this masklet.
    image_votes keeps the raw per-image voted voxel sets for later scoring.
    """

    masklet_id: int
    cameras: frozenset[str]
    votes: dict[VoxelId, int] = field(default_factory=dict)
    observations: dict[VoxelId, int] = field(default_factory=dict)
    bev: dict[VoxelId, tuple[float, float]] = field(default_factory=dict)
    image_votes: dict[tuple[str, int], frozenset[VoxelId]] = field(default_factory=dict)

    def ordered_voxels(self) -> list[VoxelId]:
        return sorted(self.votes)

    def voxel_set(self) -> frozenset[VoxelId]:
        return frozenset(self.votes)

    def vote_rate(self, v: VoxelId) -> float:
        return self.votes[v] / self.observations[v]

    def vote_rates(self) -> dict[VoxelId, float]:
        return {v: self.vote_rate(v) for v in self.votes}

    def bev_positions(self, order: Sequence[VoxelId] | None = None) -> Array:
        order = self.ordered_voxels() if order is None else order
        return np.array([self.bev[v] for v in order], dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.votes)


def project_masklet(masklet: Masklet2D, table: Mapping[int, TableSlice],
                    bev_of: Callable[[VoxelId], tuple[float, float]]) -> VoxelMasklet:
    """Vote the masklet's pixels onto voxels through the pixel-voxel table.

    table maps each frame of the masklet to that (camera, frame) slice;
    bev_of resolves a voxel id to its clustering coordinates. Votes and
    observations are binarized per frame; observations cover every frame in
    which a voted voxel is visible (two passes).
    """
    missing = [f for f in masklet.frames if f not in table]
    if missing:
        raise ValueError(
            f"table lacks slices for camera {masklet.camera_id!r} frames {sorted(missing)}")

    vm = VoxelMasklet(masklet.object_id, frozenset([masklet.camera_id]))
    per_frame_voted: dict[int, set[VoxelId]] = {}
    for f, mask in sorted(masklet.frames.items()):
        sl = table[f]
        if len(sl) == 0:
            per_frame_voted[f] = set()
            vm.image_votes[(masklet.camera_id, f)] = frozenset()
            continue
        inside = mask[sl.pixels[:, 1], sl.pixels[:, 0]]
        voted = {
            (sl.tag_names[t], (int(k[0]), int(k[1]), int(k[2])))
            for t, k in zip(sl.tags[inside], sl.keys[inside])
        }
        per_frame_voted[f] = voted
        vm.image_votes[(masklet.camera_id, f)] = frozenset(voted)
        for v in voted:
            vm.votes[v] = vm.votes.get(v, 0) + 1

    # Second pass: observation counts for the voted voxels over every frame
    # where they were visible.
    voted_all = set(vm.votes)
    for f in sorted(masklet.frames):
        sl = table[f]
        if len(sl) == 0:
            continue
        seen = {
            (sl.tag_names[t], (int(k[0]), int(k[1]), int(k[2])))
            for t, k in zip(sl.tags, sl.keys)
        }
        for v in seen & voted_all:
            vm.observations[v] = vm.observations.get(v, 0) + 1

    for v in vm.ordered_voxels():
        vm.bev[v] = tuple(float(c) for c in bev_of(v))
    return vm


def make_bev_resolver(grids: Mapping[str, "object"],
                      reference_poses: Mapping[str, Pose]) -> Callable[[VoxelId], tuple[float, float]]:
    """BEV coordinates for clustering: world (x, y) of the voxel center.

    Background voxels use their world centers directly; foreground voxels map
    their body centers through the object's pose at a canonical reference
    frame, keeping a moving object's voxels rigidly compact.
    """
    def bev_of(v: VoxelId) -> tuple[float, float]:
        tag, key = v
        grid = grids[tag]
        center = grid.center(np.asarray(key))
        if tag != BACKGROUND_TAG:
            center = reference_poses[tag].apply(center)[0]
        return float(center[0]), float(center[1])
    return bev_of


def dbscan_bev(points, eps: float, min_pts: int) -> Array:
    """Density clustering of BEV positions; returns a label per point (-1 noise).

    Semantics: a core point has >= min_pts neighbors within eps (self
    included); clusters are connected components of the core-core adjacency
    graph; a border point joins the cluster of its canonically lowest core
    neighbor. Points are canonically ordered (lexicographic by x, then y)
    before labeling, so the result is invariant to input permutation up to
    nothing at all: labels themselves are canonical.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels

    order = np.lexsort((pts[:, 1], pts[:, 0]))
    sorted_pts = pts[order]
    tree = cKDTree(sorted_pts)
    neighbors = tree.query_ball_point(sorted_pts, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    sorted_labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if not core[i] or sorted_labels[i] != NOISE:
            continue
        sorted_labels[i] = cluster
        frontier = [i]
        while frontier:
            j = frontier.pop()
            for k in neighbors[j]:
                if core[k] and sorted_labels[k] == NOISE:
                    sorted_labels[k] = cluster
                    frontier.append(k)
        cluster += 1

    # Border points: lowest canonical core neighbor decides.
    for i in range(n):
        if core[i] or sorted_labels[i] != NOISE:
            continue
        core_nb = [k for k in sorted(neighbors[i]) if core[k]]
        if core_nb:
            sorted_labels[i] = sorted_labels[core_nb[0]]

    labels[order] = sorted_labels
    return labels


@dataclass(frozen=True)
class FilterResult:
    masklet: VoxelMasklet
    status: str                 # "ok" | "all-noise"
    cluster_id: int | None
    mean_vote_rate: float | None


def select_main_cluster(vm: VoxelMasklet, labels) -> FilterResult:
    """Keep only the cluster with the highest mean vote rate.

    Ties break toward the larger cluster, then the lower cluster id. If every
    voxel is noise the masklet comes back empty with a flagged status.
    """
    order = vm.ordered_voxels()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(order):
        raise ValueError("labels misaligned with masklet voxels")
    stats: dict[int, list] = {}
    for v, lab in zip(order, labels):
        if lab == NOISE:
            continue
        stats.setdefault(int(lab), []).append(vm.vote_rate(v))
    if not stats:
        empty = VoxelMasklet(vm.masklet_id, vm.cameras)
        empty.image_votes.update(vm.image_votes)
        return FilterResult(empty, "all-noise", None, None)

    def rank(item):
        lab, rates = item
        return (-float(np.mean(rates)), -len(rates), lab)

    best, rates = min(stats.items(), key=rank)
    keep = {v for v, lab in zip(order, labels) if lab == best}
    out = VoxelMasklet(vm.masklet_id, vm.cameras)
    out.votes = {v: vm.votes[v] for v in keep}
    out.observations = {v: vm.observations[v] for v in keep}
    out.bev = {v: vm.bev[v] for v in keep}
    out.image_votes.update(vm.image_votes)
    return FilterResult(out, "ok", best, float(np.mean(rates)))


def apply_vote_threshold(vm: VoxelMasklet, min_rate: float) -> VoxelMasklet:
    """Drop voxels whose vote rate falls below min_rate (0 keeps everything)."""
    if not 0.0 <= min_rate <= 1.0:
        raise ValueError("vote-rate threshold must lie in [0, 1]")
    out = VoxelMasklet(vm.masklet_id, vm.cameras)
    for v in vm.ordered_voxels():
        if vm.vote_rate(v) >= min_rate:
            out.votes[v] = vm.votes[v]
            out.observations[v] = vm.observations[v]
            out.bev[v] = vm.bev[v]
    out.image_votes.update(vm.image_votes)
    return out


def filter_masklet(vm: VoxelMasklet, eps: float, min_pts: int,
                   vote_rate_threshold: float = 0.0) -> FilterResult:
    """Vote-rate pre-filter, then dbscan_bev + select_main_cluster."""
    if vote_rate_threshold > 0.0:
        vm = apply_vote_threshold(vm, vote_rate_threshold)
    if len(vm) == 0:
        empty = VoxelMasklet(vm.masklet_id, vm.cameras)
        empty.image_votes.update(vm.image_votes)
        return FilterResult(empty, "all-noise", None, None)
    labels = dbscan_bev(vm.bev_positions(), eps, min_pts)
    return select_main_cluster(vm, labels)


def voxel_iou(a: Iterable[VoxelId], b: Iterable[VoxelId]) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def merge_cross_video(masklets: Sequence[VoxelMasklet], overlap_threshold: float,
                      ) -> tuple[list[VoxelMasklet], dict[int, int]]:
    """Merge masklets from different cameras whose voxel IoU clears the threshold.

    Connected components of the overlap graph collapse into one masklet with
    votes and observations summed per voxel. Returns the merged masklets and
    an {input id: merged id} mapping. Masklets that already span several
    cameras form no new edges, so merging is idempotent.
    """
    n = len(masklets)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for i in range(n):
        for j in range(i + 1, n):
            a, b = masklets[i], masklets[j]
            if len(a.cameras) != 1 or len(b.cameras) != 1 or a.cameras == b.cameras:
                continue
            if len(a) == 0 or len(b) == 0:
                continue
            if voxel_iou(a.voxel_set(), b.voxel_set()) >= overlap_threshold:
                union(i, j)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    merged: list[VoxelMasklet] = []
    id_map: dict[int, int] = {}
    for root in sorted(groups):
        members = [masklets[i] for i in groups[root]]
        new_id = min(m.masklet_id for m in members)
        out = VoxelMasklet(new_id, frozenset().union(*[m.cameras for m in members]))
        for m in members:
            id_map[m.masklet_id] = new_id
            for v, c in m.votes.items():
                out.votes[v] = out.votes.get(v, 0) + c
            for v, c in m.observations.items():
                out.observations[v] = out.observations.get(v, 0) + c
            for v, xy in m.bev.items():
                out.bev.setdefault(v, xy)
            out.image_votes.update(m.image_votes)
        merged.append(out)
    merged.sort(key=lambda m: m.masklet_id)
    return merged, id_map


def transfer_frame(masklets: Sequence[VoxelMasklet], points_world,
                   grids: Mapping[str, "object"],
                   frame_poses: Mapping[str, Pose],
                   radius: float) -> dict[int, Array]:
    """Assign frame points to masklets by distance to the nearest masklet voxel.

    A point joins the masklet owning the closest voxel center within radius;
    each point lands in at most one masklet (ties to the lower masklet id).
    Background voxel centers are compared in the world frame, foreground
    centers through the object's pose for this frame.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    best_d = np.full(n, np.inf)
    best_m = np.full(n, -1, dtype=np.int64)
    for vm in sorted(masklets, key=lambda m: m.masklet_id):
        if len(vm) == 0:
            continue
        order = vm.ordered_voxels()
        centers = []
        for tag, key in order:
            c = grids[tag].center(np.asarray(key))
            if tag != BACKGROUND_TAG:
                c = frame_poses[tag].apply(c)[0]
            centers.append(c)
        tree = cKDTree(np.asarray(centers))
        d, _ = tree.query(pts)
        better = (d <= radius) & (d < best_d)
        best_d[better] = d[better]
        best_m[better] = vm.masklet_id
    return {
        int(mid): np.flatnonzero(best_m == mid)
        for mid in np.unique(best_m) if mid >= 0
    }


@dataclass(frozen=True)
class ScoreResult:
    score: float | None
    status: str                      # "ok" | "no-score"
    per_image: dict[tuple[str, int], float]


def score_masklet(vm: VoxelMasklet,
                  per_image_projections: Mapping[tuple[str, int], frozenset[VoxelId]],
                  visibility: Mapping[tuple[str, int], frozenset[VoxelId]]) -> ScoreResult:
    """Cross-modal quality: mean IoU between each image's projected voxels and
    the visible part of the fused masklet.

    Images where no masklet voxel is visible do not contribute. A masklet
    visible nowhere gets a distinct no-score status, not 0.
    """
    voxels = vm.voxel_set()
    per_image: dict[tuple[str, int], float] = {}
    for img, visible in visibility.items():
        visible_part = voxels & visible
        if not visible_part:
            continue
        proj = per_image_projections.get(img, frozenset())
        per_image[img] = voxel_iou(proj, visible_part)
    if not per_image:
        return ScoreResult(None, "no-score", {})
    return ScoreResult(float(np.mean(list(per_image.values()))), "ok", per_image)
