"""Pipeline stages over a sequence manifest, with content-addressed outputs.

Each stage hashes its configuration and input digests into a key; outputs
land in out/<stage>/<key>/ and a finished stage is never recomputed, which
makes partial re-runs and interactive re-fusion cheap. Artifacts contain no
timestamps, so a rerun reproduces them byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..fusion import (
    Masklet2D,
    Masklet3D,
    VoxelMasklet,
    filter_masklet,
    make_bev_resolver,
    merge_cross_video,
    project_masklet,
    score_masklet,
    transfer_frame,
)
from ..metrics import dataset_stats, format_report
from ..protocol import (
    PerfectOracle,
    TrackSet,
    noisy_gt_oracle,
    run_offline,
    run_online,
    run_semisupervised,
)
from ..recon import (
    BACKGROUND_TAG,
    SparseVoxelGrid,
    TableSlice,
    object_tag,
    raycast_table,
    split_foreground,
)
from .config import Config
from .formats import (
    grid_debug_text,
    point_masklet_debug_json,
    read_grid,
    read_scan,
    read_table,
    read_voxel_masklet,
    write_grid,
    write_point_masklet,
    write_table,
    write_voxel_masklet,
    voxel_masklet_debug_json,
)
from .manifest import SequenceManifest, read_masklet2d

Array = np.ndarray


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_key(name: str, config_part: dict, input_digests: list[str]) -> str:
    payload = json.dumps({"stage": name, "config": config_part,
                          "inputs": sorted(input_digests)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class FusedOutputs:
    masklets: list[VoxelMasklet]
    point_masklets: dict[int, Masklet3D]
    scores: dict[int, float | None]
    index: dict[int, dict]        # merged id -> {objects, cameras}
    directory: Path | None = None


class Pipeline:
    """Stage runner bound to one manifest, config, and output root."""

    def __init__(self, manifest: SequenceManifest, config: Config, out_root: Path):
        self.manifest = manifest
        self.config = config
        self.out_root = Path(out_root)
        self._scans: list[Array] | None = None
        self._grids: dict[str, SparseVoxelGrid] | None = None
        self._tables: dict[tuple[str, int], TableSlice] | None = None
        self._masklets2d: dict[tuple[int, str], Masklet2D] | None = None

    # inputs ----------------------------------------------------------------

    def scans(self) -> list[Array]:
        if self._scans is None:
            self._scans = [read_scan(self.manifest.scan_file(f))
                           for f in range(self.manifest.frame_count)]
        return self._scans

    def masklets2d(self) -> dict[tuple[int, str], Masklet2D]:
        if self._masklets2d is None:
            out = {}
            for ref in self.manifest.masklets:
                out[(ref.object_id, ref.camera_id)] = read_masklet2d(
                    self.manifest.masklet_file(ref))
            self._masklets2d = out
        return self._masklets2d

    def _scan_digests(self) -> list[str]:
        return [file_digest(self.manifest.scan_file(f))
                for f in range(self.manifest.frame_count)]

    def _stage_dir(self, name: str, key: str) -> tuple[Path, bool]:
        d = self.out_root / name / key
        done = (d / "stage.json").is_file()
        d.mkdir(parents=True, exist_ok=True)
        return d, done

    def _finish(self, d: Path, name: str, key: str, extra: dict | None = None) -> None:
        payload = {"stage": name, "key": key}
        payload.update(extra or {})
        (d / "stage.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    # reconstruct -------------------------------------------------------------

    def reconstruct(self) -> dict[str, SparseVoxelGrid]:
        if self._grids is not None:
            return self._grids
        cfg = {"voxel_size": self.manifest.voxel_size}
        key = stage_key("reconstruct", cfg, self._scan_digests())
        d, done = self._stage_dir("reconstruct", key)
        if done:
            grids = {}
            for p in sorted(d.glob("*.grid")):
                g = read_grid(p)
                grids[g.frame_tag] = g
            self._grids = grids
            return grids

        vs = self.manifest.voxel_size
        background = SparseVoxelGrid(vs, BACKGROUND_TAG)
        foreground = {b.object_id: SparseVoxelGrid(vs, object_tag(b.object_id))
                      for b in self.manifest.objects}
        for f in range(self.manifest.frame_count):
            boxes = [b for b in self.manifest.objects if f in b.poses]
            bg_pts, fg_pts = split_foreground(
                self.scans()[f], self.manifest.ego_poses[f], boxes, f)
            background.integrate(bg_pts)
            for oid, pts in fg_pts.items():
                foreground[oid].integrate(pts)
        grids = {BACKGROUND_TAG: background}
        grids.update({object_tag(oid): g for oid, g in foreground.items()})

        write_grid(d / "background.grid", background)
        (d / "background.txt").write_text(grid_debug_text(background))
        for oid, g in sorted(foreground.items()):
            write_grid(d / f"object_{oid:04d}.grid", g)
            (d / f"object_{oid:04d}.txt").write_text(grid_debug_text(g))
        self._finish(d, "reconstruct", key,
                     {"grids": sorted(grids), "voxel_count": {t: len(g) for t, g in sorted(grids.items())}})
        self._grids = grids
        return grids

    # raycast -----------------------------------------------------------------

    def raycast(self) -> dict[tuple[str, int], TableSlice]:
        if self._tables is not None:
            return self._tables
        grids = self.reconstruct()
        cfg = {"voxel_size": self.manifest.voxel_size,
               "max_range": self.config.engine.max_range}
        key = stage_key("raycast", cfg, self._scan_digests())
        d, done = self._stage_dir("raycast", key)
        if done:
            tables = {}
            for p in sorted(d.glob("*.table")):
                cam, frame, sl = read_table(p)
                tables[(cam, frame)] = sl
            self._tables = tables
            return tables

        background = grids[BACKGROUND_TAG]
        foreground = {b.object_id: grids[object_tag(b.object_id)]
                      for b in self.manifest.objects}
        tables: dict[tuple[str, int], TableSlice] = {}
        for f in range(self.manifest.frame_count):
            fg_poses = {b.object_id: b.poses[f]
                        for b in self.manifest.objects if f in b.poses}
            fg_here = {oid: g for oid, g in foreground.items() if oid in fg_poses}
            for cam_id, spec in sorted(self.manifest.cameras.items()):
                cam_pose = self.manifest.camera_world_pose(cam_id, f)
                sl = raycast_table(background, fg_here, fg_poses, cam_pose,
                                   spec.intrinsics, self.config.engine.max_range)
                tables[(cam_id, f)] = sl
                write_table(d / f"{cam_id}_{f:04d}.table", cam_id, f, sl)
        self._finish(d, "raycast", key, {"slices": len(tables)})
        self._tables = tables
        return tables

    # fuse ----------------------------------------------------------------------

    def _reference_poses(self) -> dict[str, object]:
        refs = {}
        for b in self.manifest.objects:
            first = min(b.poses)
            refs[object_tag(b.object_id)] = b.poses[first]
        return refs

    def fuse(self, write: bool = True) -> FusedOutputs:
        grids = self.reconstruct()
        tables = self.raycast()
        fus = self.config.fusion
        cfg = {"eps": fus.eps, "min_pts": fus.min_pts,
               "vote_rate_threshold": fus.vote_rate_threshold,
               "overlap_threshold": fus.overlap_threshold,
               "transfer_radius_voxels": fus.transfer_radius_voxels,
               "voxel_size": self.manifest.voxel_size}
        digests = self._scan_digests() + [
            file_digest(self.manifest.masklet_file(r)) for r in self.manifest.masklets]
        key = stage_key("fuse", cfg, digests)
        d, done = self._stage_dir("fuse", key) if write else (None, False)

        bev_of = make_bev_resolver(grids, self._reference_poses())
        projections: list[VoxelMasklet] = []
        provenance: dict[int, tuple[int, str]] = {}
        for internal, ((oid, cam), m2d) in enumerate(sorted(self.masklets2d().items())):
            table = {f: tables[(cam, f)] for f in m2d.frames if (cam, f) in tables}
            vm = project_masklet(m2d, table, bev_of)
            vm.masklet_id = internal
            provenance[internal] = (oid, cam)
            res = filter_masklet(vm, fus.eps, fus.min_pts, fus.vote_rate_threshold)
            projections.append(res.masklet)

        merged, id_map = merge_cross_video(projections, fus.overlap_threshold)

        index: dict[int, dict] = {}
        for vm in merged:
            members = [provenance[i] for i, m in id_map.items() if m == vm.masklet_id]
            index[vm.masklet_id] = {
                "objects": sorted({o for o, _ in members}),
                "cameras": sorted({c for _, c in members}),
            }

        visibility = {
            img: frozenset(
                (sl.tag_names[t], (int(k[0]), int(k[1]), int(k[2])))
                for t, k in zip(sl.tags, sl.keys))
            for img, sl in tables.items()
        }
        scores: dict[int, float | None] = {}
        for vm in merged:
            scores[vm.masklet_id] = score_masklet(vm, vm.image_votes, visibility).score

        radius = fus.transfer_radius(self.manifest.voxel_size)
        frames_acc: dict[int, dict[int, Array]] = {vm.masklet_id: {} for vm in merged}
        for f in range(self.manifest.frame_count):
            world = self.manifest.ego_poses[f].apply(self.scans()[f])
            frame_poses = {object_tag(b.object_id): b.poses[f]
                           for b in self.manifest.objects if f in b.poses}
            assign = transfer_frame(merged, world, grids, frame_poses, radius)
            for mid, idx in assign.items():
                frames_acc[mid][f] = idx
        point_masklets = {mid: Masklet3D(mid, frames)
                          for mid, frames in frames_acc.items()}

        out = FusedOutputs(merged, point_masklets, scores, index, d)
        if write and not done:
            for vm in merged:
                write_voxel_masklet(d / f"masklet_{vm.masklet_id:04d}.vm", vm)
                (d / f"masklet_{vm.masklet_id:04d}.json").write_text(
                    voxel_masklet_debug_json(vm) + "\n")
                write_point_masklet(d / f"masklet_{vm.masklet_id:04d}.pm",
                                    point_masklets[vm.masklet_id])
                (d / f"masklet_{vm.masklet_id:04d}.pm.json").write_text(
                    point_masklet_debug_json(point_masklets[vm.masklet_id]) + "\n")
            (d / "scores.json").write_text(json.dumps(
                {str(k): scores[k] for k in sorted(scores)}, indent=2, sort_keys=True) + "\n")
            (d / "index.json").write_text(json.dumps(
                {str(k): index[k] for k in sorted(index)}, indent=2, sort_keys=True) + "\n")
            self._finish(d, "fuse", key, {"masklets": len(merged)})
        return out

    # stats -----------------------------------------------------------------------

    def stats(self) -> dict:
        fused = self.fuse()
        records = []
        for vm in fused.masklets:
            members = fused.index[vm.masklet_id]
            frames: dict[int, dict] = {}
            for f in range(self.manifest.frame_count):
                areas = {}
                for oid in members["objects"]:
                    for cam in members["cameras"]:
                        m2d = self.masklets2d().get((oid, cam))
                        if m2d is not None and f in m2d.frames:
                            areas[cam] = areas.get(cam, 0) + int(m2d.frames[f].sum())
                pm = fused.point_masklets.get(vm.masklet_id)
                lidar_n = len(pm.frames.get(f, ())) if pm else 0
                frames[f] = {"image_area": areas, "lidar_points": lidar_n}
            records.append({
                "masklet_id": vm.masklet_id,
                "volume_voxels": len(vm),
                "score": fused.scores[vm.masklet_id],
                "frames": frames,
            })
        return dataset_stats(records, self.manifest.frame_count,
                             sorted(self.manifest.cameras))

    # eval ------------------------------------------------------------------------

    def trackset(self, camera_id: str | None = None) -> TrackSet:
        """Protocol ground truth: manifest 2D masklets plus fused point masklets."""
        fused = self.fuse()
        cam = camera_id or sorted(self.manifest.cameras)[0]
        spec = self.manifest.cameras[cam]
        object_to_merged = {}
        for mid, members in fused.index.items():
            for oid in members["objects"]:
                object_to_merged[oid] = mid
        objects: dict[int, dict[int, dict[str, object]]] = {}
        for (oid, cam_id), m2d in self.masklets2d().items():
            if cam_id != cam:
                continue
            mid = object_to_merged.get(oid)
            pm = fused.point_masklets.get(mid) if mid is not None else None
            frames = {}
            for f in range(self.manifest.frame_count):
                entry: dict[str, object] = {}
                if f in m2d.frames:
                    entry["image"] = m2d.frames[f]
                if pm is not None and f in pm.frames:
                    entry["lidar"] = pm.frames[f]
                frames[f] = entry
            objects[oid] = frames
        lidar_points = {f: self.scans()[f] for f in range(self.manifest.frame_count)}
        return TrackSet(self.manifest.frame_count,
                        (spec.intrinsics.height, spec.intrinsics.width),
                        objects, lidar_points)

    def evaluate(self, protocol: str, oracle_kind: str = "perfect",
                 iou_threshold: float | None = None,
                 frame_budget: int | None = None,
                 prompt_kind: str = "click", n_clicks: int = 3) -> dict:
        gt = self.trackset()
        pcfg = self.config.protocol
        if oracle_kind == "perfect":
            oracle = PerfectOracle(gt)
        elif oracle_kind == "noisy":
            oracle = noisy_gt_oracle(gt, pcfg.oracle_seed, pcfg.corruption_rate,
                                     pcfg.corruption_magnitude)
        else:
            raise ValueError(f"unknown oracle {oracle_kind!r}")
        threshold = pcfg.iou_threshold if iou_threshold is None else iou_threshold
        budget = pcfg.frame_budget if frame_budget is None else frame_budget

        if protocol == "offline":
            result = run_offline(oracle, gt, clicks_per_prompt=pcfg.clicks_per_prompt,
                                 frame_budget=budget)
        elif protocol == "online":
            result = run_online(oracle, gt, clicks_per_prompt=pcfg.clicks_per_prompt,
                                iou_threshold=threshold, frame_budget=budget)
        elif protocol == "semisupervised":
            result = run_semisupervised(oracle, gt, prompt_kind=prompt_kind,
                                        n_clicks=n_clicks)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")

        payload = {
            "protocol": result.protocol,
            "metadata": {**result.metadata, "oracle": oracle_kind,
                         "oracle_seed": pcfg.oracle_seed,
                         "corruption_rate": pcfg.corruption_rate},
            "report": result.report,
            "round_mean_iou": result.round_mean_iou,
            "prompted_frames": {str(k): v for k, v in result.prompted_frames.items()},
            "prompt_log": result.prompt_log,
        }
        payload["report_text"] = format_report(result.report)
        return payload
