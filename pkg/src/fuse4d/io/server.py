"""Review service: inspect fused masklets, tune fusion parameters, re-fuse,
and record accept/reject verdicts.

All endpoints live under /api/v1/ and return versioned JSON. Parameter
mutations are atomic (single lock); only one re-fuse job runs at a time, a
concurrent request gets a busy status. The verdict log is append-only
JSON-lines.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from .config import FusionSection
from .pipeline import FusedOutputs, Pipeline
from .rle import rle_encode

API_VERSION = 1

PARAMETER_BOUNDS = {
    "eps": {"min": 0.01, "max": 10.0},
    "min_pts": {"min": 1, "max": 100},
    "vote_rate_threshold": {"min": 0.0, "max": 1.0},
    "overlap_threshold": {"min": 0.0, "max": 1.0},
    "transfer_radius_voxels": {"min": 0.1, "max": 10.0},
}


class ReviewState:
    """Server-side state: pipeline, live fusion parameters, verdicts."""

    def __init__(self, pipeline: Pipeline, verdict_log: Path):
        self.pipeline = pipeline
        self.verdict_log = Path(verdict_log)
        self.lock = threading.Lock()
        self.refuse_lock = threading.Lock()
        self.fused: FusedOutputs = pipeline.fuse()

    def parameters(self) -> dict:
        return asdict(self.pipeline.config.fusion)

    def set_parameters(self, updates: dict) -> dict:
        errors = {}
        current = self.parameters()
        for key, value in updates.items():
            if key not in PARAMETER_BOUNDS:
                errors[key] = "unknown parameter"
                continue
            bounds = PARAMETER_BOUNDS[key]
            try:
                value = type(current[key])(value)
            except (TypeError, ValueError):
                errors[key] = "not a number"
                continue
            if not bounds["min"] <= value <= bounds["max"]:
                errors[key] = f"must lie in [{bounds['min']}, {bounds['max']}]"
        if errors:
            raise HTTPException(status_code=422, detail=errors)
        with self.lock:
            merged = {**current, **{k: type(current[k])(v) for k, v in updates.items()}}
            self.pipeline.config.fusion = FusionSection(**merged)
        return self.parameters()

    def refuse(self) -> dict:
        if not self.refuse_lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="a re-fuse is already running")
        try:
            fused = self.pipeline.fuse(write=False)
            with self.lock:
                self.fused = fused
            return {str(k): fused.scores[k] for k in sorted(fused.scores)}
        finally:
            self.refuse_lock.release()

    def verdicts(self) -> dict[int, str]:
        out: dict[int, str] = {}
        if self.verdict_log.is_file():
            for line in self.verdict_log.read_text().splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                out[int(rec["masklet_id"])] = rec["verdict"]
        return out

    def record_verdict(self, masklet_id: int, verdict: str) -> dict:
        rec = {"masklet_id": masklet_id, "verdict": verdict, "timestamp": time.time()}
        self.verdict_log.parent.mkdir(parents=True, exist_ok=True)
        with self.lock:
            with open(self.verdict_log, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def _versioned(payload: dict) -> JSONResponse:
    return JSONResponse({"version": API_VERSION, **payload})


def create_app(pipeline: Pipeline, verdict_log: Path) -> FastAPI:
    state = ReviewState(pipeline, verdict_log)
    app = FastAPI(title="fuse4d review service")
    app.state.review = state

    manifest = pipeline.manifest

    @app.get("/api/v1/sequences")
    def sequences():
        return _versioned({"sequences": [{
            "id": manifest.sequence_id,
            "frame_count": manifest.frame_count,
            "cameras": sorted(manifest.cameras),
        }]})

    @app.get("/api/v1/sequences/{sequence_id}/frames/{frame}")
    def frame_bundle(sequence_id: str, frame: int):
        if sequence_id != manifest.sequence_id:
            raise HTTPException(status_code=404, detail="unknown sequence")
        if not 0 <= frame < manifest.frame_count:
            raise HTTPException(status_code=404, detail="frame out of range")
        fused = state.fused
        verdicts = state.verdicts()
        cameras = {}
        for cam_id, spec in sorted(manifest.cameras.items()):
            masks = []
            for vm in fused.masklets:
                members = fused.index[vm.masklet_id]
                if cam_id not in members["cameras"]:
                    continue
                combined = None
                for oid in members["objects"]:
                    m2d = pipeline.masklets2d().get((oid, cam_id))
                    if m2d is not None and frame in m2d.frames:
                        m = m2d.frames[frame]
                        combined = m if combined is None else (combined | m)
                if combined is None or not combined.any():
                    continue
                score = fused.scores[vm.masklet_id]
                masks.append({
                    "masklet_id": vm.masklet_id,
                    "rle": rle_encode(combined).to_dict(),
                    "score": score,
                    "no_score": score is None,
                    "verdict": verdicts.get(vm.masklet_id),
                })
            cameras[cam_id] = {
                "width": spec.intrinsics.width,
                "height": spec.intrinsics.height,
                "masks": masks,
            }
        lidar_masklets = []
        for vm in fused.masklets:
            pm = fused.point_masklets.get(vm.masklet_id)
            idx = pm.frames.get(frame) if pm is not None else None
            if idx is not None and len(idx):
                lidar_masklets.append({
                    "masklet_id": vm.masklet_id,
                    "indices": [int(i) for i in idx],
                })
        bev = [{
            "masklet_id": vm.masklet_id,
            "points": [[float(x), float(y)]
                       for x, y in sorted(set(vm.bev.values()))],
        } for vm in fused.masklets]
        return _versioned({
            "frame": frame,
            "cameras": cameras,
            "lidar": {"count": len(pipeline.scans()[frame]),
                      "masklets": lidar_masklets},
            "bev": bev,
        })

    @app.get("/api/v1/parameters")
    def get_parameters():
        return _versioned({"parameters": state.parameters(),
                           "bounds": PARAMETER_BOUNDS})

    @app.put("/api/v1/parameters")
    def put_parameters(updates: dict):
        return _versioned({"parameters": state.set_parameters(updates)})

    @app.post("/api/v1/refuse")
    def refuse():
        return _versioned({"scores": state.refuse()})

    @app.get("/api/v1/masklets")
    def masklets():
        fused = state.fused
        verdicts = state.verdicts()
        return _versioned({"masklets": [{
            "masklet_id": vm.masklet_id,
            "voxel_count": len(vm),
            "score": fused.scores[vm.masklet_id],
            "no_score": fused.scores[vm.masklet_id] is None,
            "objects": fused.index[vm.masklet_id]["objects"],
            "cameras": fused.index[vm.masklet_id]["cameras"],
            "verdict": verdicts.get(vm.masklet_id),
        } for vm in fused.masklets]})

    @app.post("/api/v1/masklets/{masklet_id}/verdict")
    def verdict(masklet_id: int, body: dict):
        v = body.get("verdict")
        if v not in ("accept", "reject"):
            raise HTTPException(status_code=422,
                                detail="verdict must be accept or reject")
        known = {vm.masklet_id for vm in state.fused.masklets}
        if masklet_id not in known:
            raise HTTPException(status_code=404,
                                detail=f"unknown masklet {masklet_id}")
        rec = state.record_verdict(masklet_id, v)
        return _versioned({"recorded": rec})

    frontend_dist = Path(__file__).resolve().parents[3] / "frontend" / "dist"
    if frontend_dist.is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dist, html=True), name="ui")

    return app
