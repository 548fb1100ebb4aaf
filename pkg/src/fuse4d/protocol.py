"""Interactive prompting protocols driven by a pluggable segmenter oracle.

The protocols simulate an annotator refining per-object tracks: offline mode
re-prompts the globally worst frame for a fixed number of rounds, online mode
streams through the sequence prompting frames that fall below an IoU
threshold, and the semi-supervised run prompts only each object's first
frame. Oracles stand in for the segmentation model: the perfect oracle
returns ground truth, the noisy oracle corrupts it deterministically and
treats prompted frames as corrected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .metrics import EvalRecord, iou, jf_score, nmp_count

Array = np.ndarray

MODALITIES = ("image", "lidar")

CLICK_KINDS = ("positive_click", "negative_click")
PROMPT_KINDS = CLICK_KINDS + ("box", "mask")


@dataclass(frozen=True)
class Prompt:
    modality: str
    kind: str
    frame: int
    payload: tuple

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.kind not in PROMPT_KINDS:
            raise ValueError(f"unknown prompt kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"modality": self.modality, "kind": self.kind,
                "frame": self.frame, "payload": list(self.payload)}


class TrackSet:
    """Ground-truth tracks for a sequence: per-object, per-frame, per-modality.

    image masks are (H, W) bool arrays; lidar masks are index arrays into the
    frame's scan. lidar_points carries the per-frame scan positions so clicks
    and dilation-style corruption can reason geometrically.
    """

    def __init__(self, n_frames: int, image_shape: tuple[int, int],
                 objects: Mapping[int, Mapping[int, Mapping[str, object]]],
                 lidar_points: Mapping[int, Array] | None = None):
        self.n_frames = int(n_frames)
        self.image_shape = tuple(image_shape)
        self.lidar_points = {int(f): np.asarray(p, dtype=np.float64)
                             for f, p in (lidar_points or {}).items()}
        objs: dict[int, dict[int, dict[str, object]]] = {}
        for oid, frames in objects.items():
            per_frame: dict[int, dict[str, object]] = {}
            for f, masks in frames.items():
                entry: dict[str, object] = {}
                img = masks.get("image")
                if img is not None:
                    img = np.asarray(img, dtype=bool)
                    if img.shape != self.image_shape:
                        raise ValueError("image mask shape mismatch")
                    if img.any():
                        entry["image"] = img
                lid = masks.get("lidar")
                if lid is not None:
                    lid = np.unique(np.asarray(lid, dtype=np.int64))
                    if len(lid):
                        entry["lidar"] = lid
                if entry:
                    per_frame[int(f)] = entry
            objs[int(oid)] = per_frame
        self.objects = objs

    def object_ids(self) -> list[int]:
        return sorted(self.objects)

    def present_modalities(self, oid: int, frame: int) -> tuple[str, ...]:
        entry = self.objects[oid].get(frame, {})
        return tuple(m for m in MODALITIES if m in entry)

    def present_frames(self, oid: int) -> list[int]:
        return sorted(self.objects[oid])

    def first_frame(self, oid: int) -> int:
        frames = self.present_frames(oid)
        if not frames:
            raise ValueError(f"object {oid} never appears")
        return frames[0]

    def gt_mask(self, oid: int, frame: int, modality: str):
        return self.objects[oid].get(frame, {}).get(modality)


class SegmenterOracle(Protocol):
    def segment(self, object_id: int,
                prompts: Sequence[Prompt]) -> dict[int, dict[str, object]]:
        """Per-frame, per-modality masks for one object given the prompts."""
        ...


def _largest_component(mask: Array) -> Array | None:
    labels, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(2, 1))
    if n == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    best = int(np.argmax(sizes)) + 1  # argmax ties -> lowest label id
    return labels == best


def _interior_most(region: Array) -> tuple[int, int]:
    """(u, v) of the region pixel farthest from the region's boundary.

    The image border counts as boundary (the region is padded with zeros
    before the distance transform). Ties resolve in row-major scan order.
    """
    padded = np.pad(region, 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    dist = np.where(region, dist, -1.0)
    flat = int(np.argmax(dist))
    v, u = np.unravel_index(flat, region.shape)
    return int(u), int(v)


def sample_click(pred, gt, frame: int = 0, modality: str = "image") -> Prompt | None:
    """Corrective click for a 2D mask pair.

    Places a positive click at the interior-most pixel of the largest
    false-negative component, or a negative click in the largest
    false-positive component, whichever component is larger (ties positive).
    Returns None when prediction and ground truth already agree.
    """
    g = np.asarray(gt, dtype=bool)
    if not g.any():
        raise ValueError("ground truth mask is empty")
    p = np.zeros_like(g) if pred is None else np.asarray(pred, dtype=bool)
    fn = g & ~p
    fp = p & ~g
    if not fn.any() and not fp.any():
        return None
    fn_comp = _largest_component(fn)
    fp_comp = _largest_component(fp)
    fn_size = int(fn_comp.sum()) if fn_comp is not None else 0
    fp_size = int(fp_comp.sum()) if fp_comp is not None else 0
    if fn_size >= fp_size:
        u, v = _interior_most(fn_comp)
        return Prompt(modality, "positive_click", frame, (u, v))
    u, v = _interior_most(fp_comp)
    return Prompt(modality, "negative_click", frame, (u, v))


def sample_click_lidar(pred_idx, gt_idx, positions, frame: int = 0) -> Prompt | None:
    """Corrective click for a point-index mask pair.

    The error point farthest from the nearest non-error-region point wins
    (the 3D analogue of interior-most); ties go to the lowest index.
    """
    gt = set() if gt_idx is None else set(int(i) for i in np.asarray(gt_idx).ravel())
    if not gt:
        raise ValueError("ground truth mask is empty")
    pred = set() if pred_idx is None else set(int(i) for i in np.asarray(pred_idx).ravel())
    fn = sorted(gt - pred)
    fp = sorted(pred - gt)
    if not fn and not fp:
        return None
    pts = np.asarray(positions, dtype=np.float64)
    region, kind = (fn, "positive_click") if len(fn) >= len(fp) else (fp, "negative_click")
    outside = np.setdiff1d(np.arange(len(pts)), np.asarray(region))
    if len(outside) == 0:
        idx = region[0]
    else:
        d = np.linalg.norm(pts[region][:, None, :] - pts[outside][None, :, :], axis=2)
        idx = region[int(np.argmin(-d.min(axis=1)))]
    return Prompt("lidar", kind, frame, (int(idx),))


class PerfectOracle:
    """Returns ground truth regardless of prompting."""

    def __init__(self, gt: TrackSet):
        self.gt = gt

    def segment(self, object_id, prompts):
        out: dict[int, dict[str, object]] = {}
        for f, entry in self.gt.objects[object_id].items():
            out[f] = dict(entry)
        return out


class NoisyGtOracle:
    """Ground truth with a deterministic, seeded per-frame corruption schedule.

    Any prompt on a frame pins that (object, frame) to exact ground truth in
    both modalities, modeling annotator correction. Erosion and dilation back
    off their magnitude until the corrupted mask stays at or above iou_floor
    (dropping a mask ignores the floor).
    """

    def __init__(self, gt: TrackSet, seed: int, corruption_rate: float,
                 magnitude: int = 2, modes: Sequence[str] = ("erode", "dilate", "drop"),
                 iou_floor: float = 0.0):
        if not 0.0 <= corruption_rate <= 1.0:
            raise ValueError("corruption rate must lie in [0, 1]")
        bad = set(modes) - {"erode", "dilate", "drop"}
        if bad:
            raise ValueError(f"unknown corruption modes {sorted(bad)}")
        self.gt = gt
        self.seed = seed
        self.iou_floor = float(iou_floor)
        rng = np.random.default_rng(seed)
        self.schedule: dict[tuple[int, int, str], tuple[str, int]] = {}
        for oid in gt.object_ids():
            for f in gt.present_frames(oid):
                for modality in gt.present_modalities(oid, f):
                    if rng.random() < corruption_rate:
                        mode = modes[int(rng.integers(0, len(modes)))]
                        mag = int(rng.integers(1, magnitude + 1))
                        self.schedule[(oid, f, modality)] = (mode, mag)
        self._cache: dict[tuple[int, int, str], object] = {}

    def corrupted_mask(self, oid: int, frame: int, modality: str):
        """The mask this oracle emits for an unprompted frame."""
        key = (oid, frame, modality)
        gt_mask = self.gt.gt_mask(oid, frame, modality)
        if key not in self.schedule or gt_mask is None:
            return gt_mask
        if key not in self._cache:
            mode, mag = self.schedule[key]
            if modality == "image":
                self._cache[key] = self._corrupt_image(gt_mask, mode, mag)
            else:
                self._cache[key] = self._corrupt_lidar(gt_mask, mode, mag, frame)
        return self._cache[key]

    def _corrupt_image(self, mask: Array, mode: str, mag: int):
        if mode == "drop":
            return np.zeros_like(mask)
        op = ndimage.binary_erosion if mode == "erode" else ndimage.binary_dilation
        for k in range(mag, 0, -1):
            out = op(mask, iterations=k)
            if iou(out, mask) >= self.iou_floor and out.any():
                return out
        return mask.copy()

    def _corrupt_lidar(self, idx: Array, mode: str, mag: int, frame: int):
        if mode == "drop":
            return np.zeros(0, dtype=np.int64)
        pts = self.gt.lidar_points.get(frame)
        if pts is None or len(idx) == 0:
            return idx
        member = np.asarray(idx, dtype=np.int64)
        centroid = pts[member].mean(axis=0)
        for k in range(mag, 0, -1):
            delta = max(1, int(round(0.1 * k * len(member))))
            if mode == "erode":
                order = np.argsort(-np.linalg.norm(pts[member] - centroid, axis=1),
                                   kind="stable")
                out = np.sort(member[order[delta:]])
            else:
                outside = np.setdiff1d(np.arange(len(pts)), member)
                if len(outside) == 0:
                    return member
                d = np.linalg.norm(pts[outside] - centroid, axis=1)
                extra = outside[np.argsort(d, kind="stable")[:delta]]
                out = np.sort(np.concatenate([member, extra]))
            if len(out) and iou(set(out.tolist()), set(member.tolist())) >= self.iou_floor:
                return out
        return member.copy()

    def segment(self, object_id, prompts):
        prompted_frames = {p.frame for p in prompts}
        out: dict[int, dict[str, object]] = {}
        for f in self.gt.present_frames(object_id):
            entry: dict[str, object] = {}
            for modality in self.gt.present_modalities(object_id, f):
                if f in prompted_frames:
                    entry[modality] = self.gt.gt_mask(object_id, f, modality)
                else:
                    m = self.corrupted_mask(object_id, f, modality)
                    if m is not None:
                        entry[modality] = m
            out[f] = entry
        return out


def noisy_gt_oracle(gt: TrackSet, seed: int, corruption_rate: float,
                    magnitude: int = 2,
                    modes: Sequence[str] = ("erode", "dilate", "drop"),
                    iou_floor: float = 0.0) -> NoisyGtOracle:
    return NoisyGtOracle(gt, seed, corruption_rate, magnitude, modes, iou_floor)


def sample_prompt_modalities(rng) -> str:
    """Training-simulation helper: dual/camera-only/lidar-only presence mix
    with probabilities 0.5 / 0.25 / 0.25."""
    r = rng.random()
    if r < 0.5:
        return "both"
    return "image" if r < 0.75 else "lidar"


@dataclass
class ProtocolResult:
    protocol: str
    metadata: dict
    prompt_log: list[dict] = field(default_factory=list)
    per_frame_iou: dict = field(default_factory=dict)
    round_mean_iou: list[float] = field(default_factory=list)
    prompted_frames: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def prompt_trace(self) -> list[list]:
        """Canonical (round, object, frame, modality, kind) tuples for replay checks."""
        return [[p["round"], p["object"], p["frame"], p["modality"], p["kind"]]
                for p in self.prompt_log]


def _pred_of(seg: Mapping, frame: int, modality: str):
    return seg.get(frame, {}).get(modality)


def _frame_iou(gt: TrackSet, oid: int, seg: Mapping, frame: int) -> float:
    vals = []
    for modality in gt.present_modalities(oid, frame):
        vals.append(_modal_iou(gt, oid, seg, frame, modality))
    return float(np.mean(vals)) if vals else 1.0


def _modal_iou(gt: TrackSet, oid: int, seg: Mapping, frame: int, modality: str) -> float:
    gt_mask = gt.gt_mask(oid, frame, modality)
    pred = _pred_of(seg, frame, modality)
    if modality == "image":
        pred = np.zeros(gt.image_shape, dtype=bool) if pred is None else pred
        return iou(pred, gt_mask)
    pred_set = set() if pred is None else set(np.asarray(pred).ravel().tolist())
    return iou(pred_set, set(np.asarray(gt_mask).ravel().tolist()))


def _add_clicks(oracle: SegmenterOracle, gt: TrackSet, oid: int, frame: int,
                modality: str, n_clicks: int, prompts: list[Prompt],
                log: list[dict], round_no: int, cold_start: bool = False) -> int:
    """Sample up to n_clicks corrective clicks, re-segmenting between clicks.

    cold_start samples the first click against an empty prediction: the
    initial prompt is what defines the target, so there is no model output
    to correct yet.
    """
    added = 0
    for i in range(n_clicks):
        gt_mask = gt.gt_mask(oid, frame, modality)
        if gt_mask is None:
            break
        if cold_start and i == 0:
            pred = None
        else:
            seg = oracle.segment(oid, prompts)
            pred = _pred_of(seg, frame, modality)
        if modality == "image":
            click = sample_click(pred, gt_mask, frame, modality)
        else:
            click = sample_click_lidar(pred, gt_mask, gt.lidar_points[frame], frame)
        if click is None:
            break
        prompts.append(click)
        log.append({"round": round_no, "object": oid, "frame": frame,
                    "modality": click.modality, "kind": click.kind,
                    "payload": list(click.payload)})
        added += 1
    return added


def _pick_refine_modality(gt: TrackSet, oid: int, seg: Mapping, frame: int) -> str:
    """The modality with poorer segmentation gets the next prompt; ties to image."""
    present = gt.present_modalities(oid, frame)
    if len(present) == 1:
        return present[0]
    ious = {m: _modal_iou(gt, oid, seg, frame, m) for m in present}
    return min(present, key=lambda m: (ious[m], m != "image"))


def _final_report(gt: TrackSet, objects: Sequence[int],
                  preds: Mapping[int, Mapping]) -> tuple[dict, dict]:
    """Per-modality mIoU / J&F / NMP plus the per-frame IoU table."""
    records: list[EvalRecord] = []
    per_frame: dict[int, dict[int, dict[str, float]]] = {}
    for oid in objects:
        per_frame[oid] = {}
        for f in gt.present_frames(oid):
            per_frame[oid][f] = {}
            for modality in gt.present_modalities(oid, f):
                gt_mask = gt.gt_mask(oid, f, modality)
                pred = _pred_of(preds[oid], f, modality)
                if modality == "lidar":
                    pred = set() if pred is None else set(np.asarray(pred).ravel().tolist())
                    gt_cmp: object = set(np.asarray(gt_mask).ravel().tolist())
                else:
                    pred = np.zeros(gt.image_shape, dtype=bool) if pred is None else pred
                    gt_cmp = gt_mask
                records.append(EvalRecord(oid, f, modality, pred, gt_cmp, True))
                per_frame[oid][f][modality] = iou(pred, gt_cmp)

    report: dict[str, dict] = {}
    for modality in MODALITIES:
        sel = [r for r in records if r.modality == modality]
        entry: dict[str, object] = {
            "miou": float(np.mean([iou(r.pred, r.gt) for r in sel])) if sel else None,
            "nmp": nmp_count(sel),
            "jf": None,
        }
        report[modality] = entry

    jfs = []
    for oid in objects:
        frames = [f for f in gt.present_frames(oid) if gt.gt_mask(oid, f, "image") is not None]
        if not frames:
            continue
        pred_track = []
        gt_track = []
        for f in frames:
            p = _pred_of(preds[oid], f, "image")
            pred_track.append(np.zeros(gt.image_shape, dtype=bool) if p is None else p)
            gt_track.append(gt.gt_mask(oid, f, "image"))
        jfs.append(jf_score(pred_track, gt_track)[2])
    if jfs:
        report["image"]["jf"] = float(np.mean(jfs))
    return report, per_frame


def run_offline(oracle: SegmenterOracle, gt: TrackSet,
                objects: Sequence[int] | None = None, clicks_per_prompt: int = 3,
                frame_budget: int = 1) -> ProtocolResult:
    """Prompt each object's first frame, then re-prompt the lowest-IoU frame
    per round until frame_budget frames are prompted (or nothing improves)."""
    if frame_budget < 1:
        raise ValueError("frame budget must be at least 1")
    objects = gt.object_ids() if objects is None else list(objects)
    result = ProtocolResult("offline", {
        "clicks_per_prompt": clicks_per_prompt, "frame_budget": frame_budget})
    preds: dict[int, Mapping] = {}
    all_prompts: dict[int, list[Prompt]] = {}
    prompted: dict[int, list[int]] = {}

    for oid in objects:
        prompts: list[Prompt] = []
        f0 = gt.first_frame(oid)
        for modality in gt.present_modalities(oid, f0):
            _add_clicks(oracle, gt, oid, f0, modality, clicks_per_prompt,
                        prompts, result.prompt_log, round_no=1, cold_start=True)
        prompted[oid] = [f0]
        all_prompts[oid] = prompts

    round_no = 1
    while True:
        for oid in objects:
            preds[oid] = oracle.segment(oid, all_prompts[oid])
        mean_prompted = np.mean([
            _frame_iou(gt, oid, preds[oid], f)
            for oid in objects for f in prompted[oid]])
        result.round_mean_iou.append(float(mean_prompted))

        budget_left = [oid for oid in objects if len(prompted[oid]) < frame_budget]
        if not budget_left:
            break
        round_no += 1
        progressed = False
        for oid in budget_left:
            seg = preds[oid]
            frames = gt.present_frames(oid)
            worst = min(frames, key=lambda f: (_frame_iou(gt, oid, seg, f), f))
            modality = _pick_refine_modality(gt, oid, seg, worst)
            added = _add_clicks(oracle, gt, oid, worst, modality, clicks_per_prompt,
                                all_prompts[oid], result.prompt_log, round_no)
            if added:
                progressed = True
                if worst not in prompted[oid]:
                    prompted[oid].append(worst)
        if not progressed:
            break

    for oid in objects:
        preds[oid] = oracle.segment(oid, all_prompts[oid])
    result.prompted_frames = {oid: sorted(frames) for oid, frames in prompted.items()}
    result.report, result.per_frame_iou = _final_report(gt, objects, preds)
    return result


def run_online(oracle: SegmenterOracle, gt: TrackSet,
               objects: Sequence[int] | None = None, clicks_per_prompt: int = 3,
               iou_threshold: float = 0.75, frame_budget: int = 8) -> ProtocolResult:
    """Single streaming pass; prompt any frame whose IoU falls below the
    threshold while budget remains. Earlier frames are never revised."""
    if frame_budget < 1:
        raise ValueError("frame budget must be at least 1")
    objects = gt.object_ids() if objects is None else list(objects)
    result = ProtocolResult("online", {
        "clicks_per_prompt": clicks_per_prompt, "iou_threshold": iou_threshold,
        "frame_budget": frame_budget})
    streamed: dict[int, dict[int, dict[str, object]]] = {}
    prompted: dict[int, list[int]] = {}

    for oid in objects:
        prompts: list[Prompt] = []
        prompted[oid] = []
        streamed[oid] = {}
        frames = gt.present_frames(oid)
        for i, f in enumerate(frames):
            seg = oracle.segment(oid, prompts)
            needs_prompt = i == 0 or (
                _frame_iou(gt, oid, seg, f) < iou_threshold
                and len(prompted[oid]) < frame_budget)
            if needs_prompt and len(prompted[oid]) < frame_budget:
                modality_order = ([_pick_refine_modality(gt, oid, seg, f)] if i else
                                  list(gt.present_modalities(oid, f)))
                added = 0
                for modality in modality_order:
                    added += _add_clicks(oracle, gt, oid, f, modality,
                                         clicks_per_prompt, prompts,
                                         result.prompt_log, round_no=i + 1,
                                         cold_start=(i == 0))
                if added:
                    prompted[oid].append(f)
                    seg = oracle.segment(oid, prompts)
            streamed[oid][f] = dict(seg.get(f, {}))

    result.prompted_frames = {oid: frames for oid, frames in prompted.items()}
    result.report, result.per_frame_iou = _final_report(gt, objects, streamed)
    return result


def _box_prompt(gt: TrackSet, oid: int, frame: int, modality: str) -> Prompt:
    mask = gt.gt_mask(oid, frame, modality)
    if modality == "image":
        vs, us = np.nonzero(mask)
        return Prompt(modality, "box", frame,
                      (int(us.min()), int(vs.min()), int(us.max()), int(vs.max())))
    pts = gt.lidar_points[frame][np.asarray(mask)]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return Prompt(modality, "box", frame, tuple(float(x) for x in np.concatenate([lo, hi])))


def run_semisupervised(oracle: SegmenterOracle, gt: TrackSet,
                       objects: Sequence[int] | None = None,
                       prompt_kind: str = "click", n_clicks: int = 1) -> ProtocolResult:
    """First-frame prompts only, then a single propagation pass."""
    if prompt_kind not in ("click", "box", "mask"):
        raise ValueError(f"unknown prompt kind {prompt_kind!r}")
    objects = gt.object_ids() if objects is None else list(objects)
    result = ProtocolResult("semisupervised", {
        "prompt_kind": prompt_kind, "n_clicks": n_clicks})
    preds: dict[int, Mapping] = {}
    prompted: dict[int, list[int]] = {}

    for oid in objects:
        prompts: list[Prompt] = []
        f0 = gt.first_frame(oid)
        for modality in gt.present_modalities(oid, f0):
            if prompt_kind == "click":
                _add_clicks(oracle, gt, oid, f0, modality, n_clicks, prompts,
                            result.prompt_log, round_no=1, cold_start=True)
            else:
                p = (_box_prompt(gt, oid, f0, modality) if prompt_kind == "box"
                     else Prompt(modality, "mask", f0, ("gt-mask",)))
                prompts.append(p)
                result.prompt_log.append({
                    "round": 1, "object": oid, "frame": f0, "modality": modality,
                    "kind": p.kind, "payload": list(p.payload)})
        prompted[oid] = [f0]
        preds[oid] = oracle.segment(oid, prompts)

    result.prompted_frames = prompted
    result.report, result.per_frame_iou = _final_report(gt, objects, preds)
    return result
