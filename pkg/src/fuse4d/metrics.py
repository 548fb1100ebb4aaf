"""Evaluation metrics and training-loss formulas.

2D masks are boolean arrays; 3D masks are point-index sets into a frame's
scan. The boundary F-measure follows the video-object-segmentation
convention: boundary pixels matched within a tolerance radius, default 0.8%
of the image diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

Array = np.ndarray

NMP_IOU_THRESHOLD = 0.01

# Composite training loss weights: focal, dice, IoU-regression L1.
FOCAL_WEIGHT = 20.0
DICE_WEIGHT = 1.0
IOU_WEIGHT = 1.0


def _as_index_set(mask) -> frozenset | None:
    if isinstance(mask, (set, frozenset)):
        return frozenset(mask)
    arr = np.asarray(mask)
    if arr.ndim == 1 and arr.dtype != bool:
        return frozenset(int(i) for i in arr)
    return None


def iou(pred, gt) -> float:
    """Intersection over union; both-empty is defined as 1.0."""
    pred_set = _as_index_set(pred)
    gt_set = _as_index_set(gt)
    if pred_set is not None or gt_set is not None:
        if pred_set is None or gt_set is None:
            raise ValueError("cannot mix index-set and array masks")
        union = len(pred_set | gt_set)
        return 1.0 if union == 0 else len(pred_set & gt_set) / union
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def mask_boundary(mask: Array) -> Array:
    """Boundary pixels: mask pixels with a 4-neighbor outside the mask.

    Pixels on the image border count as boundary when set.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.zeros_like(m)
    cross = ndimage.generate_binary_structure(2, 1)
    eroded = ndimage.binary_erosion(m, structure=cross, border_value=0)
    return m & ~eroded


def default_boundary_tolerance(shape, fraction: float = 0.008) -> int:
    h, w = shape
    return max(1, int(math.ceil(fraction * math.hypot(h, w))))


def _disk(radius: int) -> Array:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx ** 2 + yy ** 2) <= r ** 2


def boundary_f_measure(pred: Array, gt: Array, tolerance_px: int | None = None) -> float:
    """Boundary precision/recall harmonic mean with a disk tolerance."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if tolerance_px is None:
        tolerance_px = default_boundary_tolerance(p.shape)
    pb, gb = mask_boundary(p), mask_boundary(g)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    disk = _disk(tolerance_px)
    gb_dil = ndimage.binary_dilation(gb, structure=disk)
    pb_dil = ndimage.binary_dilation(pb, structure=disk)
    precision = float((pb & gb_dil).sum() / pb.sum())
    recall = float((gb & pb_dil).sum() / gb.sum())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jf_score(pred_track: Sequence[Array], gt_track: Sequence[Array],
             tolerance_px: int | None = None) -> tuple[float, float, float]:
    """Track-level (J, F, J&F): mean region IoU, mean boundary F, their mean."""
    if len(pred_track) == 0 or len(gt_track) == 0:
        raise ValueError("empty track")
    if len(pred_track) != len(gt_track):
        raise ValueError("track lengths differ")
    js = [iou(p, g) for p, g in zip(pred_track, gt_track)]
    fs = [boundary_f_measure(p, g, tolerance_px) for p, g in zip(pred_track, gt_track)]
    j, f = float(np.mean(js)), float(np.mean(fs))
    return j, f, (j + f) / 2.0


@dataclass(frozen=True)
class EvalRecord:
    """One (object, frame, modality) comparison."""

    object_id: int
    frame: int
    modality: str
    pred: object
    gt: object
    gt_present: bool = True


def nmp_count(records: Iterable[EvalRecord]) -> int:
    """Mismatched predictions: gt present but IoU strictly below 0.01."""
    count = 0
    for r in records:
        if not r.gt_present:
            continue
        if iou(r.pred, r.gt) < NMP_IOU_THRESHOLD:
            count += 1
    return count


def focal_loss(pred_probs, gt, gamma: float = 2.0, alpha: float = 0.25) -> float:
    """Mean focal loss; probabilities must lie strictly inside (0, 1)."""
    p = np.asarray(pred_probs, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("shape mismatch")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must be strictly inside (0, 1)")
    pt = np.where(g > 0.5, p, 1.0 - p)
    at = np.where(g > 0.5, alpha, 1.0 - alpha)
    return float(np.mean(-at * (1.0 - pt) ** gamma * np.log(pt)))


def dice_loss(pred_probs, gt, smooth: float = 1.0) -> float:
    """1 - 2|p.g| / (|p| + |g|) with a smoothing term in both halves."""
    p = np.asarray(pred_probs, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("shape mismatch")
    num = 2.0 * float((p * g).sum()) + smooth
    den = float(p.sum() + g.sum()) + smooth
    return 1.0 - num / den


def composite_loss(pred_probs, gt, pred_iou: float, actual_iou: float,
                   gamma: float = 2.0, alpha: float = 0.25,
                   focal_weight: float = FOCAL_WEIGHT,
                   dice_weight: float = DICE_WEIGHT,
                   iou_weight: float = IOU_WEIGHT) -> dict[str, float]:
    """Weighted mask-training loss: focal, dice, and L1 IoU regression."""
    parts = {
        "focal": focal_loss(pred_probs, gt, gamma, alpha),
        "dice": dice_loss(pred_probs, gt),
        "iou_mae": abs(float(pred_iou) - float(actual_iou)),
    }
    parts["total"] = (focal_weight * parts["focal"] + dice_weight * parts["dice"]
                      + iou_weight * parts["iou_mae"])
    return parts


def _histogram(values, bins) -> dict:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def dataset_stats(masklets: Sequence[Mapping], n_frames: int,
                  camera_ids: Sequence[str]) -> dict:
    """Corpus statistics over fused masklet records.

    Each record: {"masklet_id", "volume_voxels", "score" (float or None),
    "frames": {frame: {"image_area": {camera: px}, "lidar_points": int}}}.
    """
    n_images = n_frames * len(camera_ids)
    image_counts = 0
    scan_counts = 0
    volumes, areas, scores, cooccurrence = [], [], [], []
    for rec in masklets:
        volumes.append(int(rec["volume_voxels"]))
        if rec.get("score") is not None:
            scores.append(float(rec["score"]))
        both = either = 0
        for frame, fr in rec["frames"].items():
            areas_here = [a for a in fr.get("image_area", {}).values() if a > 0]
            in_image = bool(areas_here)
            in_lidar = fr.get("lidar_points", 0) > 0
            image_counts += len(areas_here)
            areas.extend(areas_here)
            if in_lidar:
                scan_counts += 1
            if in_image or in_lidar:
                either += 1
                if in_image and in_lidar:
                    both += 1
        if either:
            cooccurrence.append(both / either)
    return {
        "masklet_count": len(masklets),
        "masks_per_image": image_counts / n_images if n_images else 0.0,
        "masks_per_scan": scan_counts / n_frames if n_frames else 0.0,
        "volume_histogram": _histogram(volumes, bins=10) if volumes else None,
        "area_histogram": _histogram(areas, bins=10) if areas else None,
        "cooccurrence": [float(c) for c in cooccurrence],
        "mean_cooccurrence": float(np.mean(cooccurrence)) if cooccurrence else None,
        "scores": scores,
        "mean_score": float(np.mean(scores)) if scores else None,
    }


def format_report(report: Mapping[str, Mapping[str, float | int | None]]) -> str:
    """Aligned-column text table for per-modality metric reports."""
    cols = ["modality", "miou", "jf", "nmp"]
    rows = [cols]
    for modality, vals in report.items():
        row = [modality]
        for c in cols[1:]:
            v = vals.get(c)
            if v is None:
                row.append("-")
            elif isinstance(v, float):
                row.append(f"{v:.4f}")
            else:
                row.append(str(v))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
             for r in rows]
    return "\n".join(lines)
