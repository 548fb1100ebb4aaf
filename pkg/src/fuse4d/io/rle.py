"""Run-length codec for binary masks.

Row-major runs, alternating off/on, starting with the off-run (which may be
zero). Run lengths always sum to width * height.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class RleMask:
    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.width < 0 or self.height < 0:
            raise ValueError("dimensions must be non-negative")
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValueError("run lengths must be non-negative")
        total = sum(counts)
        if total != self.width * self.height:
            raise ValueError(
                f"run lengths sum to {total}, expected {self.width * self.height}")
        object.__setattr__(self, "counts", counts)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "counts": list(self.counts)}

    @staticmethod
    def from_dict(d: dict) -> "RleMask":
        return RleMask(int(d["width"]), int(d["height"]), tuple(d["counts"]))


def rle_encode(mask) -> RleMask:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2D")
    h, w = m.shape
    flat = m.ravel()
    if flat.size == 0:
        return RleMask(w, h, (0,))
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return RleMask(w, h, tuple(counts))


def rle_decode(rle: RleMask) -> Array:
    flat = np.zeros(rle.width * rle.height, dtype=bool)
    pos = 0
    value = False
    for run in rle.counts:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(rle.height, rle.width)
