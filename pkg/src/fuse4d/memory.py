"""Attention kernel, motion-compensated memory attention, and the dual-FIFO bank.

Single-head attention with no residual or normalization blocks: the point of
this module is the dataflow (cross-modal exchange, ego-motion compensation,
FIFO retention), not representational capacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import (
    BASE_WAVELENGTH_2D,
    BASE_WAVELENGTH_3D,
    MlpParams,
    Pose,
    as_points,
    umpe_many,
)

Array = np.ndarray

MODALITIES = ("image", "lidar")


@dataclass(frozen=True)
class FeatureMap:
    """Per-modality tokens with their 3D positions (capture-time ego frame).

    Image tokens additionally keep their source pixels, needed to re-evaluate
    the composed positional encoding after motion compensation.
    """

    modality: str
    tokens: Array              # (N, d)
    positions: Array           # (N, 3)
    pixels: Array | None = None  # (N, 2) for image tokens

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise ValueError("tokens must be (N, d)")
        positions = as_points(self.positions) if len(self.positions) else \
            np.zeros((0, 3))
        if len(tokens) != len(positions):
            raise ValueError("token count must equal position count")
        if not np.all(np.isfinite(tokens)):
            raise ValueError("tokens must be finite")
        pixels = self.pixels
        if pixels is not None:
            pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
            if len(pixels) != len(tokens):
                raise ValueError("pixel count must equal token count")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "pixels", pixels)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Array) -> "FeatureMap":
        return FeatureMap(self.modality, tokens, self.positions, self.pixels)


def attend(queries: Array, keys: Array, values: Array, heads: int = 1) -> Array:
    """softmax(Q K^T / sqrt(d)) V with a numerically stable softmax.

    heads > 1 splits the embedding into equal column blocks attended
    independently and re-concatenated.
    """
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attend expects 2D matrices")
    if len(k) == 0:
        raise ValueError("attention over an empty key set (empty memory misuse)")
    if q.shape[1] != k.shape[1] or len(k) != len(v):
        raise ValueError(
            f"dimension mismatch: Q{q.shape} K{k.shape} V{v.shape}")
    if heads < 1 or q.shape[1] % heads or v.shape[1] % heads:
        raise ValueError(f"head count {heads} must divide the embedding dimension")
    if heads > 1:
        qs = np.split(q, heads, axis=1)
        ks = np.split(k, heads, axis=1)
        vs = np.split(v, heads, axis=1)
        return np.concatenate(
            [attend(qh, kh, vh) for qh, kh, vh in zip(qs, ks, vs)], axis=1)
    logits = q @ k.T / np.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def self_attend(fm: FeatureMap, pe: Array) -> FeatureMap:
    """Intra-modal refinement: attend(F+P, F+P, F+P); positions unchanged."""
    pe = np.asarray(pe, dtype=np.float64)
    if pe.shape != fm.tokens.shape:
        raise ValueError(f"positional encodings {pe.shape} misaligned with tokens {fm.tokens.shape}")
    x = fm.tokens + pe
    return fm.with_tokens(attend(x, x, x))


def cross_attend_modal(target: FeatureMap, source: FeatureMap, source_pe: Array) -> FeatureMap:
    """Cross-modal exchange: target tokens query the PE-tagged source tokens."""
    if target.dim != source.dim:
        raise ValueError(f"embedding dims differ: {target.dim} vs {source.dim}")
    source_pe = np.asarray(source_pe, dtype=np.float64)
    if source_pe.shape != source.tokens.shape:
        raise ValueError("source positional encodings misaligned")
    kv = source.tokens + source_pe
    return target.with_tokens(attend(target.tokens, kv, kv))


@dataclass(frozen=True)
class MemoryEntry:
    """A retained frame: per-modality features, positions, and summary tokens.

    Positions are stored in the entry's own capture-time ego frame;
    compensation into a later frame happens at query time and never mutates
    the entry.
    """

    frame_index: int
    prompted: bool
    features: Mapping[str, FeatureMap]
    summaries: Mapping[str, Array]

    def __post_init__(self):
        feats = dict(self.features)
        summs = {}
        for mod, fm in feats.items():
            if fm.modality != mod:
                raise ValueError(f"feature map modality {fm.modality!r} filed under {mod!r}")
            if mod not in self.summaries:
                raise ValueError(f"missing summary token for modality {mod!r}")
            s = np.asarray(self.summaries[mod], dtype=np.float64).reshape(-1)
            if s.shape[0] != fm.dim:
                raise ValueError("summary token dimension must match features")
            summs[mod] = s
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "summaries", summs)


def summarize_tokens(tokens: Array, inside: Array | None = None) -> Array:
    """Mean-pool (mask-interior) tokens into an object summary vector."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if inside is not None:
        inside = np.asarray(inside, dtype=bool)
        if inside.any():
            tokens = tokens[inside]
    if len(tokens) == 0:
        raise ValueError("cannot summarize zero tokens")
    return tokens.mean(axis=0)


class MemoryBank:
    """Dual FIFO store: one queue for unprompted frames, one for prompted.

    Eviction is strictly oldest-first within each queue; prompted entries are
    never displaced by unprompted pressure. Single-writer structure.
    """

    def __init__(self, unprompted_capacity: int = 6, prompted_capacity: int = 2):
        if unprompted_capacity < 0 or prompted_capacity < 0:
            raise ValueError("capacities must be non-negative")
        self.unprompted_capacity = unprompted_capacity
        self.prompted_capacity = prompted_capacity
        self._unprompted: list[MemoryEntry] = []
        self._prompted: list[MemoryEntry] = []

    def push(self, entry: MemoryEntry) -> "MemoryBank":
        queue, cap = ((self._prompted, self.prompted_capacity) if entry.prompted
                      else (self._unprompted, self.unprompted_capacity))
        queue.append(entry)
        while len(queue) > cap:
            queue.pop(0)
        return self

    def entries(self) -> tuple[MemoryEntry, ...]:
        """All retained entries, unprompted queue first, insertion order within each."""
        return tuple(self._unprompted) + tuple(self._prompted)

    @property
    def unprompted(self) -> tuple[MemoryEntry, ...]:
        return tuple(self._unprompted)

    @property
    def prompted(self) -> tuple[MemoryEntry, ...]:
        return tuple(self._prompted)

    def __len__(self) -> int:
        return len(self._unprompted) + len(self._prompted)


def bank_push(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    """Append an entry to the queue matching its prompted flag (FIFO eviction)."""
    return bank.push(entry)


def compensate_memory(entry: MemoryEntry, ego_motion: Pose, mlp: MlpParams,
                      base_wavelength_2d: float = BASE_WAVELENGTH_2D,
                      base_wavelength_3d: float = BASE_WAVELENGTH_3D,
                      amplitude: float = 1.0) -> dict[str, Array]:
    """Re-express a stored entry in the current frame.

    ego_motion maps the entry's capture frame into the current one; stored
    positions are transformed and re-encoded, and the encoding is added onto
    the stored features. The entry itself is never mutated.
    """
    out: dict[str, Array] = {}
    for mod, fm in entry.features.items():
        moved = ego_motion.apply(fm.positions) if len(fm) else fm.positions
        phi = umpe_many(moved, mod, mlp, pixels=fm.pixels,
                        base_wavelength_2d=base_wavelength_2d,
                        base_wavelength_3d=base_wavelength_3d,
                        amplitude=amplitude) if len(fm) else np.zeros_like(fm.tokens)
        out[mod] = fm.tokens + phi
    return out


def temporal_attend(current: FeatureMap, bank: MemoryBank,
                    ego_motions: Sequence[Pose], mlp: MlpParams,
                    base_wavelength_2d: float = BASE_WAVELENGTH_2D,
                    base_wavelength_3d: float = BASE_WAVELENGTH_3D,
                    amplitude: float = 1.0) -> FeatureMap:
    """Update current features against the motion-compensated memory.

    Keys/values concatenate, over every bank entry (both queues), the
    compensated features of the current modality followed by that modality's
    object summary token. Summary tokens carry no positional encoding. An
    empty bank returns the input unchanged (first-frame behavior).
    """
    entries = bank.entries()
    if len(ego_motions) != len(entries):
        raise ValueError(
            f"need one ego motion per bank entry ({len(entries)}), got {len(ego_motions)}")
    if not entries:
        return current
    blocks = []
    for entry, motion in zip(entries, ego_motions):
        if current.modality not in entry.features:
            raise ValueError(f"bank entry frame {entry.frame_index} lacks "
                             f"modality {current.modality!r}")
        comp = compensate_memory(entry, motion, mlp,
                                 base_wavelength_2d, base_wavelength_3d,
                                 amplitude)[current.modality]
        blocks.append(comp)
        blocks.append(entry.summaries[current.modality].reshape(1, -1))
    kv = np.concatenate(blocks, axis=0)
    return current.with_tokens(attend(current.tokens, kv, kv))


def attention_pass(img: FeatureMap, lidar: FeatureMap, img_pe: Array, lidar_pe: Array,
              bank: MemoryBank, ego_motions: Sequence[Pose], mlp: MlpParams,
              **enc_kwargs) -> tuple[FeatureMap, FeatureMap]:
    """One full pass: self-attention, cross-modal attention, temporal attention.

    With an empty bank this reduces to the first two stages.
    """
    img1 = self_attend(img, img_pe)
    lid1 = self_attend(lidar, lidar_pe)
    img2 = cross_attend_modal(img1, lid1, lidar_pe)
    lid2 = cross_attend_modal(lid1, img1, img_pe)
    img3 = temporal_attend(img2, bank, ego_motions, mlp, **enc_kwargs)
    lid3 = temporal_attend(lid2, bank, ego_motions, mlp, **enc_kwargs)
    return img3, lid3
