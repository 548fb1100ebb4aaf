"""SE(3) poses, pinhole projection, pixel lifting, and positional encodings.

Coordinate conventions used throughout the engine:
  camera frame: +x right, +y down, +z forward; pixel u grows with +x, v with +y
  world / ego / body frames: right-handed, meters
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

Array = np.ndarray

ORTHONORMAL_TOL = 1e-9

# Default sinusoidal wavelength ladders (octave-spaced, see sinpe2d/sinpe3d).
BASE_WAVELENGTH_2D = 32.0  # pixels
BASE_WAVELENGTH_3D = 2.0   # meters


def _freeze(a: Array) -> Array:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def as_points(points) -> Array:
    """Coerce input to an (N, 3) float64 array; a bare 3-vector becomes (1, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        if pts.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {pts.shape}")
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


@dataclass(frozen=True)
class Pose:
    """Rigid transform p' = rotation @ p + translation.

    rotation must be orthonormal with determinant +1 (checked to 1e-9).
    """

    rotation: Array
    translation: Array

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        ortho_err = np.abs(r.T @ r - np.eye(3)).max()
        det_err = abs(np.linalg.det(r) - 1.0)
        if ortho_err > ORTHONORMAL_TOL or det_err > ORTHONORMAL_TOL:
            raise ValueError(
                f"rotation is not orthonormal (|R^T R - I|={ortho_err:.3e}, "
                f"|det - 1|={det_err:.3e})"
            )
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return Pose(m[:3, :3], m[:3, 3])

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.asarray(translation))

    def matrix(self) -> Array:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """Return self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def invert(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> Array:
        pts = as_points(points)
        return pts @ self.rotation.T + self.translation


def se3_apply(pose: Pose, points) -> Array:
    """Apply a rigid transform to points; order preserved, shape (N, 3)."""
    return pose.apply(points)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, points_cam) -> tuple[Array, Array]:
        """Project camera-frame points; returns ((N, 2) pixels, (N,) depths).

        Callers must handle non-positive depths (behind-camera points project
        to meaningless pixels).
        """
        pts = as_points(points_cam)
        z = pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pts[:, 0] / z + self.cx
            v = self.fy * pts[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def pixel_rays(self, pixels) -> Array:
        """Unit ray directions in the camera frame through the given (u, v) pixels."""
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        d = np.stack([(px[:, 0] - self.cx) / self.fx,
                      (px[:, 1] - self.cy) / self.fy,
                      np.ones(len(px))], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                                float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class PseudoPointCloud:
    """Pixels lifted to 3D (LiDAR frame) with their source pixels and depths."""

    positions: Array  # (N, 3) meters, LiDAR frame
    pixels: Array     # (N, 2) source (u, v)
    depths: Array     # (N,) meters

    def __post_init__(self):
        if not (len(self.positions) == len(self.pixels) == len(self.depths)):
            raise ValueError("positions, pixels and depths must align")


def default_depth_bins(count: int = 8, near: float = 1.0, far: float = 60.0) -> Array:
    """Log-spaced depth hypothesis ladder used when no depth map is available."""
    if count < 1 or near <= 0 or far <= near:
        raise ValueError("need count >= 1 and 0 < near < far")
    return np.geomspace(near, far, count)


def lift_pixels(intrinsics: CameraIntrinsics, cam_to_lidar: Pose, depth) -> PseudoPointCloud:
    """Lift image pixels into the LiDAR frame.

    depth is either an (height, width) per-pixel depth map or a 1D set of
    depth bins applied to every pixel. All depths must be strictly positive.
    """
    d = np.asarray(depth, dtype=np.float64)
    h, w = intrinsics.height, intrinsics.width
    if d.ndim == 2:
        if d.shape != (h, w):
            raise ValueError(f"depth map shape {d.shape} does not match image ({h}, {w})")
        if not np.all(d > 0):
            raise ValueError("depths must be strictly positive")
        vs, us = np.mgrid[0:h, 0:w]
        pixels = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
        depths = d.ravel()
    elif d.ndim == 1:
        if not np.all(d > 0):
            raise ValueError("depths must be strictly positive")
        vs, us = np.mgrid[0:h, 0:w]
        base = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
        pixels = np.repeat(base, len(d), axis=0)
        depths = np.tile(d, h * w)
    else:
        raise ValueError("depth must be a 2D map or a 1D bin set")

    x = (pixels[:, 0] - intrinsics.cx) / intrinsics.fx * depths
    y = (pixels[:, 1] - intrinsics.cy) / intrinsics.fy * depths
    cam_pts = np.stack([x, y, depths], axis=1)
    return PseudoPointCloud(cam_to_lidar.apply(cam_pts), pixels, depths)


@dataclass(frozen=True)
class PosEncoding:
    """Positional encoding vector with a provenance tag."""

    vector: Array
    tag: str  # sinusoidal-2d | sinusoidal-3d | mlp | composed

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("encoding entries must be finite")
        object.__setattr__(self, "vector", _freeze(v))

    @property
    def dim(self) -> int:
        return len(self.vector)


def _sin_bands(values: Array, n_pairs: int, base_wavelength: float, amplitude: float) -> Array:
    """Interleaved sin/cos bands over an octave-spaced wavelength ladder.

    Band k uses wavelength base_wavelength * 2**k, so shifting the input by
    one wavelength leaves that band unchanged. Returns (N, 2 * n_pairs).
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    wavelengths = base_wavelength * (2.0 ** np.arange(n_pairs))
    phase = 2.0 * np.pi * values / wavelengths
    out = np.empty((len(values), 2 * n_pairs))
    out[:, 0::2] = amplitude * np.sin(phase)
    out[:, 1::2] = amplitude * np.cos(phase)
    return out


def sinpe2d_many(pixels, d: int, base_wavelength: float = BASE_WAVELENGTH_2D,
                 amplitude: float = 1.0) -> Array:
    """Sinusoidal encodings for (N, 2) pixel coordinates; returns (N, d)."""
    if d <= 0 or d % 4 != 0:
        raise ValueError(f"2D sinusoidal dimension must be a positive multiple of 4, got {d}")
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n_pairs = d // 4
    return np.concatenate(
        [_sin_bands(px[:, a], n_pairs, base_wavelength, amplitude) for a in range(2)], axis=1)


def sinpe3d_many(points, d: int, base_wavelength: float = BASE_WAVELENGTH_3D,
                 amplitude: float = 1.0) -> Array:
    """Sinusoidal encodings for (N, 3) positions; returns (N, d)."""
    if d <= 0 or d % 6 != 0:
        raise ValueError(f"3D sinusoidal dimension must be a positive multiple of 6, got {d}")
    pts = as_points(points)
    n_pairs = d // 6
    return np.concatenate(
        [_sin_bands(pts[:, a], n_pairs, base_wavelength, amplitude) for a in range(3)], axis=1)


def sinpe2d(u: float, v: float, d: int, base_wavelength: float = BASE_WAVELENGTH_2D,
            amplitude: float = 1.0) -> PosEncoding:
    """Two-axis sinusoidal encoding of a pixel; layout [u-bands..., v-bands...]."""
    vec = sinpe2d_many([[u, v]], d, base_wavelength, amplitude)[0]
    return PosEncoding(vec, "sinusoidal-2d")


def sinpe3d(x: float, y: float, z: float, d: int, base_wavelength: float = BASE_WAVELENGTH_3D,
            amplitude: float = 1.0) -> PosEncoding:
    """Three-axis sinusoidal encoding of a 3D position."""
    vec = sinpe3d_many([[x, y, z]], d, base_wavelength, amplitude)[0]
    return PosEncoding(vec, "sinusoidal-3d")


@dataclass(frozen=True)
class MlpParams:
    """Immutable feed-forward parameters; tanh is applied after every layer."""

    layer_sizes: tuple[int, ...]
    weights: tuple[Array, ...]
    biases: tuple[Array, ...]
    seed: int | None = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("weight/bias count must match layer count")
        ws, bs = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if w.shape != (sizes[i + 1], sizes[i]):
                raise ValueError(
                    f"layer {i} weight shape {w.shape} does not chain "
                    f"({sizes[i + 1]}, {sizes[i]}) expected")
            if b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} bias shape {b.shape} != ({sizes[i + 1]},)")
            ws.append(_freeze(w))
            bs.append(_freeze(b))
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @classmethod
    def seeded(cls, layer_sizes: Sequence[int], seed: int) -> "MlpParams":
        """Deterministic uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
        sizes = tuple(int(s) for s in layer_sizes)
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(sizes, tuple(ws), tuple(bs), seed=seed)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "MlpParams":
        sizes = tuple(int(s) for s in layer_sizes)
        ws = tuple(np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:]))
        bs = tuple(np.zeros(o) for o in sizes[1:])
        return cls(sizes, ws, bs)


def default_mlp(d: int, seed: int = 0) -> MlpParams:
    """Two hidden layers of width d mapping 3D positions to d-dim encodings."""
    return MlpParams.seeded((3, d, d, d), seed)


def mlp_forward(points, params: MlpParams) -> Array:
    """Evaluate the encoding MLP on (N, 3) points; returns (N, d)."""
    x = as_points(points)
    if params.layer_sizes[0] != 3:
        raise ValueError("encoding MLP must take 3D inputs")
    for w, b in zip(params.weights, params.biases):
        x = np.tanh(x @ w.T + b)
    return x


def mlp_embed(points, params: MlpParams) -> list[PosEncoding]:
    """MLP-encode each point; shared across modalities so coincident 3D
    positions receive identical encodings regardless of source sensor."""
    out = mlp_forward(points, params)
    return [PosEncoding(row, "mlp") for row in out]


def umpe_many(positions, modality: str, params: MlpParams, pixels=None,
              base_wavelength_2d: float = BASE_WAVELENGTH_2D,
              base_wavelength_3d: float = BASE_WAVELENGTH_3D,
              amplitude: float = 1.0) -> Array:
    """Composed positional encoding for a batch of tokens; returns (N, d).

    image tokens: sinusoidal over their source pixels plus the shared MLP on
    their lifted 3D positions. lidar tokens: 3D sinusoidal plus the same MLP.
    The two parts are combined by element-wise sum.
    """
    d = params.out_dim
    pts = as_points(positions)
    if modality == "image":
        if pixels is None:
            raise ValueError("image modality requires source pixels alongside lifted positions")
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        if len(px) != len(pts):
            raise ValueError("pixels and positions must align")
        sin_part = sinpe2d_many(px, d, base_wavelength_2d, amplitude)
    elif modality == "lidar":
        sin_part = sinpe3d_many(pts, d, base_wavelength_3d, amplitude)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return sin_part + mlp_forward(pts, params)


def umpe(position, modality: str, params: MlpParams, pixel=None,
         base_wavelength_2d: float = BASE_WAVELENGTH_2D,
         base_wavelength_3d: float = BASE_WAVELENGTH_3D,
         amplitude: float = 1.0) -> PosEncoding:
    """Composed encoding of one token (see umpe_many)."""
    pixels = None if pixel is None else np.asarray(pixel, dtype=np.float64).reshape(1, 2)
    vec = umpe_many(as_points(position), modality, params, pixels,
                    base_wavelength_2d, base_wavelength_3d, amplitude)[0]
    return PosEncoding(vec, "composed")
