"""Cameras, depth/warp grids, range normalization, and mesh distortion measures.

All types here are immutable after construction and all operations are pure
functions, so they are safe to share across threads.

Conventions used throughout the package:
  - depth is the z coordinate in the camera frame, in millimeters
  - images are (height, width, channels) arrays; the network resolution is
    fixed at 270 x 480
  - pixel (row r, col c) has continuous pixel coordinates (c + 0.5, r + 0.5)
  - retinal coordinates are pixel coordinates mapped through the inverse
    intrinsics: u = (x - c_u) / f_u, v = (y - c_v) / f_v
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NETWORK_HEIGHT = 270
NETWORK_WIDTH = 480

# Values at masked-out pixels in raw (unnormalized) depth/warp grids.
DEPTH_BACKGROUND = 0.0
WARP_BACKGROUND = -1.0


@dataclass(frozen=True)
class PerspectiveCamera:
    """Pinhole camera: focal lengths and principal point in pixels.

    Lens distortion is assumed absent (corrected upstream).
    """

    f_u: float
    f_v: float
    c_u: float
    c_v: float
    width: int
    height: int

    def __post_init__(self):
        if self.f_u <= 0 or self.f_v <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.f_u}, {self.f_v})")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"resolution must be positive, got {self.width}x{self.height}")

    def scaled(self, width: int, height: int) -> "PerspectiveCamera":
        """Intrinsics for the same camera resampled to a new resolution."""
        sx = width / self.width
        sy = height / self.height
        return PerspectiveCamera(
            f_u=self.f_u * sx,
            f_v=self.f_v * sy,
            c_u=self.c_u * sx,
            c_v=self.c_v * sy,
            width=width,
            height=height,
        )

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.f_u, 0.0, self.c_u], [0.0, self.f_v, self.c_v], [0.0, 0.0, 1.0]]
        )


def unit_camera(width: int = 1, height: int = 1) -> PerspectiveCamera:
    """Camera with f = 1 and c = 0: pixel coordinates equal retinal ones."""
    return PerspectiveCamera(1.0, 1.0, 0.0, 0.0, width, height)


def project_point(p, camera: PerspectiveCamera) -> np.ndarray:
    """Project camera-frame points onto the image: (f_u*x/z + c_u, f_v*y/z + c_v).

    Accepts a single (3,) point or an (..., 3) array. Points must have z > 0.
    """
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    behind = np.count_nonzero(z <= 0)
    if behind:
        raise ValueError(f"{behind} point(s) behind the camera (z <= 0)")
    x = camera.f_u * p[..., 0] / z + camera.c_u
    y = camera.f_v * p[..., 1] / z + camera.c_v
    return np.stack([x, y], axis=-1)


def embed(u, v, rho) -> np.ndarray:
    """Lift retinal coordinates to 3D: rho * (u, v, 1).

    Broadcasts over arrays; rho must be strictly positive.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    rho = np.asarray(rho, dtype=float)
    bad = np.count_nonzero(rho <= 0)
    if bad:
        raise ValueError(f"{bad} depth value(s) are not strictly positive")
    return np.stack(np.broadcast_arrays(rho * u, rho * v, rho * np.ones_like(u)), axis=-1)


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(h, w, 2) grid of pixel-center coordinates (x, y)."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs + 0.5, ys + 0.5], axis=-1)


def retinal_grid(camera: PerspectiveCamera) -> np.ndarray:
    """(h, w, 2) grid of retinal coordinates (u, v) at pixel centers."""
    px = pixel_centers(camera.height, camera.width)
    u = (px[..., 0] - camera.c_u) / camera.f_u
    v = (px[..., 1] - camera.c_v) / camera.f_v
    return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth (mm) with a foreground mask.

    values[p] is finite and > 0 exactly where mask[p] is true; masked-out
    pixels hold the background sentinel 0.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError(f"inconsistent shapes {self.values.shape} vs {self.mask.shape}")
        fg = self.values[self.mask]
        if fg.size and not (np.all(np.isfinite(fg)) and np.all(fg > 0)):
            raise ValueError("foreground depths must be finite and positive")
        bg = self.values[~self.mask]
        if bg.size and np.any(bg != DEPTH_BACKGROUND):
            raise ValueError("background pixels must hold the sentinel value")

    @classmethod
    def from_values(cls, values: np.ndarray) -> "DepthMap":
        """Derive the mask: finite, strictly positive depths are foreground."""
        values = np.asarray(values, dtype=float)
        mask = np.isfinite(values) & (values > 0)
        clean = np.where(mask, values, DEPTH_BACKGROUND)
        return cls(values=clean, mask=mask)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True)
class WarpField:
    """Per-pixel texture-atlas coordinates in [0,1]^2 with a foreground mask.

    Masked-out pixels hold the sentinel (-1, -1).
    """

    uv: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.uv.ndim != 3 or self.uv.shape[2] != 2 or self.uv.shape[:2] != self.mask.shape:
            raise ValueError(f"inconsistent shapes {self.uv.shape} vs {self.mask.shape}")
        fg = self.uv[self.mask]
        if fg.size and (np.any(fg < 0) or np.any(fg > 1)):
            raise ValueError("foreground atlas coordinates must lie in [0,1]^2")
        bg = self.uv[~self.mask]
        if bg.size and np.any(bg != WARP_BACKGROUND):
            raise ValueError("background pixels must hold the sentinel value")

    @classmethod
    def from_uv(cls, uv: np.ndarray, mask: np.ndarray | None = None) -> "WarpField":
        uv = np.asarray(uv, dtype=float)
        in_range = np.all((uv >= 0) & (uv <= 1), axis=-1)
        mask = in_range if mask is None else (np.asarray(mask, dtype=bool) & in_range)
        clean = np.where(mask[..., None], uv, WARP_BACKGROUND)
        return cls(uv=clean, mask=mask)

    @property
    def shape(self) -> tuple:
        return self.mask.shape


@dataclass(frozen=True)
class NormalizationSpec:
    """Invertible mapping between metric values and the network output range.

    Valid depths [z_min, z_max] (and atlas coordinates [0, 1]) map linearly
    onto [valid_low, 1]; -1 is reserved for background, so foreground and
    background separate cleanly by thresholding halfway between.
    """

    z_min: float
    z_max: float
    valid_low: float = -0.9
    background_value: float = -1.0

    def __post_init__(self):
        if not 0 < self.z_min < self.z_max:
            raise ValueError(f"need 0 < z_min < z_max, got [{self.z_min}, {self.z_max}]")
        if not -1 < self.valid_low < 1:
            raise ValueError(f"valid_low must be in (-1, 1), got {self.valid_low}")
        if self.background_value != -1.0 or self.background_value >= self.valid_low:
            raise ValueError("background value must be -1 and below valid_low")

    @property
    def segmentation_threshold(self) -> float:
        return 0.5 * (self.valid_low + self.background_value)

    @property
    def z_range(self) -> float:
        return self.z_max - self.z_min


def normalize_depth(depth: DepthMap, spec: NormalizationSpec) -> np.ndarray:
    """Map foreground depths linearly onto [valid_low, 1]; background to -1."""
    fg = depth.values[depth.mask]
    bad = np.count_nonzero((fg < spec.z_min) | (fg > spec.z_max))
    if bad:
        raise ValueError(
            f"{bad} foreground pixel(s) outside depth range [{spec.z_min}, {spec.z_max}]"
        )
    scale = (1.0 - spec.valid_low) / spec.z_range
    out = spec.valid_low + (depth.values - spec.z_min) * scale
    return np.where(depth.mask, out, spec.background_value)


def denormalize_depth(grid: np.ndarray, spec: NormalizationSpec) -> DepthMap:
    """Invert normalize_depth, thresholding background at the sentinel side."""
    grid = np.asarray(grid, dtype=float)
    mask = grid >= spec.segmentation_threshold
    z = spec.z_min + (grid - spec.valid_low) * spec.z_range / (1.0 - spec.valid_low)
    mask &= np.isfinite(z) & (z > 0)
    return DepthMap(values=np.where(mask, z, DEPTH_BACKGROUND), mask=mask)


def normalize_warp(warp: WarpField, spec: NormalizationSpec) -> np.ndarray:
    """Map foreground atlas coordinates per-channel onto [valid_low, 1]."""
    fg = warp.uv[warp.mask]
    bad = np.count_nonzero((fg < 0) | (fg > 1))
    if bad:
        raise ValueError(f"{bad} foreground coordinate(s) outside [0, 1]")
    out = spec.valid_low + warp.uv * (1.0 - spec.valid_low)
    return np.where(warp.mask[..., None], out, spec.background_value)


def denormalize_warp(grid: np.ndarray, spec: NormalizationSpec) -> WarpField:
    """Invert normalize_warp; values beyond the valid range are clipped to [0,1].

    A pixel is foreground only if both channels clear the threshold.
    """
    grid = np.asarray(grid, dtype=float)
    mask = np.all(grid >= spec.segmentation_threshold, axis=-1)
    uv = (grid - spec.valid_low) / (1.0 - spec.valid_low)
    uv = np.clip(uv, 0.0, 1.0)
    return WarpField(uv=np.where(mask[..., None], uv, WARP_BACKGROUND), mask=mask)


@dataclass(frozen=True)
class EdgeDistortionStats:
    """Relative edge-length change of a deformed mesh against its rest shape."""

    mean: float
    max: float
    edge_count: int
    skipped_count: int


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (E, 2) of a triangle list."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def edge_distortion(template, deformed_vertices: np.ndarray) -> EdgeDistortionStats:
    """Mean and max of |len(e_def) - len(e_rest)| / len(e_rest) over mesh edges.

    Degenerate (zero-length) rest edges are skipped and reported in the stats.
    """
    deformed_vertices = np.asarray(deformed_vertices, dtype=float)
    if deformed_vertices.shape != template.vertices.shape:
        raise ValueError(
            f"deformed vertices shape {deformed_vertices.shape} does not match "
            f"template {template.vertices.shape}"
        )
    edges = template.edges
    rest = np.linalg.norm(template.vertices[edges[:, 0]] - template.vertices[edges[:, 1]], axis=1)
    deformed = np.linalg.norm(
        deformed_vertices[edges[:, 0]] - deformed_vertices[edges[:, 1]], axis=1
    )
    ok = rest > 1e-12
    ratio = np.abs(deformed[ok] - rest[ok]) / rest[ok]
    if ratio.size == 0:
        return EdgeDistortionStats(0.0, 0.0, 0, int(np.count_nonzero(~ok)))
    return EdgeDistortionStats(
        mean=float(ratio.mean()),
        max=float(ratio.max()),
        edge_count=int(ratio.size),
        skipped_count=int(np.count_nonzero(~ok)),
    )


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rotation by `angle` radians about `axis` (Rodrigues formula)."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis must be non-zero")
    x, y, z = axis / n
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
