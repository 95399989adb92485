"""Software rendering of deformed templates with dense ground truth.

rasterize_frame z-buffers the mesh at the network resolution and records, per
front-most fragment, the interpolated depth and atlas coordinate (both
perspective-correct), then shades with a Lambertian plus Phong-specular model
over the atlas texture, composited on a background image. Self-occluded
surface parts never reach the buffers.

raycast_depth_oracle is the independent cross-check: exact ray-triangle
intersection over every face, nearest positive hit.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from ..geometry import (
    DepthMap,
    PerspectiveCamera,
    WarpField,
    project_point,
    rotation_matrix,
)
from ..template import AtlasIndex, AtlasLookupError, Template
from .deformation import DeformationSample

logger = logging.getLogger(__name__)

NEAR_CLIP_MM = 1.0


@dataclass(frozen=True)
class Light:
    """Directional light in the camera frame.

    direction points from the surface toward the light; intensity scales the
    diffuse term, specular the Phong term with the given exponent.
    """

    direction: np.ndarray
    intensity: float = 1.0
    specular: float = 0.2
    shininess: float = 20.0


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera transform: x_cam = rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class SceneSample:
    """Everything needed to render one frame deterministically."""

    deformation: DeformationSample
    pose: RigidPose
    lights: tuple[Light, ...]
    background: np.ndarray  # (h, w, 3) float in [0, 1]
    ambient: float = 0.25


@dataclass(frozen=True)
class FrameRecord:
    """One rendered sample: image plus dense ground truth.

    Depth and warp share the exact same foreground mask.
    """

    rgb: np.ndarray  # (h, w, 3) float32 in [0, 1]
    depth: DepthMap
    warp: WarpField
    camera: PerspectiveCamera
    scene: SceneSample | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.array_equal(self.depth.mask, self.warp.mask):
            raise ValueError("depth and warp foreground masks must be identical")


def _camera_vertices(scene: SceneSample) -> np.ndarray:
    return scene.pose.apply(scene.deformation.deformed_vertices)


def _vertex_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    fn = np.cross(
        verts[faces[:, 1]] - verts[faces[:, 0]],
        verts[faces[:, 2]] - verts[faces[:, 0]],
    )
    normals = np.zeros_like(verts)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(lengths, 1e-12)


def _sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear texture lookup; uv in [0,1]^2, texture (H, W, 3) uint8."""
    h, w = texture.shape[:2]
    x = np.clip(uv[:, 0] * (w - 1), 0, w - 1)
    y = np.clip(uv[:, 1] * (h - 1), 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    tex = texture.astype(float) / 255.0
    top = (1 - fx) * tex[y0, x0] + fx * tex[y0, x1]
    bottom = (1 - fx) * tex[y1, x0] + fx * tex[y1, x1]
    return (1 - fy) * top + fy * bottom


def rasterize_frame(
    scene: SceneSample, template: Template, camera: PerspectiveCamera
) -> FrameRecord:
    """Render one frame and its ground-truth depth and registration maps."""
    h, w = camera.height, camera.width
    verts = _camera_vertices(scene)
    faces = template.faces

    depth_buf = np.full((h, w), np.inf)
    face_buf = np.full((h, w), -1, dtype=int)
    bary_buf = np.zeros((h, w, 3))

    z = verts[:, 2]
    px = np.full((len(verts), 2), np.nan)
    in_front = z > NEAR_CLIP_MM
    if in_front.any():
        px[in_front] = project_point(verts[in_front], camera)

    for f, tri in enumerate(faces):
        if not in_front[tri].all():
            continue  # conservatively skip faces touching the near plane
        p0, p1, p2 = px[tri]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < 1e-12:
            continue
        # pixel-center coverage over the face's bounding box
        xs0 = max(int(np.floor(min(p0[0], p1[0], p2[0]) - 0.5)), 0)
        xs1 = min(int(np.ceil(max(p0[0], p1[0], p2[0]) - 0.5)) + 1, w)
        ys0 = max(int(np.floor(min(p0[1], p1[1], p2[1]) - 0.5)), 0)
        ys1 = min(int(np.ceil(max(p0[1], p1[1], p2[1]) - 0.5)) + 1, h)
        if xs0 >= xs1 or ys0 >= ys1:
            continue
        yy, xx = np.mgrid[ys0:ys1, xs0:xs1]
        cx = xx + 0.5
        cy = yy + 0.5
        w0 = (p1[0] - cx) * (p2[1] - cy) - (p1[1] - cy) * (p2[0] - cx)
        w1 = (p2[0] - cx) * (p0[1] - cy) - (p2[1] - cy) * (p0[0] - cx)
        w2 = (p0[0] - cx) * (p1[1] - cy) - (p0[1] - cy) * (p1[0] - cx)
        lam = np.stack([w0, w1, w2], axis=-1) / area
        inside = np.all(lam >= 0.0, axis=-1)
        if not inside.any():
            continue
        zs = z[tri]
        inv_z = lam @ (1.0 / zs)
        frag_z = 1.0 / inv_z
        closer = inside & (frag_z < depth_buf[ys0:ys1, xs0:xs1])
        if not closer.any():
            continue
        sel_y = yy[closer]
        sel_x = xx[closer]
        depth_buf[sel_y, sel_x] = frag_z[closer]
        face_buf[sel_y, sel_x] = f
        # perspective-correct (surface) barycentric
        bary = lam[closer] / zs[None, :] * frag_z[closer][:, None]
        bary_buf[sel_y, sel_x] = bary

    mask = face_buf >= 0
    if not mask.any():
        warnings.warn("rendered frame has empty foreground (object out of frustum)",
                      stacklevel=2)

    background = scene.background
    if background.shape[:2] != (h, w):
        background = resize_image(background, w, h)
    rgb = background.astype(float).copy()

    depth = np.zeros((h, w))
    uv_map = np.full((h, w, 2), -1.0)

    if mask.any():
        fg_faces = face_buf[mask]
        fg_bary = bary_buf[mask]
        tri = faces[fg_faces]
        depth[mask] = depth_buf[mask]
        uv_map[mask] = np.einsum("nk,nkc->nc", fg_bary, template.atlas_uv[tri])

        # shading
        position = np.einsum("nk,nkc->nc", fg_bary, verts[tri])
        vnorm = _vertex_normals(verts, faces)
        normal = np.einsum("nk,nkc->nc", fg_bary, vnorm[tri])
        normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
        # two-sided: flip normals away from the viewing direction
        flip = np.sum(normal * position, axis=1) > 0
        normal[flip] *= -1
        view = -position / np.maximum(np.linalg.norm(position, axis=1, keepdims=True), 1e-12)

        base = _sample_texture(template.texture, np.clip(uv_map[mask], 0.0, 1.0))
        shade = np.full(len(base), scene.ambient)
        spec_total = np.zeros(len(base))
        for light in scene.lights:
            d = np.asarray(light.direction, dtype=float)
            d = d / np.linalg.norm(d)
            ndl = np.maximum(normal @ d, 0.0)
            shade += light.intensity * ndl
            reflect = 2.0 * ndl[:, None] * normal - d
            spec = np.maximum(np.sum(reflect * view, axis=1), 0.0) ** light.shininess
            spec_total += light.specular * spec * (ndl > 0)
        rgb[mask] = np.clip(base * shade[:, None] + spec_total[:, None], 0.0, 1.0)

    return FrameRecord(
        rgb=rgb.astype(np.float32),
        depth=DepthMap.from_values(depth),
        warp=WarpField.from_uv(uv_map, mask=mask),
        camera=camera,
        scene=scene,
    )


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a float [0,1] RGB array."""
    pil = Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8))
    out = pil.resize((width, height), Image.BILINEAR)
    return np.asarray(out).astype(float) / 255.0


def _ray_dirs(camera: PerspectiveCamera, pixels: np.ndarray) -> np.ndarray:
    """Unit-z ray directions through pixel centers; pixels are (row, col)."""
    u = (pixels[:, 1] + 0.5 - camera.c_u) / camera.f_u
    v = (pixels[:, 0] + 0.5 - camera.c_v) / camera.f_v
    return np.stack([u, v, np.ones_like(u)], axis=-1)


def raycast_depth_map(
    scene: SceneSample,
    template: Template,
    camera: PerspectiveCamera,
    pixels: np.ndarray,
    chunk: int = 2048,
) -> np.ndarray:
    """Exact nearest-hit depth for (N, 2) pixel (row, col) indices; NaN = miss.

    Moller-Trumbore over every triangle, vectorized pixels x faces.
    """
    verts = _camera_vertices(scene)
    tri = verts[template.faces]  # (F, 3, 3)
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    # the ray origin is the camera center, so tvec = -v0 and everything built
    # from it is constant per face
    qvec = np.cross(-v0, e1)  # (F, 3)
    t_num = np.einsum("fc,fc->f", e2, qvec)
    out = np.full(len(pixels), np.nan)
    dirs = _ray_dirs(camera, np.asarray(pixels))
    eps = 1e-12
    for start in range(0, len(dirs), chunk):
        d = dirs[start:start + chunk]  # (P, 3)
        pvec = np.cross(d[:, None, :], e2[None, :, :])  # (P, F, 3)
        det = np.einsum("fc,pfc->pf", e1, pvec)
        ok = np.abs(det) > eps
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.einsum("fc,pfc->pf", -v0, pvec) * inv_det
        v = (d @ qvec.T) * inv_det
        t = t_num[None, :] * inv_det
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > NEAR_CLIP_MM)
        t = np.where(hit, t, np.inf)
        best = t.min(axis=1)
        out[start:start + chunk] = np.where(np.isfinite(best), best, np.nan)
    return out


def raycast_depth_oracle(
    scene: SceneSample, template: Template, camera: PerspectiveCamera, pixel
) -> float | None:
    """Depth of the nearest surface point along one pixel's ray, or None."""
    d = raycast_depth_map(scene, template, camera, np.asarray([pixel]))[0]
    return None if np.isnan(d) else float(d)


def registration_consistency(
    record: FrameRecord,
    template: Template,
    max_pixels: int = 2000,
    seed: int = 0,
    atlas_index: AtlasIndex | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Round-trip check of the warp ground truth.

    For sampled foreground pixels: map the recorded atlas coordinate through
    the template to the deformed surface and reproject; returns the pixel
    reprojection errors and relative depth errors.
    """
    scene = record.scene
    if scene is None:
        raise ValueError("frame record carries no scene; cannot run consistency check")
    index = atlas_index or AtlasIndex(template)
    verts = _camera_vertices(scene)
    rows, cols = np.nonzero(record.warp.mask)
    if len(rows) == 0:
        return np.empty(0), np.empty(0)
    rng = np.random.default_rng(seed)
    if len(rows) > max_pixels:
        pick = rng.choice(len(rows), size=max_pixels, replace=False)
        rows, cols = rows[pick], cols[pick]
    px_err = np.full(len(rows), np.nan)
    depth_err = np.full(len(rows), np.nan)
    for k, (r, c) in enumerate(zip(rows, cols)):
        uv = record.warp.uv[r, c]
        try:
            face, bary = index.locate(uv, tol=1e-6)
        except AtlasLookupError:
            continue  # boundary sample fell into a packing gap
        q = bary @ verts[template.faces[face]]
        proj = project_point(q, record.camera)
        px_err[k] = np.hypot(proj[0] - (c + 0.5), proj[1] - (r + 0.5))
        depth_err[k] = abs(record.depth.values[r, c] - q[2]) / q[2]
    valid = np.isfinite(px_err)
    return px_err[valid], depth_err[valid]


# ---------------------------------------------------------------------------
# randomized scene sampling


@dataclass(frozen=True)
class ScenePlacement:
    """Ranges for randomized viewpoint, lighting, and placement."""

    max_tilt: float = 0.6           # radians of off-axis rotation
    center_jitter: float = 0.25     # fraction of the image half-extent
    depth_margin: float = 1.05      # object radius multiplier kept inside z range
    min_visible_fraction: float = 0.7
    ambient_range: tuple[float, float] = (0.15, 0.35)
    intensity_range: tuple[float, float] = (0.5, 1.1)
    specular_range: tuple[float, float] = (0.0, 0.45)
    shininess_range: tuple[float, float] = (5.0, 60.0)
    max_lights: int = 3


def sample_lights(rng: np.random.Generator, placement: ScenePlacement) -> tuple[Light, ...]:
    count = int(rng.integers(1, placement.max_lights + 1))
    lights = []
    for _ in range(count):
        d = rng.normal(size=3)
        d[2] = -abs(d[2]) - 0.2  # keep lights on the camera side
        lights.append(
            Light(
                direction=d / np.linalg.norm(d),
                intensity=float(rng.uniform(*placement.intensity_range)) / count,
                specular=float(rng.uniform(*placement.specular_range)),
                shininess=float(rng.uniform(*placement.shininess_range)),
            )
        )
    return tuple(lights)


def sample_scene(
    deformation: DeformationSample,
    camera: PerspectiveCamera,
    z_min: float,
    z_max: float,
    background: np.ndarray,
    rng: np.random.Generator,
    placement: ScenePlacement = ScenePlacement(),
    max_tries: int = 30,
) -> SceneSample:
    """Place the deformed object in the frustum with randomized pose and lights.

    Guarantees every vertex depth stays inside [z_min, z_max] and that at
    least min_visible_fraction of the vertices project inside the image.
    """
    verts = deformation.deformed_vertices
    centroid = verts.mean(axis=0)
    radius = float(np.linalg.norm(verts - centroid, axis=1).max())
    lo = z_min + placement.depth_margin * radius
    hi = z_max - placement.depth_margin * radius
    if lo >= hi:
        raise ValueError(
            f"object radius {radius:.1f}mm does not fit depth range [{z_min}, {z_max}]"
        )
    for _ in range(max_tries):
        axis = rng.normal(size=3)
        tilt = rotation_matrix(axis, rng.uniform(0.0, placement.max_tilt))
        spin = rotation_matrix([0.0, 0.0, 1.0], rng.uniform(0.0, 2 * np.pi))
        r = tilt @ spin
        d = rng.uniform(lo, hi)
        jx = rng.uniform(-placement.center_jitter, placement.center_jitter)
        jy = rng.uniform(-placement.center_jitter, placement.center_jitter)
        target_px = np.array(
            [camera.c_u + jx * camera.width / 2, camera.c_v + jy * camera.height / 2]
        )
        target = np.array(
            [
                (target_px[0] - camera.c_u) / camera.f_u * d,
                (target_px[1] - camera.c_v) / camera.f_v * d,
                d,
            ]
        )
        t = target - r @ centroid
        pose = RigidPose(rotation=r, translation=t)
        placed = pose.apply(verts)
        if placed[:, 2].min() < z_min or placed[:, 2].max() > z_max:
            continue
        pix = project_point(placed, camera)
        visible = (
            (pix[:, 0] >= 0) & (pix[:, 0] < camera.width)
            & (pix[:, 1] >= 0) & (pix[:, 1] < camera.height)
        )
        if visible.mean() < placement.min_visible_fraction:
            continue
        return SceneSample(
            deformation=deformation,
            pose=pose,
            lights=sample_lights(rng, placement),
            background=background,
            ambient=float(rng.uniform(*placement.ambient_range)),
        )
    raise RuntimeError(f"could not place object in frustum after {max_tries} tries")


def make_background_images(
    directory, count: int = 8, width: int = 480, height: int = 270, seed: int = 0
) -> list:
    """Write procedurally generated background PNGs; returns the paths."""
    from pathlib import Path

    from ..template import make_texture

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(count):
        tex = make_texture(size=max(width, height), seed=seed * 1000 + k, cells=6)
        img = Image.fromarray(tex).resize((width, height), Image.BILINEAR)
        path = directory / f"background_{k:03d}.png"
        img.save(path)
        paths.append(path)
    return paths
