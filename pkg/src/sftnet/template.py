"""Deformable object templates: triangle mesh, texture atlas, and optional rig.

A template couples the rest-shape surface with its appearance. The texture
atlas is a single unit square; per-vertex atlas coordinates realize the
piecewise-linear map from atlas points to surface points. Multi-chart objects
pack their charts into disjoint rectangles of the unit square.

On-disk layout (one directory per template):
    mesh.obj        triangle mesh with per-vertex UVs
    atlas.png       RGB texture raster
    template.json   units, chart packing, optional rig
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import mesh_edges, rotation_matrix

TEMPLATE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ChartRect:
    """Axis-aligned rectangle of the unit square that one texture chart occupies."""

    name: str
    u0: float
    v0: float
    u1: float
    v1: float


@dataclass(frozen=True)
class Joint:
    """One bone of a skeleton, positioned relative to its parent.

    `axis` is the rotation axis in the rest frame; `limits` bound the sampled
    joint angle in radians.
    """

    name: str
    parent: int
    offset: np.ndarray
    axis: np.ndarray
    limits: tuple[float, float] = (-0.5, 0.5)


@dataclass(frozen=True)
class Rig:
    """Skeleton plus per-vertex skinning weights (rows sum to 1)."""

    joints: tuple[Joint, ...]
    weights: np.ndarray  # (V, J)

    def __post_init__(self):
        for j, joint in enumerate(self.joints):
            if joint.parent >= j:
                raise ValueError(f"joint {j} must come after its parent, got parent {joint.parent}")
        if self.weights.ndim != 2 or self.weights.shape[1] != len(self.joints):
            raise ValueError(f"weights shape {self.weights.shape} does not match joint count")
        if not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("skinning weights must sum to 1 per vertex")


@dataclass(frozen=True)
class Template:
    """Rest-shape triangle mesh with a texture atlas.

    vertices: (V, 3) positions in mm; faces: (F, 3) vertex indices;
    atlas_uv: (V, 2) coordinates in [0,1]^2; texture: (H, W, 3) uint8.
    """

    vertices: np.ndarray
    faces: np.ndarray
    atlas_uv: np.ndarray
    texture: np.ndarray
    charts: tuple[ChartRect, ...] = ()
    rig: Rig | None = None
    name: str = "template"
    units: str = "mm"
    _edges: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.faces.ndim != 2 or self.faces.shape[1] != 3 or len(self.faces) < 1:
            raise ValueError("template needs at least one triangle face")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValueError("face indices out of range")
        if self.atlas_uv.shape != (len(self.vertices), 2):
            raise ValueError(f"atlas_uv shape {self.atlas_uv.shape} does not match vertex count")
        if np.any(self.atlas_uv < 0) or np.any(self.atlas_uv > 1):
            raise ValueError("atlas coordinates must lie in [0,1]^2")
        if self.rig is not None and self.rig.weights.shape[0] != len(self.vertices):
            raise ValueError("rig weight rows must match vertex count")

    @property
    def edges(self) -> np.ndarray:
        if self._edges is None:
            object.__setattr__(self, "_edges", mesh_edges(self.faces))
        return self._edges

    @property
    def face_uv(self) -> np.ndarray:
        """(F, 3, 2) atlas coordinates of each face's corners."""
        return self.atlas_uv[self.faces]


class AtlasLookupError(KeyError):
    pass


class AtlasIndex:
    """Point-in-triangle lookup over the atlas: realizes the atlas -> surface map.

    Uses a uniform grid over [0,1]^2 binning the uv triangles, so queries stay
    cheap even for dense meshes.
    """

    def __init__(self, template: Template, grid: int = 64):
        self.template = template
        self.grid = grid
        uv = template.face_uv
        self._cells: dict[tuple[int, int], list[int]] = {}
        lo = np.clip((uv.min(axis=1) * grid).astype(int), 0, grid - 1)
        hi = np.clip((uv.max(axis=1) * grid).astype(int), 0, grid - 1)
        for f in range(len(uv)):
            for i in range(lo[f, 0], hi[f, 0] + 1):
                for j in range(lo[f, 1], hi[f, 1] + 1):
                    self._cells.setdefault((i, j), []).append(f)

    def candidate_faces(self, point: np.ndarray) -> list[int]:
        i = min(max(int(point[0] * self.grid), 0), self.grid - 1)
        j = min(max(int(point[1] * self.grid), 0), self.grid - 1)
        return self._cells.get((i, j), [])

    def locate(self, point, tol: float = 1e-9) -> tuple[int, np.ndarray]:
        """Face index and barycentric coordinates of an atlas point.

        Raises AtlasLookupError when the point lies in no chart.
        """
        point = np.asarray(point, dtype=float)
        best = None
        for f in self.candidate_faces(point):
            bary = barycentric_2d(self.template.face_uv[f], point)
            if bary is None:
                continue
            short = bary.min()
            if short >= -tol and (best is None or short > best[1].min()):
                best = (f, bary)
        if best is None:
            raise AtlasLookupError(f"atlas point {point} lies in no chart")
        return best

    def surface_points(self, points: np.ndarray, vertices: np.ndarray | None = None) -> np.ndarray:
        """Map atlas points to surface points of `vertices` (rest shape by default)."""
        vertices = self.template.vertices if vertices is None else vertices
        out = np.empty((len(points), 3))
        for k, p in enumerate(points):
            f, bary = self.locate(p)
            out[k] = bary @ vertices[self.template.faces[f]]
        return out


def barycentric_2d(tri: np.ndarray, point: np.ndarray) -> np.ndarray | None:
    """Barycentric coordinates of a 2D point in a 2D triangle; None if degenerate."""
    a, b, c = tri
    m = np.column_stack([b - a, c - a])
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < 1e-14:
        return None
    rhs = point - a
    l1 = (rhs[0] * m[1, 1] - rhs[1] * m[0, 1]) / det
    l2 = (m[0, 0] * rhs[1] - m[1, 0] * rhs[0]) / det
    return np.array([1.0 - l1 - l2, l1, l2])


def validate_atlas_injective(template: Template, samples: int = 2000, seed: int = 0) -> None:
    """Check by sampling that no two faces claim the same interior atlas point."""
    rng = np.random.default_rng(seed)
    index = AtlasIndex(template)
    pts = rng.random((samples, 2))
    interior = 1e-7
    for p in pts:
        owners = []
        for f in index.candidate_faces(p):
            bary = barycentric_2d(template.face_uv[f], p)
            if bary is not None and bary.min() > interior:
                owners.append(f)
        if len(owners) > 1:
            raise ValueError(
                f"atlas is not injective: faces {owners} overlap at atlas point {p}"
            )


# ---------------------------------------------------------------------------
# persistence


def save_template(template: Template, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_obj(directory / "mesh.obj", template)
    Image.fromarray(template.texture).save(directory / "atlas.png")
    meta = {
        "format_version": TEMPLATE_FORMAT_VERSION,
        "name": template.name,
        "units": template.units,
        "charts": [vars(c) for c in template.charts],
        "rig": _rig_to_json(template.rig),
    }
    (directory / "template.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_template(directory) -> Template:
    directory = Path(directory)
    vertices, faces, uv = _read_obj(directory / "mesh.obj")
    texture = np.asarray(Image.open(directory / "atlas.png").convert("RGB"))
    meta = json.loads((directory / "template.json").read_text())
    charts = tuple(ChartRect(**c) for c in meta.get("charts", []))
    template = Template(
        vertices=vertices,
        faces=faces,
        atlas_uv=uv,
        texture=texture,
        charts=charts,
        rig=_rig_from_json(meta.get("rig")),
        name=meta.get("name", directory.name),
        units=meta.get("units", "mm"),
    )
    validate_atlas_injective(template, samples=500)
    return template


def _write_obj(path: Path, template: Template) -> None:
    lines = [f"# {template.name}", "o template"]
    for v in template.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in template.atlas_uv:
        lines.append(f"vt {t[0]:.9g} {t[1]:.9g}")
    for f in template.faces:
        lines.append(f"f {f[0]+1}/{f[0]+1} {f[1]+1}/{f[1]+1} {f[2]+1}/{f[2]+1}")
    path.write_text("\n".join(lines) + "\n")


def _read_obj(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    vertices, uvs, faces = [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            corner_ids = []
            for corner in parts[1:4]:
                ids = corner.split("/")
                vi = int(ids[0]) - 1
                if len(ids) > 1 and ids[1] and int(ids[1]) - 1 != vi:
                    raise ValueError(f"{path}: per-vertex UVs required (v/vt indices differ)")
                corner_ids.append(vi)
            faces.append(corner_ids)
    if len(uvs) != len(vertices):
        raise ValueError(f"{path}: expected one vt per vertex, got {len(uvs)} vs {len(vertices)}")
    return (
        np.asarray(vertices, dtype=float),
        np.asarray(faces, dtype=int),
        np.asarray(uvs, dtype=float),
    )


def _rig_to_json(rig: Rig | None):
    if rig is None:
        return None
    return {
        "joints": [
            {
                "name": j.name,
                "parent": j.parent,
                "offset": j.offset.tolist(),
                "axis": j.axis.tolist(),
                "limits": list(j.limits),
            }
            for j in rig.joints
        ],
        "weights": rig.weights.tolist(),
    }


def _rig_from_json(data) -> Rig | None:
    if data is None:
        return None
    joints = tuple(
        Joint(
            name=j["name"],
            parent=j["parent"],
            offset=np.asarray(j["offset"], dtype=float),
            axis=np.asarray(j["axis"], dtype=float),
            limits=tuple(j["limits"]),
        )
        for j in data["joints"]
    )
    return Rig(joints=joints, weights=np.asarray(data["weights"], dtype=float))


# ---------------------------------------------------------------------------
# procedural templates (desk-scale stand-ins for scanned assets)


def make_texture(size: int = 256, seed: int = 0, cells: int = 8) -> np.ndarray:
    """Smoothly varying random RGB texture with a grid overlay.

    Gives the renderer enough structure to make registration learnable.
    """
    rng = np.random.default_rng(seed)
    coarse = rng.random((cells + 1, cells + 1, 3))
    ys = np.linspace(0, cells, size)
    xs = np.linspace(0, cells, size)
    yi = np.minimum(ys.astype(int), cells - 1)
    xi = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - yi)[:, None, None]
    fx = (xs - xi)[None, :, None]
    c00 = coarse[yi][:, xi]
    c01 = coarse[yi][:, xi + 1]
    c10 = coarse[yi + 1][:, xi]
    c11 = coarse[yi + 1][:, xi + 1]
    img = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
    # dark grid lines every cell boundary for high-frequency detail
    step = size // cells
    img[::step, :, :] *= 0.35
    img[:, ::step, :] *= 0.35
    return (img * 255).astype(np.uint8)


def make_sheet_template(
    rows: int = 12,
    cols: int = 16,
    width_mm: float = 297.0,
    height_mm: float = 210.0,
    texture_size: int = 256,
    seed: int = 0,
) -> Template:
    """Flat rectangular sheet (thin-shell, open 2-manifold), e.g. a paper page.

    Lies in the z=0 plane centered at the origin; the atlas is the full unit
    square.
    """
    ys, xs = np.mgrid[0:rows, 0:cols]
    u = xs / (cols - 1)
    v = ys / (rows - 1)
    vertices = np.stack(
        [(u - 0.5) * width_mm, (v - 0.5) * height_mm, np.zeros_like(u)], axis=-1
    ).reshape(-1, 3)
    uv = np.stack([u, v], axis=-1).reshape(-1, 2)
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            b = a + 1
            d = a + cols
            e = d + 1
            faces.append([a, b, d])
            faces.append([b, e, d])
    return Template(
        vertices=vertices,
        faces=np.asarray(faces, dtype=int),
        atlas_uv=uv,
        texture=make_texture(texture_size, seed=seed),
        charts=(ChartRect("sheet", 0.0, 0.0, 1.0, 1.0),),
        name="sheet",
    )


def make_cylinder_template(
    segments: int = 16,
    rings: int = 9,
    radius_mm: float = 40.0,
    length_mm: float = 160.0,
    texture_size: int = 256,
    seed: int = 0,
) -> Template:
    """Capped cylinder (volumetric, closed surface) with a three-bone rig.

    Charts: the unrolled side wall in the lower half of the atlas, the two cap
    disks packed side by side in the upper half. The rig is a chain of three
    joints along the cylinder axis with smooth skinning falloff.
    """
    vertices, uv = [], []
    # side wall: (rings) x (segments + 1) grid, seam duplicated for clean UVs
    for r in range(rings):
        z = (r / (rings - 1) - 0.5) * length_mm
        for s in range(segments + 1):
            a = 2 * np.pi * s / segments
            vertices.append([radius_mm * np.cos(a), radius_mm * np.sin(a), z])
            uv.append([s / segments, 0.02 + 0.44 * r / (rings - 1)])
    side_count = rings * (segments + 1)
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a = r * (segments + 1) + s
            b = a + 1
            d = a + segments + 1
            e = d + 1
            faces.append([a, b, d])
            faces.append([b, e, d])

    def add_cap(z: float, center_uv, flip: bool) -> None:
        center = len(vertices)
        vertices.append([0.0, 0.0, z])
        uv.append(list(center_uv))
        ring_start = len(vertices)
        cap_r = 0.2
        for s in range(segments):
            a = 2 * np.pi * s / segments
            vertices.append([radius_mm * np.cos(a), radius_mm * np.sin(a), z])
            uv.append([center_uv[0] + cap_r * np.cos(a), center_uv[1] + cap_r * np.sin(a)])
        for s in range(segments):
            i = ring_start + s
            j = ring_start + (s + 1) % segments
            faces.append([center, j, i] if flip else [center, i, j])

    add_cap(-0.5 * length_mm, (0.25, 0.73), flip=True)
    add_cap(+0.5 * length_mm, (0.75, 0.73), flip=False)

    vertices = np.asarray(vertices, dtype=float)
    uv = np.asarray(uv, dtype=float)

    # three-bone chain along z with smooth per-vertex falloff
    joint_z = np.array([-0.5, 0.0, 0.5]) * length_mm
    joints = (
        Joint("root", -1, np.array([0.0, 0.0, joint_z[0]]), np.array([1.0, 0.0, 0.0]),
              (-0.35, 0.35)),
        Joint("mid", 0, np.array([0.0, 0.0, joint_z[1] - joint_z[0]]),
              np.array([1.0, 0.0, 0.0]), (-0.5, 0.5)),
        Joint("tip", 1, np.array([0.0, 0.0, joint_z[2] - joint_z[1]]),
              np.array([0.0, 1.0, 0.0]), (-0.5, 0.5)),
    )
    sigma = length_mm / 3.5
    d = np.abs(vertices[:, 2:3] - joint_z[None, :])
    w = np.exp(-0.5 * (d / sigma) ** 2)
    w /= w.sum(axis=1, keepdims=True)
    rig = Rig(joints=joints, weights=w)

    return Template(
        vertices=vertices,
        faces=np.asarray(faces, dtype=int),
        atlas_uv=uv,
        texture=make_texture(texture_size, seed=seed + 1),
        charts=(
            ChartRect("side", 0.0, 0.0, 1.0, 0.5),
            ChartRect("cap_bottom", 0.0, 0.5, 0.5, 1.0),
            ChartRect("cap_top", 0.5, 0.5, 1.0, 1.0),
        ),
        rig=rig,
        name="cylinder",
    )


def deform_with_rig(template: Template, angles: np.ndarray) -> np.ndarray:
    """Linear-blend skinning of the template under per-joint rotation angles."""
    rig = template.rig
    if rig is None:
        raise ValueError(f"template '{template.name}' has no rig")
    if len(angles) != len(rig.joints):
        raise ValueError(f"expected {len(rig.joints)} angles, got {len(angles)}")
    posed, rest = [], []
    for j, joint in enumerate(rig.joints):
        r_pose = np.eye(4)
        r_pose[:3, :3] = rotation_matrix(joint.axis, float(angles[j]))
        r_pose[:3, 3] = joint.offset
        r_rest = np.eye(4)
        r_rest[:3, 3] = joint.offset
        if joint.parent >= 0:
            r_pose = posed[joint.parent] @ r_pose
            r_rest = rest[joint.parent] @ r_rest
        posed.append(r_pose)
        rest.append(r_rest)
    verts_h = np.concatenate([template.vertices, np.ones((len(template.vertices), 1))], axis=1)
    out = np.zeros_like(template.vertices)
    for j in range(len(rig.joints)):
        skin = posed[j] @ np.linalg.inv(rest[j])
        out += rig.weights[:, j:j + 1] * (verts_h @ skin.T)[:, :3]
    return out
