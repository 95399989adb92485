"""Deformation samples: rest pose, randomized rig poses, cloth-sim output."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import EdgeDistortionStats, edge_distortion
from ..template import Template, deform_with_rig


class UnsupportedTemplateError(ValueError):
    pass


@dataclass(frozen=True)
class DeformationSample:
    """Vertex positions of the template under one deformation.

    provenance is one of 'cloth-sim', 'rig', or 'rest'; distortion carries the
    quasi-isometry measurement against the rest shape.
    """

    deformed_vertices: np.ndarray
    provenance: str
    distortion: EdgeDistortionStats | None = None
    params: dict = field(default_factory=dict)


def rest_sample(template: Template) -> DeformationSample:
    return DeformationSample(
        deformed_vertices=template.vertices.copy(),
        provenance="rest",
        distortion=EdgeDistortionStats(0.0, 0.0, len(template.edges), 0),
    )


def sample_rig_pose(template: Template, rig=None, seed: int = 0) -> DeformationSample:
    """Draw joint angles uniformly within their limits and skin the template.

    Quasi-isometry is measured and reported, not enforced: a rig pose may
    legitimately stretch the skinned surface.
    """
    rig = rig if rig is not None else template.rig
    if rig is None:
        raise UnsupportedTemplateError(
            f"template '{template.name}' has no rig; rig-based sampling unsupported"
        )
    rng = np.random.default_rng(seed)
    angles = np.array([rng.uniform(lo, hi) for lo, hi in (j.limits for j in rig.joints)])
    verts = deform_with_rig(template, angles)
    stats = edge_distortion(template, verts)
    return DeformationSample(
        deformed_vertices=verts,
        provenance="rig",
        distortion=stats,
        params={"angles": angles.tolist()},
    )
