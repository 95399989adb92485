"""Dense registration and depth estimation of a known deformable template
from a single RGB image: synthetic data generation, two-stage training,
inference with 3D reconstruction, cross-camera adaptation, and evaluation."""

__version__ = "0.1.0"

from .geometry import (
    NETWORK_HEIGHT,
    NETWORK_WIDTH,
    DepthMap,
    NormalizationSpec,
    PerspectiveCamera,
    WarpField,
    denormalize_depth,
    denormalize_warp,
    edge_distortion,
    embed,
    normalize_depth,
    normalize_warp,
    project_point,
)
from .template import Template, load_template, save_template
