from .cloth import ClothConfig, ClothSimulationError, random_force_schedule, simulate_cloth
from .deformation import DeformationSample, UnsupportedTemplateError, rest_sample, sample_rig_pose
from .dataset import (
    DatagenConfig,
    DatasetManifest,
    FrameEntry,
    export_rgbd,
    generate_dataset,
    ingest_rgbd,
    load_training_arrays,
)
from .render import (
    FrameRecord,
    Light,
    RigidPose,
    SceneSample,
    make_background_images,
    rasterize_frame,
    raycast_depth_map,
    raycast_depth_oracle,
    registration_consistency,
    sample_scene,
)

__all__ = [
    "ClothConfig",
    "ClothSimulationError",
    "DatagenConfig",
    "DatasetManifest",
    "DeformationSample",
    "FrameEntry",
    "FrameRecord",
    "Light",
    "RigidPose",
    "SceneSample",
    "UnsupportedTemplateError",
    "export_rgbd",
    "generate_dataset",
    "ingest_rgbd",
    "load_training_arrays",
    "make_background_images",
    "random_force_schedule",
    "rasterize_frame",
    "raycast_depth_map",
    "raycast_depth_oracle",
    "registration_consistency",
    "rest_sample",
    "sample_rig_pose",
    "sample_scene",
    "simulate_cloth",
]
