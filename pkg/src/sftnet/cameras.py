"""Intrinsics of a few common cameras, used in demos and tests.

The default training camera is the Kinect V2 color camera rescaled to the
network resolution (its native 1920x1080 divided by 4).
"""

from .geometry import NETWORK_HEIGHT, NETWORK_WIDTH, PerspectiveCamera

KINECT_V2 = PerspectiveCamera(
    f_u=1057.8, f_v=1064.0, c_u=947.64, c_v=530.38, width=1920, height=1080
)

REALSENSE_D435 = PerspectiveCamera(
    f_u=915.457, f_v=915.457, c_u=645.511, c_v=366.344, width=1270, height=720
)

GOPRO_HERO3 = PerspectiveCamera(
    f_u=1686.8, f_v=1694.2, c_u=952.8, c_v=563.5, width=1920, height=1080
)

DEFAULT_TRAINING_CAMERA = KINECT_V2.scaled(NETWORK_WIDTH, NETWORK_HEIGHT)
