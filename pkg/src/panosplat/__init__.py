"""Panorama sliding and 3D Gaussian splat reconstruction pipeline.

Coordinate conventions used throughout the package:

  - World frame: right-handed standard basis, +y up. A unit direction
    maps to panorama angles as
        longitude = atan2(x, z),  latitude = asin(y),
    so longitude 0 is +z (forward) and latitude +pi/2 is +y (up).
  - Camera frame: +z is the optical axis, +y maps to "up" in the image,
    +x to "right" in the image. Pixel (col u, row v) has continuous
    center coordinates (u + 0.5, v + 0.5); the principal point sits at
    (width / 2, height / 2).
  - Camera poses are world-to-camera: p_cam = R @ p_world + t.
"""

from .camera import CameraIntrinsics, CameraPose
from .losses import LossReport
from .panorama import EquirectImage, PerspectiveView, ViewRotation
from .scene import Gaussian3D, SceneModel

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "EquirectImage",
    "Gaussian3D",
    "LossReport",
    "PerspectiveView",
    "SceneModel",
    "ViewRotation",
    "__version__",
]
