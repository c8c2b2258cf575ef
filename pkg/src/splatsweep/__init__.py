"""Gaussian splat fitting, mesh extraction and elevation-sweep experiments."""

from .camera import Camera, Intrinsics, OrbitSpec, orbit_camera
from .gsmath import GaussianCloud
from .rasterizer import RasterSettings, render, render_backward

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "GaussianCloud",
    "Intrinsics",
    "OrbitSpec",
    "RasterSettings",
    "orbit_camera",
    "render",
    "render_backward",
]
