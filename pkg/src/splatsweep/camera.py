"""Orbit cameras and pinhole projection.

World frame is right-handed with +z up. Elevation is measured from the
xy-plane: positive elevation puts the camera above the object looking down.
Camera space follows the OpenCV convention (x right, y down, z forward), and
pixel ``(i, j)`` has its centre at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class Intrinsics:
    fov_y: float = 49.1  # degrees
    width: int = 512
    height: int = 512
    near: float = 0.01
    far: float = 100.0


DEFAULT_INTRINSICS = Intrinsics()


@dataclass(frozen=True)
class OrbitSpec:
    elevation: float  # degrees
    azimuth: float  # degrees
    radius: float

    def __post_init__(self):
        if not -90.0 <= self.elevation <= 90.0:
            raise InvalidParameterError(f"elevation must be in [-90, 90], got {self.elevation}")
        if not self.radius > 0:
            raise InvalidParameterError(f"radius must be positive, got {self.radius}")


@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up_hint: np.ndarray
    fov_y: float = DEFAULT_INTRINSICS.fov_y
    width: int = DEFAULT_INTRINSICS.width
    height: int = DEFAULT_INTRINSICS.height
    near: float = DEFAULT_INTRINSICS.near
    far: float = DEFAULT_INTRINSICS.far
    orbit: OrbitSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("position", "look_at", "up_hint"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be at least 1x1")
        if not (self.near > 0 and self.far > self.near):
            raise InvalidParameterError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if np.allclose(self.position, self.look_at):
            raise InvalidParameterError("camera position coincides with look_at")
        if not 0 < self.fov_y < 180:
            raise InvalidParameterError(f"fov_y must be in (0, 180) degrees, got {self.fov_y}")

    @cached_property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera x, y, z axes in world space."""
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up_hint)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise InvalidParameterError("up_hint is parallel to the viewing direction")
        right = right / norm
        up = np.cross(right, forward)
        return np.stack([right, -up, forward])

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(np.radians(self.fov_y) / 2)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def pose_key(self) -> tuple:
        """Hashable identity of pose and image geometry."""
        return (
            tuple(self.position.tolist()),
            tuple(self.look_at.tolist()),
            tuple(self.up_hint.tolist()),
            self.fov_y,
            self.width,
            self.height,
        )

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix K [R | -R c] mapping homogeneous world points to pixels."""
        f = self.focal
        cx, cy = self.principal_point
        k = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
        rt = np.hstack([self.rotation, -(self.rotation @ self.position)[:, None]])
        return k @ rt


def orbit_camera(spec: OrbitSpec, intrinsics: Intrinsics = DEFAULT_INTRINSICS) -> Camera:
    """Camera on a sphere around the origin, looking at the origin."""
    el, az = np.radians(spec.elevation), np.radians(spec.azimuth)
    position = spec.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    # the true camera up (world +z projected off the view axis); unlike a fixed
    # +z hint it stays well defined at and near the poles
    up = np.array([-np.sin(el) * np.cos(az), -np.sin(el) * np.sin(az), np.cos(el)])
    if abs(spec.elevation) == 90.0:
        position = np.array([0.0, 0.0, np.sign(spec.elevation) * spec.radius])
    return Camera(
        position,
        np.zeros(3),
        up,
        intrinsics.fov_y,
        intrinsics.width,
        intrinsics.height,
        intrinsics.near,
        intrinsics.far,
        orbit=spec,
    )


@dataclass(frozen=True)
class Projection:
    pixels: np.ndarray  # (N, 2)
    depth: np.ndarray  # (N,)
    clipped: np.ndarray  # (N,) bool


def project_points(camera: Camera, points) -> Projection:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = camera.world_to_camera(pts)
    z = cam[:, 2]
    clipped = (z < camera.near) | (z > camera.far)
    f = camera.focal
    cx, cy = camera.principal_point
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = np.stack([f * cam[:, 0] / z + cx, f * cam[:, 1] / z + cy], axis=1)
    return Projection(pix, z, clipped)


def project_point(camera: Camera, p) -> tuple[np.ndarray, float, bool]:
    """Pixel coordinates, view depth and clip flag of one world point."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise InvalidParameterError("point must be finite")
    proj = project_points(camera, p)
    return proj.pixels[0], float(proj.depth[0]), bool(proj.clipped[0])


def unproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    f = camera.focal
    cx, cy = camera.principal_point
    pixel = np.asarray(pixel, dtype=np.float64)
    cam = np.array([(pixel[0] - cx) * depth / f, (pixel[1] - cy) * depth / f, depth])
    return camera.rotation.T @ cam + camera.position


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-space ray directions ``(H, W, 3)`` through every pixel centre."""
    f = camera.focal
    cx, cy = camera.principal_point
    jj, ii = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    d = np.stack([(jj - cx) / f, (ii - cy) / f, np.ones_like(jj)], axis=-1) @ camera.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(camera.position, d.shape), d


BAKING_ELEVATIONS = (-45.0, 0.0, 45.0)


def baking_view_set(radius: float, intrinsics: Intrinsics = DEFAULT_INTRINSICS) -> list[Camera]:
    """8 azimuths x 3 elevations plus straight-down and straight-up views (26 total)."""
    if radius <= 0:
        raise InvalidParameterError("radius must be positive")
    cams = [
        orbit_camera(OrbitSpec(el, az, radius), intrinsics)
        for el in BAKING_ELEVATIONS
        for az in np.arange(8) * 45.0
    ]
    cams.append(orbit_camera(OrbitSpec(90.0, 0.0, radius), intrinsics))
    cams.append(orbit_camera(OrbitSpec(-90.0, 0.0, radius), intrinsics))
    return cams


def ring_azimuths(n_views: int, seed: int | None = None) -> np.ndarray:
    """Uniformly spaced azimuths (degrees); ``seed`` picks a reproducible phase."""
    if n_views < 2:
        raise InvalidParameterError("a view ring needs at least 2 views")
    step = 360.0 / n_views
    phase = 0.0 if seed is None else float(np.random.default_rng(seed).uniform(0.0, step))
    return phase + step * np.arange(n_views)


def sweep_view_set(
    true_elevation: float,
    n_views: int,
    radius: float,
    seed: int | None = None,
    intrinsics: Intrinsics = DEFAULT_INTRINSICS,
) -> list[Camera]:
    return [
        orbit_camera(OrbitSpec(true_elevation, float(az), radius), intrinsics)
        for az in ring_azimuths(n_views, seed)
    ]
