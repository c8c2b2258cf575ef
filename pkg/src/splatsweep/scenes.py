"""Synthetic ground-truth scenes with known geometry.

Each preset is a union of solid ellipsoids filled with opaque splats. The
``critter`` preset is a deliberately asymmetric four-legged shape (body,
raised head, legs, tail) so that views from different elevations differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .gsmath import GaussianCloud, logit, num_sh_coeffs, rgb_to_sh0


@dataclass(frozen=True)
class Part:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    color: tuple[float, float, float]
    tilt: float = 0.0  # rotation about the y axis, degrees


@dataclass(frozen=True)
class ScenePreset:
    name: str
    parts: tuple[Part, ...]
    splats_per_unit_volume: float = 6.0e3
    opacity: float = 0.95

    @property
    def extent(self) -> float:
        """Diameter of the bounding sphere centred at the origin."""
        return 2.0 * max(np.linalg.norm(p.center) + max(p.radii) for p in self.parts)


PRESETS = {
    "critter": ScenePreset(
        "critter",
        (
            Part((0.0, 0.0, 0.0), (0.34, 0.17, 0.17), (0.55, 0.33, 0.18)),
            Part((0.36, 0.0, 0.17), (0.13, 0.11, 0.11), (0.85, 0.75, 0.55)),
            Part((0.47, 0.0, 0.15), (0.05, 0.04, 0.035), (0.20, 0.10, 0.08)),
            Part((0.20, 0.09, -0.22), (0.045, 0.045, 0.14), (0.25, 0.16, 0.10)),
            Part((0.20, -0.09, -0.22), (0.045, 0.045, 0.14), (0.25, 0.16, 0.10)),
            Part((-0.20, 0.09, -0.22), (0.045, 0.045, 0.14), (0.25, 0.16, 0.10)),
            Part((-0.20, -0.09, -0.22), (0.045, 0.045, 0.14), (0.25, 0.16, 0.10)),
            Part((-0.42, 0.0, 0.12), (0.16, 0.035, 0.035), (0.90, 0.90, 0.88), tilt=-35.0),
        ),
    ),
    "sphere": ScenePreset("sphere", (Part((0.0, 0.0, 0.0), (0.4, 0.4, 0.4), (0.2, 0.45, 0.8)),)),
}


def _tilt_matrix(deg: float) -> np.ndarray:
    a = np.radians(deg)
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])


def inside(preset: ScenePreset, points: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside the union of the preset's ellipsoids."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    mask = np.zeros(len(points), dtype=bool)
    for part in preset.parts:
        local = (points - part.center) @ _tilt_matrix(part.tilt)
        mask |= np.sum((local / part.radii) ** 2, axis=1) <= 1.0
    return mask


def build_scene(name: str, seed: int = 0, sh_degree: int = 0) -> GaussianCloud:
    """Splat cloud for a preset; part colours get a little per-splat mottling."""
    if name not in PRESETS:
        raise InvalidParameterError(f"unknown scene preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    preset = PRESETS[name]
    rng = np.random.default_rng(seed)
    pos, col, scl = [], [], []
    for part in preset.parts:
        radii = np.asarray(part.radii)
        volume = 4.0 / 3.0 * np.pi * np.prod(radii)
        n = max(8, int(round(volume * preset.splats_per_unit_volume)))
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.random(n) ** (1.0 / 3.0)
        local = d * r[:, None] * radii
        pos.append(local @ _tilt_matrix(part.tilt).T + part.center)
        shade = 1.0 + 0.12 * (2 * rng.random((n, 1)) - 1)
        col.append(np.clip(np.asarray(part.color) * shade, 0.0, 1.0))
        spacing = np.cbrt(volume / n)
        scl.append(np.full(n, min(0.6 * spacing, 0.5 * radii.min())))
    positions = np.concatenate(pos)
    colors = np.concatenate(col)
    scales = np.concatenate(scl)
    total = len(positions)
    sh = np.zeros((total, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    rotations = np.zeros((total, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions,
        rotations,
        np.repeat(np.log(scales)[:, None], 3, axis=1),
        np.full(total, logit(preset.opacity)),
        sh,
        sh_degree,
    )
