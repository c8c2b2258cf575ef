"""Gaussian-splat parameterization.

A splat is stored in unconstrained form (raw quaternion, log-scale, opacity
logit) so that any real-valued parameter vector is legal. ``realize`` maps it
to a world-space Gaussian: covariance ``R S S^T R^T`` and opacity in (0, 1).
Colors are real spherical harmonics up to degree 3, evaluated on the unit
viewing direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloudError, InvalidParameterError, ShapeError

MAX_SH_DEGREE = 3
SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))

_C1 = 0.4886025119029199  # sqrt(3 / 4pi)
_C2 = (
    1.0925484305920792,  # 0.5 sqrt(15/pi)
    0.31539156525252005,  # 0.25 sqrt(5/pi)
    0.5462742152960396,  # 0.25 sqrt(15/pi)
)
_C3 = (
    0.5900435899266435,  # 0.25 sqrt(35 / 2pi)
    2.890611442640554,  # 0.5 sqrt(105/pi)
    0.4570457994644658,  # 0.25 sqrt(21 / 2pi)
    0.3731763325901154,  # 0.25 sqrt(7/pi)
    1.445305721320277,  # 0.25 sqrt(105/pi)
)

DEFAULT_INIT_OPACITY = 0.1


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    # two-branch form avoids overflow in exp for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class SplatParams:
    """One splat in unconstrained parameter space.

    ``sh_coeffs`` has shape ``((L+1)**2, 3)``: one column of SH weights per
    RGB channel, ordered by band then by m = -l..l.
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray


@dataclass
class GaussianCloud:
    """Structure-of-arrays container for N splats sharing one SH degree."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) w-first, not necessarily unit
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray  # (N, K, 3)
    sh_degree: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise InvalidParameterError(f"sh_degree must be in [0, {MAX_SH_DEGREE}], got {self.sh_degree}")
        k = num_sh_coeffs(self.sh_degree)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.size != n * k * 3:
            raise ShapeError(f"sh_coeffs has {sh.size} values, expected {n}x{k}x3 for degree {self.sh_degree}")
        self.sh_coeffs = sh.reshape(n, k, 3)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> SplatParams:
        return SplatParams(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.sh_coeffs[i].copy(),
        )

    @classmethod
    def empty(cls, sh_degree: int = 0) -> GaussianCloud:
        k = num_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k, 3)), sh_degree)

    @classmethod
    def from_splats(cls, splats: list[SplatParams], sh_degree: int = 0) -> GaussianCloud:
        if not splats:
            return cls.empty(sh_degree)
        return cls(
            np.stack([s.position for s in splats]),
            np.stack([s.rotation for s in splats]),
            np.stack([s.log_scale for s in splats]),
            np.array([s.opacity_logit for s in splats]),
            np.stack([np.asarray(s.sh_coeffs, dtype=np.float64) for s in splats]),
            sh_degree,
        )

    def copy(self) -> GaussianCloud:
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
            self.sh_degree,
        )

    def take(self, index) -> GaussianCloud:
        return GaussianCloud(
            self.positions[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.sh_coeffs[index],
            self.sh_degree,
        )

    def concat(self, other: GaussianCloud) -> GaussianCloud:
        if other.sh_degree != self.sh_degree:
            raise ShapeError("cannot concatenate clouds with different sh_degree")
        return GaussianCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh_coeffs, other.sh_coeffs]),
            self.sh_degree,
        )

    # parameter groups as seen by the optimizer
    def param_dict(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def equals(self, other: GaussianCloud) -> bool:
        """Bit-exact comparison of every field."""
        if self.sh_degree != other.sh_degree or len(self) != len(other):
            return False
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.param_dict().values(), other.param_dict().values())
        )


@dataclass(frozen=True)
class Gaussian3D:
    mean: np.ndarray
    covariance: np.ndarray
    opacity: float


# -- rotations and covariance ------------------------------------------------


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(..., 4)`` in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotmat_vjp(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back onto ``q`` (no normalization)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = grad_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
        - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    gy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
        + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    gz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
        - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=-1)


def build_covariance(rotation, scale) -> np.ndarray:
    """Return ``R S S^T R^T`` for a unit quaternion and positive per-axis scale."""
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise InvalidParameterError("rotation and scale must be finite")
    if np.any(scale <= 0):
        raise InvalidParameterError("scale components must be positive")
    m = quat_to_rotmat(rotation) * scale[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def realize(params: SplatParams) -> Gaussian3D:
    q = normalize_quaternions(params.rotation)
    cov = build_covariance(q, np.exp(params.log_scale))
    return Gaussian3D(np.asarray(params.position, dtype=np.float64), cov, float(sigmoid(params.opacity_logit)))


def cloud_covariances(cloud: GaussianCloud) -> np.ndarray:
    if len(cloud) == 0:
        return np.zeros((0, 3, 3))
    return build_covariance(normalize_quaternions(cloud.rotations), cloud.scales)


# -- spherical harmonics -----------------------------------------------------


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values ``(..., (degree+1)**2)`` at unit directions ``(..., 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [_C1 * y, _C1 * z, _C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            _C2[0] * x * y,
            _C2[0] * y * z,
            _C2[1] * (3 * zz - 1),
            _C2[0] * x * z,
            _C2[2] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            _C3[0] * y * (3 * xx - yy),
            _C3[1] * x * y * z,
            _C3[2] * y * (5 * zz - 1),
            _C3[3] * z * (5 * zz - 3),
            _C3[2] * x * (5 * zz - 1),
            _C3[4] * z * (xx - yy),
            _C3[0] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Cartesian gradients ``(..., K, 3)`` of the polynomial forms in ``sh_basis``.

    Only the tangential part is meaningful on the sphere; callers project with
    the normalization Jacobian.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, _C1)
        rows += [(zero, c, zero), (zero, zero, c), (c, zero, zero)]
    if degree >= 2:
        a, b, c = _C2
        rows += [
            (a * y, a * x, zero),
            (zero, a * z, a * y),
            (zero, zero, 6 * b * z),
            (a * z, zero, a * x),
            (2 * c * x, -2 * c * y, zero),
        ]
    if degree >= 3:
        k0, k1, k2, k3, k4 = _C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6 * k0 * x * y, k0 * (3 * xx - 3 * yy), zero),
            (k1 * y * z, k1 * x * z, k1 * x * y),
            (zero, k2 * (5 * zz - 1), 10 * k2 * y * z),
            (zero, zero, k3 * (15 * zz - 3)),
            (k2 * (5 * zz - 1), zero, 10 * k2 * x * z),
            (2 * k4 * x * z, -2 * k4 * y * z, k4 * (xx - yy)),
            (k0 * (3 * xx - 3 * yy), -6 * k0 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _check_coeffs(coeffs: np.ndarray) -> int:
    k = coeffs.shape[-2]
    degree = int(round(np.sqrt(k))) - 1
    if coeffs.shape[-1] != 3 or num_sh_coeffs(degree) != k or degree > MAX_SH_DEGREE:
        raise ShapeError(f"SH coefficients must have shape (..., (L+1)^2, 3) with L <= 3, got {coeffs.shape}")
    return degree


def eval_sh(coeffs, direction) -> np.ndarray:
    """Raw (unclamped) RGB from SH weights ``(..., K, 3)`` toward ``direction``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    degree = _check_coeffs(coeffs)
    basis = sh_basis(direction, degree)
    return np.einsum("...k,...kc->...c", basis, coeffs)


def rgb_to_sh0(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) / SH_C0


# -- initialization ----------------------------------------------------------


def init_cloud_random_sphere(
    count: int,
    radius: float,
    seed: int,
    sh_degree: int = 0,
    opacity: float = DEFAULT_INIT_OPACITY,
    scale: float | None = None,
    color_jitter: float = 0.05,
) -> GaussianCloud:
    """Uniformly fill a ball with small, translucent, grey-ish splats."""
    if count < 1:
        raise EmptyCloudError("random-sphere initialization needs count >= 1")
    if radius <= 0:
        raise InvalidParameterError("radius must be positive")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # cube root for a uniform volume density; the min() guards against
    # rounding past the boundary
    r = np.minimum(radius * rng.random(count) ** (1.0 / 3.0), radius)
    positions = dirs * r[:, None]
    if scale is None:
        scale = radius / np.cbrt(count)
    colors = np.clip(0.5 + color_jitter * (2 * rng.random((count, 3)) - 1), 0, 1)
    sh = np.zeros((count, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions,
        rotations,
        np.full((count, 3), np.log(scale)),
        np.full(count, logit(opacity)),
        sh,
        sh_degree,
    )


def init_cloud_from_points(
    points,
    colors,
    k: int = 3,
    sh_degree: int = 0,
    opacity: float = DEFAULT_INIT_OPACITY,
) -> GaussianCloud:
    """Splats centred on ``points``; isotropic scale from k-NN spacing.

    ``log_scale = log(sqrt(mean distance to the k nearest neighbours))``.
    With fewer than ``k + 1`` points every splat gets the same scale, 1% of
    the bounding-box diagonal (or 0.01 for a degenerate box).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n < 1 or len(colors) != n:
        raise ShapeError(f"need equal, non-zero numbers of points and colors (got {n} and {len(colors)})")
    if n >= k + 1:
        dist, _ = cKDTree(points).query(points, k=k + 1)
        mean_dist = np.maximum(dist[:, 1:].mean(axis=1), 1e-12)
        log_scale = np.log(np.sqrt(mean_dist))
    else:
        diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
        log_scale = np.full(n, np.log(0.01 * diag if diag > 0 else 0.01))
    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        points.copy(),
        rotations,
        np.repeat(log_scale[:, None], 3, axis=1),
        np.full(n, logit(opacity)),
        sh,
        sh_degree,
    )


__all__ = [
    "GaussianCloud",
    "Gaussian3D",
    "SplatParams",
    "SH_C0",
    "build_covariance",
    "cloud_covariances",
    "eval_sh",
    "init_cloud_from_points",
    "init_cloud_random_sphere",
    "logit",
    "normalize_quaternions",
    "quat_to_rotmat",
    "realize",
    "rgb_to_sh0",
    "sh_basis",
    "sigmoid",
]
