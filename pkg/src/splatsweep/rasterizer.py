"""Differentiable splat rendering.

``render`` projects every splat to a 2D Gaussian (local-affine approximation
of the perspective map), sorts globally by view depth and alpha-composites
front to back per pixel. ``render_backward`` returns exact gradients of that
compositing w.r.t. every stored splat parameter.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import _raster_kernels as K
from .camera import Camera
from .gsmath import (
    GaussianCloud,
    quat_to_rotmat,
    quat_to_rotmat_vjp,
    sh_basis,
    sh_basis_grad,
    sigmoid,
)


@dataclass(frozen=True)
class RasterSettings:
    """Approximation knobs. ``EXACT`` turns all of them off for gradient checks.

    ``cutoff_sigma=None`` lets every splat touch every pixel.
    """

    cutoff_sigma: float | None = 3.0
    min_alpha: float = 1.0 / 255.0
    max_alpha: float = 1.0
    min_transmittance: float = 1e-4
    low_pass: float = 0.3
    tile_size: int = 16
    clamp_color: bool = True
    workers: int = 1


DEFAULT_SETTINGS = RasterSettings()
EXACT = RasterSettings(cutoff_sigma=None, min_alpha=0.0, max_alpha=1.0, min_transmittance=0.0)


@dataclass
class Splat2D:
    mean_px: np.ndarray
    cov2: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    culled: bool


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W) accumulated opacity; 1 - alpha is transmittance
    count: np.ndarray | None = None  # (H, W) contributing splats per pixel
    context: _RenderContext | None = None


@dataclass
class ParamGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    means2d: np.ndarray  # (N, 2) d loss / d pixel-space mean
    visible: np.ndarray  # (N,) splat touched at least one tile

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


@dataclass
class _Projected:
    """Per-splat screen-space quantities plus what the backward pass needs."""

    valid: np.ndarray
    means2d: np.ndarray
    conics: np.ndarray
    cov2: np.ndarray
    depth: np.ndarray
    colors: np.ndarray
    color_mask: np.ndarray
    opac: np.ndarray
    # intermediates
    t: np.ndarray
    view_vec: np.ndarray
    view_dist: np.ndarray
    dirs: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    sigma: np.ndarray
    jac: np.ndarray
    tmat: np.ndarray
    basis: np.ndarray


@dataclass
class _RenderContext:
    proj: _Projected
    offsets: np.ndarray
    ids: np.ndarray
    n_tiles_x: int
    n_tiles: int
    background: np.ndarray
    settings: RasterSettings


def _project(camera: Camera, cloud: GaussianCloud, low_pass: float, clamp_color: bool) -> _Projected:
    n = len(cloud)
    w = camera.rotation
    f = camera.focal
    cx, cy = camera.principal_point

    qnorm = np.linalg.norm(cloud.rotations, axis=1)
    qn = cloud.rotations / qnorm[:, None]
    rot = quat_to_rotmat(qn)
    scales = np.exp(cloud.log_scales)
    m = rot * scales[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)

    view_vec = cloud.positions - camera.position
    t = view_vec @ w.T
    tz = t[:, 2]
    valid = (tz > camera.near) & (tz < camera.far)
    tz_safe = np.where(valid, tz, 1.0)

    means2d = np.stack([f * t[:, 0] / tz_safe + cx, f * t[:, 1] / tz_safe + cy], axis=1)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = f / tz_safe
    jac[:, 0, 2] = -f * t[:, 0] / tz_safe**2
    jac[:, 1, 1] = f / tz_safe
    jac[:, 1, 2] = -f * t[:, 1] / tz_safe**2
    tmat = jac @ w
    cov2 = tmat @ sigma @ np.swapaxes(tmat, 1, 2)
    cov2[:, 0, 0] += low_pass
    cov2[:, 1, 1] += low_pass
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    valid &= det > 0
    det_safe = np.where(valid, det, 1.0)
    conics = np.stack([cov2[:, 1, 1] / det_safe, -cov2[:, 0, 1] / det_safe, cov2[:, 0, 0] / det_safe], axis=1)

    view_dist = np.linalg.norm(view_vec, axis=1)
    dirs = view_vec / np.where(view_dist > 0, view_dist, 1.0)[:, None]
    basis = sh_basis(dirs, cloud.sh_degree)
    raw = np.einsum("nk,nkc->nc", basis, cloud.sh_coeffs)
    if clamp_color:
        colors = np.clip(raw, 0.0, 1.0)
        color_mask = (raw >= 0.0) & (raw <= 1.0)
    else:
        colors = raw
        color_mask = np.ones_like(raw, dtype=bool)
    return _Projected(
        valid, means2d, conics, cov2, tz, colors, color_mask, sigmoid(cloud.opacity_logits),
        t, view_vec, view_dist, dirs, qn, qnorm, rot, scales, sigma, jac, tmat, basis,
    )


def project_splat(camera: Camera, mean, covariance, opacity: float, sh_coeffs,
                  low_pass: float = DEFAULT_SETTINGS.low_pass) -> Splat2D:
    """Project one realized Gaussian (mean, covariance, opacity) to the image plane."""
    mean = np.asarray(mean, dtype=np.float64)
    covariance = np.asarray(covariance, dtype=np.float64)
    w = camera.rotation
    f = camera.focal
    cx, cy = camera.principal_point
    t = w @ (mean - camera.position)
    culled = not (camera.near < t[2] < camera.far)
    z = t[2] if not culled else 1.0
    jac = np.array([[f / z, 0.0, -f * t[0] / z**2], [0.0, f / z, -f * t[1] / z**2]])
    cov2 = jac @ w @ covariance @ w.T @ jac.T + low_pass * np.eye(2)
    d = mean - camera.position
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[0]))) - 1
    color = sh_basis(d / np.linalg.norm(d), degree) @ sh
    return Splat2D(
        np.array([f * t[0] / z + cx, f * t[1] / z + cy]), cov2, float(t[2]), color, float(opacity), culled
    )


def _tile_bounds(proj: _Projected, camera: Camera, settings: RasterSettings):
    ts = settings.tile_size
    ntx = -(-camera.width // ts)
    nty = -(-camera.height // ts)
    if settings.cutoff_sigma is None:
        lo = np.zeros((len(proj.valid), 2), dtype=np.int64)
        hi = np.tile(np.array([ntx - 1, nty - 1], dtype=np.int64), (len(proj.valid), 1))
        keep = proj.valid.copy()
    else:
        # axis-aligned box of the cutoff ellipse around the 2D mean
        ext = settings.cutoff_sigma * np.sqrt(np.stack([proj.cov2[:, 0, 0], proj.cov2[:, 1, 1]], axis=1))
        pmin = proj.means2d - ext - 0.5
        pmax = proj.means2d + ext - 0.5
        with np.errstate(invalid="ignore"):
            lo = np.floor(np.maximum(np.ceil(pmin), 0) / ts).astype(np.int64)
            hi = np.floor(np.minimum(np.floor(pmax), [camera.width - 1, camera.height - 1]) / ts).astype(np.int64)
        keep = proj.valid & np.all(np.ceil(pmin) <= np.floor(pmax), axis=1)
        keep &= np.all(np.floor(pmax) >= 0, axis=1)
        keep &= (np.ceil(pmin[:, 0]) <= camera.width - 1) & (np.ceil(pmin[:, 1]) <= camera.height - 1)
        lo = np.where(keep[:, None], lo, 0)
        hi = np.where(keep[:, None], hi, -1)
    return lo, hi, keep, ntx, ntx * nty


def _chunks(n_tiles: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(workers, n_tiles))
    edges = np.linspace(0, n_tiles, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def _run_tiles(fn, chunks, workers, *args):
    if len(chunks) == 1:
        fn(chunks[0][0], chunks[0][1], *args)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda c: fn(c[0], c[1], *args), chunks))


def _cutoff2(settings: RasterSettings) -> float:
    return -1.0 if settings.cutoff_sigma is None else float(settings.cutoff_sigma) ** 2


def render(
    camera: Camera,
    cloud: GaussianCloud,
    background=(0.0, 0.0, 0.0),
    settings: RasterSettings = DEFAULT_SETTINGS,
    keep_context: bool = False,
) -> RenderOutput:
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = camera.height, camera.width
    proj = _project(camera, cloud, settings.low_pass, settings.clamp_color)
    lo, hi, keep, ntx, n_tiles = _tile_bounds(proj, camera, settings)
    # stable sort: equal depths fall back to splat index
    order = np.argsort(proj.depth, kind="stable")
    order = order[keep[order]]
    offsets, ids = K.bin_splats(order.astype(np.int64), lo, hi, ntx, n_tiles)

    rgb = np.empty((h, w, 3))
    alpha = np.empty((h, w))
    count = np.empty((h, w), dtype=np.int64)
    args = (
        offsets, ids, proj.means2d, proj.conics, proj.colors, proj.opac, bg,
        w, h, settings.tile_size, ntx, _cutoff2(settings), settings.min_alpha,
        settings.max_alpha, settings.min_transmittance, rgb, alpha, count,
    )
    _run_tiles(K.forward_tiles, _chunks(n_tiles, settings.workers), settings.workers, *args)
    ctx = _RenderContext(proj, offsets, ids, ntx, n_tiles, bg, settings) if keep_context else None
    return RenderOutput(rgb, alpha, count, ctx)


def render_backward(
    camera: Camera,
    cloud: GaussianCloud,
    grad_rgb,
    grad_alpha=None,
    background=(0.0, 0.0, 0.0),
    settings: RasterSettings = DEFAULT_SETTINGS,
    context: _RenderContext | None = None,
) -> ParamGradients:
    """Gradients of ``sum(grad_rgb * rgb) + sum(grad_alpha * alpha)`` w.r.t. the cloud."""
    h, w = camera.height, camera.width
    grad_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64).reshape(h, w, 3)
    grad_alpha = (
        np.zeros((h, w)) if grad_alpha is None
        else np.ascontiguousarray(grad_alpha, dtype=np.float64).reshape(h, w)
    )
    if context is None:
        context = render(camera, cloud, background, settings, keep_context=True).context
    proj, settings = context.proj, context.settings
    n = len(cloud)

    pair = np.zeros((len(context.ids), K.N_GRAD))
    args = (
        context.offsets, context.ids, proj.means2d, proj.conics, proj.colors, proj.opac,
        context.background, w, h, settings.tile_size, context.n_tiles_x, _cutoff2(settings),
        settings.min_alpha, settings.max_alpha, settings.min_transmittance, grad_rgb, grad_alpha, pair,
    )
    _run_tiles(K.backward_tiles, _chunks(context.n_tiles, settings.workers), settings.workers, *args)
    g2d = K.reduce_pairs(context.ids, pair, n)
    visible = np.zeros(n, dtype=bool)
    visible[context.ids] = True
    return _backward_projection(camera, cloud, proj, g2d, visible)


def _backward_projection(camera, cloud, proj: _Projected, g2d, visible) -> ParamGradients:
    n = len(cloud)
    f = camera.focal
    wrot = camera.rotation
    valid = proj.valid
    g_mean = g2d[:, K.G_MX:K.G_MY + 1]
    g_conic = g2d[:, K.G_CA:K.G_CC + 1]
    g_color = g2d[:, K.G_R:K.G_B + 1] * proj.color_mask
    g_opac = g2d[:, K.G_OP]

    # colour: SH coefficients and viewing direction
    g_sh = proj.basis[:, :, None] * g_color[:, None, :]
    g_pos = np.zeros((n, 3))
    if cloud.sh_degree > 0:
        dbasis = sh_basis_grad(proj.dirs, cloud.sh_degree)  # (n, k, 3)
        g_basis = np.einsum("nkc,nc->nk", cloud.sh_coeffs, g_color)
        g_dir = np.einsum("nk,nkd->nd", g_basis, dbasis)
        g_dir -= proj.dirs * np.sum(proj.dirs * g_dir, axis=1, keepdims=True)
        g_pos += g_dir / np.where(proj.view_dist > 0, proj.view_dist, 1.0)[:, None]

    g_logit = g_opac * proj.opac * (1.0 - proj.opac)

    # conic = inverse(cov2); treat gradients as full symmetric matrices
    con = np.empty((n, 2, 2))
    con[:, 0, 0] = proj.conics[:, 0]
    con[:, 0, 1] = con[:, 1, 0] = proj.conics[:, 1]
    con[:, 1, 1] = proj.conics[:, 2]
    gq = np.empty((n, 2, 2))
    gq[:, 0, 0] = g_conic[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    gq[:, 1, 1] = g_conic[:, 2]
    g_cov2 = -con @ gq @ con

    # cov2 = T sigma T^T with T = J W
    g_tmat = 2.0 * g_cov2 @ proj.tmat @ proj.sigma
    g_sigma = np.swapaxes(proj.tmat, 1, 2) @ g_cov2 @ proj.tmat
    g_jac = g_tmat @ wrot.T

    t = proj.t
    tz = np.where(valid, t[:, 2], 1.0)
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_jac[:, 0, 2] * (-f / tz**2) + g_mean[:, 0] * f / tz
    g_t[:, 1] = g_jac[:, 1, 2] * (-f / tz**2) + g_mean[:, 1] * f / tz
    g_t[:, 2] = (
        g_jac[:, 0, 0] * (-f / tz**2)
        + g_jac[:, 0, 2] * (2 * f * t[:, 0] / tz**3)
        + g_jac[:, 1, 1] * (-f / tz**2)
        + g_jac[:, 1, 2] * (2 * f * t[:, 1] / tz**3)
        - g_mean[:, 0] * f * t[:, 0] / tz**2
        - g_mean[:, 1] * f * t[:, 1] / tz**2
    )
    g_pos += g_t @ wrot

    # sigma = M M^T with M = R diag(s)
    m = proj.rot * proj.scales[:, None, :]
    g_m = 2.0 * g_sigma @ m
    g_scale = np.einsum("nij,nij->nj", g_m, proj.rot)
    g_logscale = g_scale * proj.scales
    g_rot = g_m * proj.scales[:, None, :]
    g_qn = quat_to_rotmat_vjp(proj.qn, g_rot)
    g_q = (g_qn - proj.qn * np.sum(proj.qn * g_qn, axis=1, keepdims=True)) / proj.qnorm[:, None]

    dead = ~valid
    for arr in (g_pos, g_q, g_logscale, g_logit, g_sh, g_mean):
        arr[dead] = 0.0
    return ParamGradients(g_pos, g_q, g_logscale, g_logit, g_sh, g_mean.copy(), visible & valid)


def with_workers(settings: RasterSettings, workers: int) -> RasterSettings:
    return replace(settings, workers=workers)
