"""UV atlases for extracted meshes: unwrapping, baking from splat renders and
refinement against restored target views.

Every triangle gets its own square cell in the atlas and is mapped onto the
lower-left right triangle of that cell, one texel in from the cell border, so
neighbouring charts are separated by at least two texels. Atlas rows run top
to bottom while ``v`` runs bottom to top, as in OBJ files.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .camera import Camera, baking_view_set
from .errors import AtlasTooSmallError, EmptyMeshError, InvalidParameterError
from .gsmath import GaussianCloud
from .meshex import TriangleMesh
from .rasterizer import DEFAULT_SETTINGS, RasterSettings, render

CHART_INSET = 1  # texels between a chart and its cell border
MIN_CHART_TEXELS = 2  # shortest allowed chart leg
MIN_CELL = MIN_CHART_TEXELS + 2 * CHART_INSET
DEFAULT_FILL = 0.5


@dataclass
class TextureAtlas:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    coverage: np.ndarray  # (H, W) bool, texel received a baked colour
    chart_index: np.ndarray  # (H, W) int, triangle whose chart contains the texel centre, -1 if none
    cells: np.ndarray  # (T, 3) int: column, row and size of each triangle's cell
    cell_index: np.ndarray = field(repr=False, default=None)  # (H, W) int, owning cell, -1 if none

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    def copy(self) -> TextureAtlas:
        return TextureAtlas(
            self.rgb.copy(), self.coverage.copy(), self.chart_index.copy(), self.cells.copy(),
            None if self.cell_index is None else self.cell_index.copy(),
        )


# -- unwrapping --------------------------------------------------------------


def required_atlas_size(n_triangles: int) -> int:
    return int(np.ceil(np.sqrt(max(n_triangles, 1)))) * MIN_CELL


def uv_unwrap(mesh: TriangleMesh, atlas_size: int = 1024) -> tuple[TriangleMesh, TextureAtlas]:
    """Give every triangle its own chart; returns the mesh with UVs and an empty atlas."""
    t = len(mesh.triangles)
    if t == 0:
        raise EmptyMeshError("cannot unwrap an empty mesh")
    per_row = int(np.ceil(np.sqrt(t)))
    cell = atlas_size // per_row
    if cell < MIN_CELL:
        need = required_atlas_size(t)
        raise AtlasTooSmallError(
            f"atlas of {atlas_size}x{atlas_size} cannot hold {t} charts; need at least {need}x{need}", need
        )
    idx = np.arange(t)
    col, row = idx % per_row, idx // per_row
    x0 = col * cell + CHART_INSET
    y0 = row * cell + CHART_INSET
    leg = cell - 2 * CHART_INSET
    # texel-space corners: right angle at the cell's lower-left (largest row)
    px = np.stack([x0, x0 + leg, x0], axis=1).astype(np.float64)
    py = np.stack([y0 + leg, y0 + leg, y0], axis=1).astype(np.float64)
    uvs = np.stack([px / atlas_size, 1.0 - py / atlas_size], axis=-1).reshape(-1, 2)
    out = TriangleMesh(mesh.vertices, mesh.triangles, mesh.normals, uvs, np.arange(3 * t).reshape(t, 3))

    chart = np.full((atlas_size, atlas_size), -1, dtype=np.int64)
    cells = np.full((atlas_size, atlas_size), -1, dtype=np.int64)
    # texel (i, j) belongs to the chart when its centre lies inside the closed triangle
    lj, li = np.meshgrid(np.arange(leg) + 0.5, np.arange(leg) + 0.5)
    inside = lj + (leg - li) <= leg
    for k in range(t):
        r0, c0 = row[k] * cell, col[k] * cell
        cells[r0:r0 + cell, c0:c0 + cell] = k
        block = chart[y0[k]:y0[k] + leg, x0[k]:x0[k] + leg]
        block[inside] = k
    atlas = TextureAtlas(
        np.full((atlas_size, atlas_size, 3), DEFAULT_FILL),
        np.zeros((atlas_size, atlas_size), dtype=bool),
        chart,
        np.stack([col * cell, row * cell, np.full(t, cell)], axis=1),
        cells,
    )
    return out, atlas


def chart_texel_points(mesh: TriangleMesh, atlas: TextureAtlas) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World positions of all chart texel centres: ``(rows, cols, points)``."""
    rows, cols = np.nonzero(atlas.chart_index >= 0)
    tri = atlas.chart_index[rows, cols]
    uv = mesh.corner_uvs[tri]  # (n, 3, 2)
    p = np.stack([(cols + 0.5) / atlas.width, 1.0 - (rows + 0.5) / atlas.height], axis=1)
    bary = _barycentric_2d(p, uv)
    verts = mesh.vertices[mesh.triangles[tri]]
    return rows, cols, np.einsum("nk,nkd->nd", bary, verts)


def _barycentric_2d(p, tri):
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, p - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    l1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    return np.stack([1 - l1 - l2, l1, l2], axis=1)


# -- mesh rasterization --------------------------------------------------------


@njit(cache=True, nogil=True)
def _raster_mesh(cam_tris, focal, cx, cy, width, height, near, tri_id, bary, depth):
    for t in range(cam_tris.shape[0]):
        z0, z1, z2 = cam_tris[t, 0, 2], cam_tris[t, 1, 2], cam_tris[t, 2, 2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        x0 = focal * cam_tris[t, 0, 0] / z0 + cx
        y0 = focal * cam_tris[t, 0, 1] / z0 + cy
        x1 = focal * cam_tris[t, 1, 0] / z1 + cx
        y1 = focal * cam_tris[t, 1, 1] / z1 + cy
        x2 = focal * cam_tris[t, 2, 0] / z2 + cx
        y2 = focal * cam_tris[t, 2, 1] / z2 + cy
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        jlo = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        jhi = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        ilo = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ihi = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for i in range(ilo, ihi + 1):
            py = i + 0.5
            for j in range(jlo, jhi + 1):
                px = j + 0.5
                l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                w0, w1, w2 = l0 / z0, l1 / z1, l2 / z2
                inv_z = w0 + w1 + w2
                z = 1.0 / inv_z
                if z < depth[i, j]:
                    depth[i, j] = z
                    tri_id[i, j] = t
                    bary[i, j, 0] = w0 * z
                    bary[i, j, 1] = w1 * z
                    bary[i, j, 2] = w2 * z


@dataclass
class MeshRaster:
    triangle: np.ndarray  # (H, W) int, -1 where no triangle
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics
    depth: np.ndarray  # (H, W) camera-space z, inf where empty

    @property
    def mask(self) -> np.ndarray:
        return self.triangle >= 0


def rasterize_mesh(camera: Camera, mesh: TriangleMesh) -> MeshRaster:
    """Z-buffered visibility of ``mesh`` at every pixel centre (both windings drawn)."""
    h, w = camera.height, camera.width
    tri_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    if len(mesh.triangles):
        cam_tris = camera.world_to_camera(mesh.vertices)[mesh.triangles]
        cx, cy = camera.principal_point
        _raster_mesh(np.ascontiguousarray(cam_tris), camera.focal, cx, cy, w, h, camera.near, tri_id, bary, depth)
    return MeshRaster(tri_id, bary, depth)


# -- texture lookup --------------------------------------------------------------


@dataclass
class TexelFootprint:
    """Bilinear weights linking hit pixels to texels."""

    pixels: np.ndarray  # (P,) flat pixel indices
    texels: np.ndarray  # (P, 4) flat texel indices
    weights: np.ndarray  # (P, 4)


def bilinear_footprint(uv: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Texel indices and weights for bilinear lookups at ``uv`` (clamp to edge)."""
    x = uv[:, 0] * width - 0.5
    y = (1.0 - uv[:, 1]) * height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = np.clip(np.stack([x0, x0 + 1, x0, x0 + 1], axis=1), 0, width - 1)
    ys = np.clip(np.stack([y0, y0, y0 + 1, y0 + 1], axis=1), 0, height - 1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return ys * width + xs, wts


def _footprint(raster: MeshRaster, mesh: TriangleMesh, atlas: TextureAtlas) -> TexelFootprint:
    pix = np.flatnonzero(raster.triangle.reshape(-1) >= 0)
    tri = raster.triangle.reshape(-1)[pix]
    bary = raster.bary.reshape(-1, 3)[pix]
    uv = np.einsum("pk,pkd->pd", bary, mesh.corner_uvs[tri])
    texels, weights = bilinear_footprint(uv, atlas.width, atlas.height)
    return TexelFootprint(pix, texels, weights)


@dataclass
class TexturedRender:
    rgb: np.ndarray
    alpha: np.ndarray
    footprint: TexelFootprint


def render_textured(camera: Camera, mesh: TriangleMesh, atlas: TextureAtlas, background=(1.0, 1.0, 1.0),
                    raster: MeshRaster | None = None) -> TexturedRender:
    raster = rasterize_mesh(camera, mesh) if raster is None else raster
    fp = _footprint(raster, mesh, atlas)
    h, w = camera.height, camera.width
    rgb = np.empty((h * w, 3))
    rgb[:] = np.asarray(background, dtype=np.float64)
    tex = atlas.rgb.reshape(-1, 3)
    rgb[fp.pixels] = np.einsum("pk,pkc->pc", fp.weights, tex[fp.texels])
    alpha = np.zeros(h * w)
    alpha[fp.pixels] = 1.0
    return TexturedRender(rgb.reshape(h, w, 3), alpha.reshape(h, w), fp)


# -- baking ------------------------------------------------------------------------


@dataclass
class BakeReport:
    views_used: int
    texels_covered: int


def _face_normals_unit(mesh: TriangleMesh) -> np.ndarray:
    fn = mesh.face_normals()
    return fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)


def _sample_image(img: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Bilinear sampling at continuous pixel coordinates (pixel centres at +0.5)."""
    h, w = img.shape[:2]
    x = np.clip(px - 0.5, 0, w - 1)
    y = np.clip(py - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2 if h > 1 else 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None] if img.ndim == 3 else x - x0
    fy = (y - y0)[:, None] if img.ndim == 3 else y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bake_texture(
    mesh: TriangleMesh,
    atlas: TextureAtlas,
    cloud: GaussianCloud | None = None,
    views: Sequence[Camera] | None = None,
    images: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    background=(1.0, 1.0, 1.0),
    settings: RasterSettings = DEFAULT_SETTINGS,
    radius: float = 2.0,
    min_alpha: float = 0.5,
    report: list | None = None,
) -> TextureAtlas:
    """Project rendered colours back onto the atlas.

    For every view, each chart texel whose surface point is visible (front
    facing and not occluded in the view's depth buffer) takes the colour of the
    render at its pixel. Contributions are averaged with weights equal to the
    cosine between the surface normal and the direction to the camera. Views
    default to the 26-camera baking set; ``images`` may supply precomputed
    ``(rgb, alpha)`` renders instead of rendering ``cloud``.
    """
    if mesh.uvs is None:
        raise InvalidParameterError("mesh needs UVs before baking; run uv_unwrap first")
    views = baking_view_set(radius) if views is None else list(views)
    if images is None:
        if cloud is None:
            raise InvalidParameterError("bake_texture needs a cloud or precomputed images")
        images = []
        for cam in views:
            out = render(cam, cloud, background, settings)
            images.append((out.rgb, out.alpha))
    if len(images) != len(views):
        raise InvalidParameterError("one image per view is required")
    bg = np.asarray(background, dtype=np.float64)
    rows, cols, pts = chart_texel_points(mesh, atlas)
    tri = atlas.chart_index[rows, cols]
    normals = _face_normals_unit(mesh)[tri]
    acc = np.zeros((len(pts), 3))
    wsum = np.zeros(len(pts))
    for cam, (rgb, alpha) in zip(views, images):
        raster = rasterize_mesh(cam, mesh)
        to_cam = cam.position - pts
        dist = np.linalg.norm(to_cam, axis=1)
        cos = np.einsum("nd,nd->n", normals, to_cam) / dist
        cam_pts = cam.world_to_camera(pts)
        z = cam_pts[:, 2]
        ok = (cos > 0) & (z > cam.near)
        cx, cy = cam.principal_point
        zs = np.where(ok, z, 1.0)
        px = cam.focal * cam_pts[:, 0] / zs + cx
        py = cam.focal * cam_pts[:, 1] / zs + cy
        j = np.floor(px).astype(np.int64)
        i = np.floor(py).astype(np.int64)
        ok &= (j >= 0) & (j < cam.width) & (i >= 0) & (i < cam.height)
        jj, ii = np.where(ok, j, 0), np.where(ok, i, 0)
        # depth tolerance grows with the pixel footprint and with obliquity
        tol = 2.5 * z / cam.focal / np.maximum(cos, 0.1)
        ok &= z <= raster.depth[ii, jj] + tol
        a = _sample_image(alpha, px, py)
        ok &= a > min_alpha
        if not np.any(ok):
            continue
        c = _sample_image(rgb, px[ok], py[ok])
        av = a[ok][:, None]
        c = np.clip((c - (1 - av) * bg) / av, 0.0, 1.0)  # undo compositing over the background
        acc[ok] += cos[ok, None] * c
        wsum[ok] += cos[ok]
    seen = wsum > 0
    out = atlas.copy()
    out.rgb[rows[seen], cols[seen]] = acc[seen] / wsum[seen, None]
    out.coverage[rows[seen], cols[seen]] = True
    _fill_gutters(out)
    if report is not None:
        report.append(BakeReport(len(views), int(seen.sum())))
    return out


def _fill_gutters(atlas: TextureAtlas, passes: int | None = None) -> None:
    """Spread covered colours into uncovered texels of the same cell.

    Bilinear lookups near a chart edge read one texel past it; filling the
    cell keeps those reads from picking up the unbaked default colour.
    """
    if atlas.cell_index is None:
        return
    filled = atlas.coverage.copy()
    rgb = atlas.rgb
    cell = atlas.cell_index
    passes = int(atlas.cells[:, 2].max()) if passes is None else passes
    h, w = filled.shape
    for _ in range(passes):
        todo = ~filled & (cell >= 0)
        if not todo.any():
            break
        acc = np.zeros_like(rgb)
        cnt = np.zeros((h, w))
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            src = np.zeros((h, w), dtype=bool)
            dst = (slice(max(-di, 0), h - max(di, 0)), slice(max(-dj, 0), w - max(dj, 0)))
            nb = (slice(max(di, 0), h - max(-di, 0)), slice(max(dj, 0), w - max(-dj, 0)))
            src[dst] = filled[nb] & (cell[nb] == cell[dst])
            acc[dst] += np.where(src[dst][..., None], rgb[nb], 0.0)
            cnt[dst] += src[dst]
        grow = todo & (cnt > 0)
        if not grow.any():
            break
        rgb[grow] = acc[grow] / cnt[grow][:, None]
        filled |= grow


# -- refinement --------------------------------------------------------------------


def texture_mse_grad(atlas_rgb: np.ndarray, footprints: Sequence[TexelFootprint], targets: Sequence[np.ndarray],
                     background=(1.0, 1.0, 1.0)) -> tuple[float, np.ndarray]:
    """Mean squared pixel error over several renders and its gradient w.r.t. texels."""
    h, w = atlas_rgb.shape[:2]
    tex = atlas_rgb.reshape(-1, 3)
    grad = np.zeros_like(tex)
    bg = np.asarray(background, dtype=np.float64)
    total = 0.0
    n = sum(t.size for t in targets)
    for fp, target in zip(footprints, targets):
        flat = target.reshape(-1, 3)
        img = np.broadcast_to(bg, flat.shape).copy()
        img[fp.pixels] = np.einsum("pk,pkc->pc", fp.weights, tex[fp.texels])
        r = img - flat
        total += float(np.sum(r * r))
        g = 2.0 * r[fp.pixels] / n
        np.add.at(grad, fp.texels.reshape(-1), (fp.weights[..., None] * g[:, None, :]).reshape(-1, 3))
    return total / n, grad.reshape(h, w, 3)


def refine_texture(
    mesh: TriangleMesh,
    atlas: TextureAtlas,
    guidance,
    poses: Sequence[Camera],
    steps: int = 100,
    noise_level: float = 0.1,
    lr: float = 0.4,
    batch: int | None = None,
    background=(1.0, 1.0, 1.0),
    seed: int = 0,
    log: list | None = None,
) -> TextureAtlas:
    """Regress the atlas onto restored views of noise-perturbed renders.

    Each step renders a batch of poses, adds Gaussian pixel noise (its level
    decays linearly from ``noise_level`` to 0 over the run), asks
    ``guidance.restore`` for a clean target and takes a Jacobi-preconditioned
    gradient step on the pixel-wise MSE: every texel moves by ``lr`` times its
    gradient divided by the sum of its squared bilinear weights. With at most
    four texels per pixel any ``lr < 0.5`` decreases the error on the batch.
    Texels outside every footprint are never touched. Appends the batch MSE of
    each step to ``log`` when given.
    """
    poses = list(poses)
    if not poses:
        raise InvalidParameterError("refine_texture needs at least one pose")
    if steps < 0:
        raise InvalidParameterError("steps must be non-negative")
    batch = len(poses) if batch is None else max(1, min(batch, len(poses)))
    rng = np.random.default_rng(seed)
    out = atlas.copy()
    rasters = [rasterize_mesh(cam, mesh) for cam in poses]
    footprints = [_footprint(r, mesh, out) for r in rasters]
    hw = out.width * out.height
    for step in range(steps):
        level = noise_level * (1.0 - step / steps)
        chosen = np.arange(len(poses)) if batch == len(poses) else np.sort(rng.choice(len(poses), batch, replace=False))
        targets = []
        for k in chosen:
            img = render_textured(poses[k], mesh, out, background, rasters[k]).rgb
            noisy = img + level * rng.standard_normal(img.shape) if level > 0 else img
            targets.append(np.asarray(guidance.restore(noisy, poses[k], level), dtype=np.float64))
        fps = [footprints[k] for k in chosen]
        loss, grad = texture_mse_grad(out.rgb, fps, targets, background)
        if log is not None:
            log.append(loss)
        precond = np.zeros(hw)
        for fp in fps:
            np.add.at(precond, fp.texels.reshape(-1), fp.weights.reshape(-1) ** 2)
        touched = precond > 0
        n = sum(t.size for t in targets)
        tex = out.rgb.reshape(-1, 3)
        # grad = 2/n * W^T r, so the preconditioned step is lr * (W^T r) / diag(W^T W)
        tex[touched] -= lr * grad.reshape(-1, 3)[touched] * (n / 2.0) / precond[touched, None]
        np.clip(tex, 0.0, 1.0, out=tex)
    return out


def texture_mse(mesh: TriangleMesh, atlas: TextureAtlas, views: Sequence[tuple[Camera, np.ndarray]],
                background=(1.0, 1.0, 1.0)) -> float:
    fps, targets = [], []
    for cam, target in views:
        fps.append(_footprint(rasterize_mesh(cam, mesh), mesh, atlas))
        targets.append(np.asarray(target, dtype=np.float64))
    return texture_mse_grad(atlas.rgb, fps, targets, background)[0]
