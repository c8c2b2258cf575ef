"""Surface extraction from a splat cloud.

The cloud defines a density field, the opacity-weighted sum of its
unnormalized Gaussians. ``blocked_density_grid`` samples that field on a
regular grid split into blocks; each block only visits splats whose support
box (the extent beyond which a splat contributes less than ``tol / N``)
intersects it. Marching cubes turns the sampled grid into a triangle mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _skimage_marching_cubes

from .errors import EmptyMeshError, InvalidParameterError
from .gsmath import GaussianCloud, cloud_covariances

DEFAULT_THRESHOLD = 1.0
DEFAULT_TOL = 1e-5


@dataclass
class DensityGrid:
    values: np.ndarray  # (R, R, R), axis order x, y, z
    bounds: np.ndarray  # (2, 3) lower and upper corner; grid points include both

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / (self.resolution - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(self.bounds[0, a], self.bounds[1, a], self.resolution) for a in range(3)]

    def points(self) -> np.ndarray:
        xs, ys, zs = self.axes()
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    normals: np.ndarray | None = None  # (V, 3)
    uvs: np.ndarray | None = None  # (M, 2)
    uv_triangles: np.ndarray | None = None  # (T, 3) indices into uvs; None = per-vertex uvs

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise InvalidParameterError("triangle index out of range")

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @property
    def corner_uvs(self) -> np.ndarray:
        """UV coordinates per triangle corner, ``(T, 3, 2)``."""
        if self.uvs is None:
            raise InvalidParameterError("mesh has no UV coordinates")
        idx = self.triangles if self.uv_triangles is None else self.uv_triangles
        return self.uvs[idx]

    def edges(self) -> np.ndarray:
        """Unique undirected edges, ``(E, 2)`` with the smaller index first."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def edge_face_counts(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        _, counts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
        return counts

    def is_closed(self) -> bool:
        return len(self.triangles) > 0 and bool(np.all(self.edge_face_counts() == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return len(used) - len(self.edges()) + len(self.triangles)

    def face_normals(self) -> np.ndarray:
        """Unnormalized face normals (length = twice the triangle area)."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.sum(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))) / 6.0)

    def compute_normals(self) -> np.ndarray:
        fn = self.face_normals()
        vn = np.zeros_like(self.vertices)
        for c in range(3):
            np.add.at(vn, self.triangles[:, c], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return np.where(norm > 0, vn / np.where(norm > 0, norm, 1.0), 0.0)


# -- density field -----------------------------------------------------------


def _inverse_covariances(cloud: GaussianCloud) -> tuple[np.ndarray, np.ndarray]:
    cov = cloud_covariances(cloud)
    return cov, np.linalg.inv(cov) if len(cov) else np.zeros((0, 3, 3))


def density_at(points, cloud: GaussianCloud) -> np.ndarray:
    """Density at many points ``(..., 3)``, summing splats in index order."""
    points = np.asarray(points, dtype=np.float64)
    shape = points.shape[:-1]
    pts = points.reshape(-1, 3)
    out = np.zeros(len(pts))
    if len(cloud) == 0:
        return out.reshape(shape)
    _, inv = _inverse_covariances(cloud)
    opac = cloud.opacities
    for i in range(len(cloud)):
        d = pts - cloud.positions[i]
        out += opac[i] * np.exp(-0.5 * np.einsum("pi,ij,pj->p", d, inv[i], d))
    return out.reshape(shape)


def density(x, cloud: GaussianCloud) -> float:
    return float(density_at(np.asarray(x, dtype=np.float64).reshape(1, 3), cloud)[0])


def default_bounds(cloud: GaussianCloud, pad_sigmas: float = 3.0) -> np.ndarray:
    """Bounding box of the means grown by ``pad_sigmas`` times the largest scale."""
    if len(cloud) == 0:
        return np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    pad = pad_sigmas * float(cloud.scales.max())
    lo = cloud.positions.min(axis=0) - pad
    hi = cloud.positions.max(axis=0) + pad
    # keep the box non-degenerate for a single tiny splat
    half = np.maximum((hi - lo) / 2, 1e-3)
    mid = (hi + lo) / 2
    return np.stack([mid - half, mid + half])


def support_extents(cloud: GaussianCloud, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Per-axis half-widths beyond which each splat adds less than ``tol / N``.

    Zero rows mark splats that never reach ``tol / N`` anywhere.
    """
    n = len(cloud)
    if n == 0:
        return np.zeros((0, 3))
    cov = cloud_covariances(cloud)
    ratio = cloud.opacities * n / tol
    k2 = np.where(ratio > 1.0, 2.0 * np.log(np.maximum(ratio, 1.0)), 0.0)
    # the k-sigma ellipsoid's axis-aligned half-widths are k * sqrt(diag(cov))
    return np.sqrt(k2)[:, None] * np.sqrt(np.diagonal(cov, axis1=1, axis2=2))


@njit(cache=True, nogil=True)
def _bin_blocks(lo, hi, nb):
    total = nb * nb * nb
    counts = np.zeros(total + 1, dtype=np.int64)
    for i in range(lo.shape[0]):
        if lo[i, 0] < 0:
            continue
        for bx in range(lo[i, 0], hi[i, 0] + 1):
            for by in range(lo[i, 1], hi[i, 1] + 1):
                for bz in range(lo[i, 2], hi[i, 2] + 1):
                    counts[(bx * nb + by) * nb + bz + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for i in range(lo.shape[0]):
        if lo[i, 0] < 0:
            continue
        for bx in range(lo[i, 0], hi[i, 0] + 1):
            for by in range(lo[i, 1], hi[i, 1] + 1):
                for bz in range(lo[i, 2], hi[i, 2] + 1):
                    b = (bx * nb + by) * nb + bz
                    ids[fill[b]] = i
                    fill[b] += 1
    return offsets, ids


@njit(cache=True, nogil=True)
def _eval_blocks(offsets, ids, means, inv, opac, xs, ys, zs, nb, sub, out):
    for b in range(nb * nb * nb):
        lo, hi = offsets[b], offsets[b + 1]
        if lo == hi:
            continue
        bz = b % nb
        by = (b // nb) % nb
        bx = b // (nb * nb)
        for ix in range(bx * sub, (bx + 1) * sub):
            for iy in range(by * sub, (by + 1) * sub):
                for iz in range(bz * sub, (bz + 1) * sub):
                    acc = 0.0
                    for k in range(lo, hi):
                        i = ids[k]
                        dx = xs[ix] - means[i, 0]
                        dy = ys[iy] - means[i, 1]
                        dz = zs[iz] - means[i, 2]
                        q = (
                            inv[i, 0, 0] * dx * dx + inv[i, 1, 1] * dy * dy + inv[i, 2, 2] * dz * dz
                            + 2.0 * (inv[i, 0, 1] * dx * dy + inv[i, 0, 2] * dx * dz + inv[i, 1, 2] * dy * dz)
                        )
                        acc += opac[i] * np.exp(-0.5 * q)
                    out[ix, iy, iz] = acc


def blocked_density_grid(
    cloud: GaussianCloud,
    bounds=None,
    blocks: int = 16,
    sub: int = 8,
    tol: float = DEFAULT_TOL,
) -> DensityGrid:
    """Sample the density on a ``(blocks*sub)^3`` grid, block by block.

    The truncation error at any grid point is below ``tol``.
    """
    bounds = default_bounds(cloud) if bounds is None else np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if np.any(bounds[1] <= bounds[0]):
        raise InvalidParameterError(f"degenerate grid bounds {bounds.tolist()}")
    res = blocks * sub
    grid = DensityGrid(np.zeros((res, res, res)), bounds)
    if len(cloud) == 0:
        return grid
    xs, ys, zs = grid.axes()
    h = grid.spacing
    _, inv = _inverse_covariances(cloud)
    ext = support_extents(cloud, tol)
    c = cloud.positions
    with np.errstate(invalid="ignore"):
        ilo = np.ceil((c - ext - bounds[0]) / h)
        ihi = np.floor((c + ext - bounds[0]) / h)
    reaches = np.all(ext > 0, axis=1) & np.all(ihi >= 0, axis=1) & np.all(ilo <= res - 1, axis=1) & np.all(ilo <= ihi, axis=1)
    ilo = np.clip(ilo, 0, res - 1).astype(np.int64)
    ihi = np.clip(ihi, 0, res - 1).astype(np.int64)
    blo = np.where(reaches[:, None], ilo // sub, -1)
    bhi = np.where(reaches[:, None], ihi // sub, -2)
    offsets, ids = _bin_blocks(blo, bhi, blocks)
    _eval_blocks(offsets, ids, c, inv, cloud.opacities, xs, ys, zs, blocks, sub, grid.values)
    return grid


# -- surface -----------------------------------------------------------------


def weld_vertices(mesh: TriangleMesh, tol: float) -> TriangleMesh:
    key = np.round(mesh.vertices / tol).astype(np.int64) if tol > 0 else mesh.vertices
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)  # keep first-seen ordering for determinism
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    verts = mesh.vertices[first[order]]
    tris = rank[inverse.reshape(-1)][mesh.triangles]
    return TriangleMesh(verts, tris)


def marching_cubes(grid: DensityGrid, threshold: float = DEFAULT_THRESHOLD) -> TriangleMesh:
    """Isosurface at ``threshold`` with outward (density-decreasing) winding."""
    if not threshold > 0:
        raise InvalidParameterError("threshold must be positive")
    v = grid.values
    if v.max() < threshold or v.min() > threshold:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = _skimage_marching_cubes(v, level=threshold, spacing=tuple(grid.spacing), method="lorensen")
    mesh = TriangleMesh(verts + grid.bounds[0], faces)
    diag = float(np.linalg.norm(grid.bounds[1] - grid.bounds[0]))
    mesh = weld_vertices(mesh, 1e-6 * diag)
    mesh = _drop_degenerate(mesh)
    # orient so that face normals point down the density gradient
    if len(mesh.triangles):
        fn = mesh.face_normals()
        centroids = mesh.vertices[mesh.triangles].mean(axis=1)
        probe = 0.5 * float(grid.spacing.min())
        unit = fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
        outside = _interp(grid, centroids + probe * unit)
        inside = _interp(grid, centroids - probe * unit)
        if np.sum(outside < inside) < 0.5 * len(fn):
            mesh.triangles = mesh.triangles[:, ::-1].copy()
    mesh.normals = mesh.compute_normals()
    return mesh


def _interp(grid: DensityGrid, pts: np.ndarray) -> np.ndarray:
    from scipy.ndimage import map_coordinates

    idx = ((pts - grid.bounds[0]) / grid.spacing).T
    return map_coordinates(grid.values, idx, order=1, mode="nearest")


def _drop_degenerate(mesh: TriangleMesh) -> TriangleMesh:
    t = mesh.triangles
    ok = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    mesh = TriangleMesh(mesh.vertices, t[ok])
    ok = mesh.areas() > 0
    return TriangleMesh(mesh.vertices, mesh.triangles[ok])


def _compact(mesh: TriangleMesh) -> TriangleMesh:
    used = np.unique(mesh.triangles)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[mesh.triangles])


def mesh_components(mesh: TriangleMesh) -> np.ndarray:
    """Component label per triangle (triangles sharing a vertex are connected)."""
    t = len(mesh.triangles)
    rows = np.repeat(np.arange(t), 3)
    adj = coo_matrix((np.ones(3 * t), (rows, mesh.triangles.reshape(-1))), shape=(t, len(mesh.vertices))).tocsr()
    tri_adj = adj @ adj.T
    _, labels = connected_components(tri_adj, directed=False)
    return labels


def mesh_cleanup(mesh: TriangleMesh, min_component_fraction: float = 0.05) -> TriangleMesh:
    """Drop degenerate triangles, small components and unused vertices."""
    if mesh.is_empty:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mesh = _drop_degenerate(mesh)
    if mesh.is_empty:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    labels = mesh_components(mesh)
    sizes = np.bincount(labels)
    keep = sizes[labels] >= min_component_fraction * len(labels)
    mesh = _compact(TriangleMesh(mesh.vertices, mesh.triangles[keep]))
    mesh.normals = mesh.compute_normals()
    return mesh


def extract_mesh(
    cloud: GaussianCloud,
    threshold: float = DEFAULT_THRESHOLD,
    blocks: int = 16,
    sub: int = 8,
    bounds=None,
    min_component_fraction: float = 0.05,
) -> TriangleMesh:
    grid = blocked_density_grid(cloud, bounds, blocks, sub)
    return mesh_cleanup(marching_cubes(grid, threshold), min_component_fraction)


# -- chamfer distance ----------------------------------------------------------


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.triangles[tri]]
    return (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]


@njit(cache=True, nogil=True)
def _point_triangle_dist2(p, a, b, c):
    # closest point on a triangle, by Voronoi region of the query point
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return ap @ ap
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return bp @ bp
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        q = ap - v * ab
        return q @ q
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return cp @ cp
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        q = ap - w * ac
        return q @ q
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        q = bp - w * (c - b)
        return q @ q
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    q = ap - ab * v - ac * w
    return q @ q


@njit(cache=True, nogil=True)
def _min_dist(points, offsets, cand, verts, tris, out):
    for i in range(points.shape[0]):
        best = out[i] * out[i]
        for k in range(offsets[i], offsets[i + 1]):
            t = cand[k]
            d2 = _point_triangle_dist2(points[i], verts[tris[t, 0]], verts[tris[t, 1]], verts[tris[t, 2]])
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)


def point_to_surface(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Exact distance from each point to the nearest point on ``mesh``."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    verts = mesh.vertices
    upper, _ = cKDTree(verts).query(points)
    tri_v = verts[mesh.triangles]
    centroids = tri_v.mean(axis=1)
    reach = float(np.linalg.norm(tri_v - centroids[:, None], axis=2).max())
    # any triangle closer than the nearest vertex has its centroid within
    # upper + reach of the point
    tree = cKDTree(centroids)
    lists = tree.query_ball_point(points, upper + reach + 1e-12)
    counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    cand = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=int(offsets[-1]))
    out = upper.copy()
    _min_dist(points, offsets, cand, verts, mesh.triangles, out)
    return out


def chamfer_distance(a: TriangleMesh, b: TriangleMesh, samples: int = 20000, seed: int = 0) -> float:
    """Symmetric mean point-to-surface distance, averaged over both directions."""
    if a.is_empty or b.is_empty:
        raise EmptyMeshError("chamfer distance needs two non-empty meshes")
    # each mesh gets its own stream so swapping the arguments swaps the terms
    pa = sample_surface(a, samples, np.random.default_rng(seed))
    pb = sample_surface(b, samples, np.random.default_rng(seed))
    return 0.5 * (float(point_to_surface(pa, b).mean()) + float(point_to_surface(pb, a).mean()))


def copy_mesh(mesh: TriangleMesh) -> TriangleMesh:
    return replace(
        mesh,
        vertices=mesh.vertices.copy(),
        triangles=mesh.triangles.copy(),
        normals=None if mesh.normals is None else mesh.normals.copy(),
        uvs=None if mesh.uvs is None else mesh.uvs.copy(),
        uv_triangles=None if mesh.uv_triangles is None else mesh.uv_triangles.copy(),
    )
