"""End-to-end pipeline steps shared by the command line and the tests.

A run reads a *scene bundle* (ground-truth cloud plus training and held-out
renders, written by ``synthesize_bundle``), fits a cloud to the training
images while assuming some elevation for their cameras, extracts and textures
a mesh, and scores the result on the held-out views.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .assets import (
    RunConfig,
    load_image_rgba,
    load_obj,
    load_splats,
    parse_view_spec,
    save_config,
    save_png,
    save_splats,
    save_training_metrics,
    serialize_config,
    to_uint8,
    write_csv,
)
from .camera import Camera, Intrinsics, OrbitSpec, baking_view_set, orbit_camera, ring_azimuths
from .errors import EmptyMeshError, InvalidParameterError, SplatError
from .gsmath import GaussianCloud, init_cloud_random_sphere
from .meshex import TriangleMesh, blocked_density_grid, chamfer_distance, marching_cubes, mesh_cleanup
from .metrics import psnr, ssim
from .rasterizer import DEFAULT_SETTINGS, RasterSettings, render
from .scenes import PRESETS, build_scene
from .texture import (
    TextureAtlas,
    bake_texture,
    render_textured,
    required_atlas_size,
    uv_unwrap,
)
from .trainer import TrainState, fit, photometric_guidance

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
SWEEP_COLUMNS = ["assumed_elevation", "held_out_psnr", "held_out_ssim", "chamfer", "splat_count", "runtime_s", "status"]
SWEEP_CSV_VERSION = 1
STRIP_AZIMUTHS = (30.0, 150.0, 270.0)


def intrinsics_for(cfg: RunConfig, size: int | None = None) -> Intrinsics:
    w = cfg.width if size is None else size
    h = cfg.height if size is None else size
    return Intrinsics(fov_y=cfg.fov_y, width=w, height=h)


def raster_settings(cfg: RunConfig) -> RasterSettings:
    return replace(DEFAULT_SETTINGS, workers=cfg.workers)


# -- scene bundle -------------------------------------------------------------------


@dataclass
class View:
    camera: Camera
    rgb: np.ndarray
    alpha: np.ndarray
    elevation: float
    azimuth: float


@dataclass
class Bundle:
    root: Path
    meta: dict
    ground_truth: GaussianCloud
    train: list[View]
    heldout: list[View]

    @property
    def true_elevation(self) -> float:
        return float(self.meta["true_elevation"])

    @property
    def intrinsics(self) -> Intrinsics:
        m = self.meta
        return Intrinsics(fov_y=m["fov_y"], width=m["width"], height=m["height"])


def heldout_poses(cfg: RunConfig) -> list[tuple[float, float]]:
    """Held-out views: mid-way between training azimuths, alternately above and below the ring."""
    if cfg.n_heldout == 0:
        return []
    train_az = ring_azimuths(cfg.n_views, cfg.seed)
    step = 360.0 / cfg.n_views
    idx = np.linspace(0, cfg.n_views, cfg.n_heldout, endpoint=False).astype(int)
    poses = []
    for k, i in enumerate(idx):
        offset = cfg.heldout_elevation_offset * (1 if k % 2 == 0 else -1)
        el = float(np.clip(cfg.true_elevation + offset, -89.0, 89.0))
        poses.append((el, float(train_az[i] + 0.5 * step)))
    return poses


def synthesize_bundle(cfg: RunConfig) -> Path:
    """Render a preset scene from its true elevation and store everything under ``cfg.input``."""
    if cfg.preset not in PRESETS:
        raise InvalidParameterError(f"unknown scene preset {cfg.preset!r}; available: {', '.join(sorted(PRESETS))}")
    root = Path(cfg.input)
    (root / "train").mkdir(parents=True, exist_ok=True)
    (root / "heldout").mkdir(parents=True, exist_ok=True)
    gt = build_scene(cfg.preset, seed=cfg.seed, sh_degree=0)
    save_splats(gt, root / "gt.ply")
    intr = intrinsics_for(cfg)
    settings = raster_settings(cfg)
    bg = tuple(cfg.background)
    meta = {
        "format_version": BUNDLE_VERSION,
        "preset": cfg.preset,
        "seed": cfg.seed,
        "true_elevation": cfg.true_elevation,
        "radius": cfg.radius,
        "fov_y": cfg.fov_y,
        "width": cfg.width,
        "height": cfg.height,
        "background": list(bg),
        "extent": PRESETS[cfg.preset].extent,
        "train": [],
        "heldout": [],
    }
    train = [(cfg.true_elevation, float(az)) for az in ring_azimuths(cfg.n_views, cfg.seed)]
    for group, poses in (("train", train), ("heldout", heldout_poses(cfg))):
        for k, (el, az) in enumerate(poses):
            cam = orbit_camera(OrbitSpec(el, az, cfg.radius), intr)
            out = render(cam, gt, bg, settings)
            name = f"{group}/{k:03d}.png"
            save_png(root / name, out.rgb, out.alpha)
            meta[group].append({"file": name, "elevation": el, "azimuth": az})
    (root / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    return root


def load_bundle(path) -> Bundle:
    root = Path(path)
    meta_path = root / "scene.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no scene bundle at {root} (missing scene.json); run 'splatsweep synth' first")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != BUNDLE_VERSION:
        raise InvalidParameterError(f"unsupported bundle format_version {meta.get('format_version')}")
    intr = Intrinsics(fov_y=meta["fov_y"], width=meta["width"], height=meta["height"])

    def views(group):
        out = []
        for rec in meta[group]:
            rgb, alpha = load_image_rgba(root / rec["file"])
            cam = orbit_camera(OrbitSpec(rec["elevation"], rec["azimuth"], meta["radius"]), intr)
            out.append(View(cam, rgb, alpha, rec["elevation"], rec["azimuth"]))
        return out

    return Bundle(root, meta, load_splats(root / "gt.ply"), views("train"), views("heldout"))


# -- fitting ----------------------------------------------------------------------


def assumed_cameras(bundle: Bundle, elevation: float) -> list[Camera]:
    """Training cameras as the fitter believes them to be: stored azimuths, assumed elevation."""
    return [
        orbit_camera(OrbitSpec(elevation, v.azimuth, bundle.meta["radius"]), bundle.intrinsics)
        for v in bundle.train
    ]


@dataclass
class FitResult:
    state: TrainState
    cameras: list[Camera]
    runtime_s: float

    @property
    def cloud(self) -> GaussianCloud:
        return self.state.cloud


def fit_bundle(cfg: RunConfig, bundle: Bundle, callback=None) -> FitResult:
    cams = assumed_cameras(bundle, cfg.elevation)
    guidance = photometric_guidance(
        [(c, v.rgb, v.alpha) for c, v in zip(cams, bundle.train)], cfg.lambda_dssim, cfg.alpha_weight
    )
    init = init_cloud_random_sphere(cfg.init_splats, cfg.init_radius, seed=cfg.seed, sh_degree=cfg.sh_degree)
    t0 = time.perf_counter()
    state = fit(init, guidance, cams, cfg.train_config(), raster_settings(cfg), callback)
    return FitResult(state, cams, time.perf_counter() - t0)


@dataclass
class HeldOutScore:
    psnr: float
    ssim: float
    per_view_psnr: list[float]


def score_heldout(cloud: GaussianCloud, bundle: Bundle, cfg: RunConfig) -> HeldOutScore:
    """PSNR of the mean squared error over all held-out views, and mean SSIM."""
    if not bundle.heldout:
        raise InvalidParameterError("bundle has no held-out views")
    bg = tuple(bundle.meta["background"])
    errs, ssims, per_view = [], [], []
    for v in bundle.heldout:
        out = render(v.camera, cloud, bg, raster_settings(cfg))
        img = to_uint8(out.rgb) / 255.0  # score what would be written to disk
        errs.append(float(np.mean((img - v.rgb) ** 2)))
        ssims.append(ssim(img, v.rgb))
        per_view.append(psnr(img, v.rgb))
    mse = float(np.mean(errs))
    return HeldOutScore(math.inf if mse == 0 else 10 * math.log10(1 / mse), float(np.mean(ssims)), per_view)


# -- meshing ----------------------------------------------------------------------


def extract_surface(cloud: GaussianCloud, cfg: RunConfig, threshold: float | None = None) -> TriangleMesh:
    threshold = cfg.mesh_threshold if threshold is None else threshold
    grid = blocked_density_grid(cloud, None, cfg.grid_blocks, cfg.grid_sub)
    mesh = mesh_cleanup(marching_cubes(grid, threshold), cfg.min_component_fraction)
    if mesh.is_empty:
        peak = float(grid.values.max())
        raise EmptyMeshError(
            f"no surface at threshold {threshold} (grid peak density {peak:.4g}); "
            "try a lower mesh_threshold or sweep several values"
        )
    return mesh


def texture_mesh(mesh: TriangleMesh, cloud: GaussianCloud, cfg: RunConfig, report: list | None = None):
    size = cfg.atlas_size
    need = required_atlas_size(len(mesh))
    if need > size:
        log.warning("atlas_size %d too small for %d triangles; using %d", size, len(mesh), need)
        size = need
    mesh_uv, atlas = uv_unwrap(mesh, size)
    views = baking_view_set(cfg.radius, intrinsics_for(cfg, cfg.bake_resolution))
    atlas = bake_texture(mesh_uv, atlas, cloud, views, background=tuple(cfg.background),
                         settings=raster_settings(cfg), report=report)
    return mesh_uv, atlas


def atlas_from_image(rgb: np.ndarray) -> TextureAtlas:
    h, w = rgb.shape[:2]
    return TextureAtlas(rgb.copy(), np.zeros((h, w), dtype=bool), np.full((h, w), -1, dtype=np.int64),
                        np.zeros((0, 3), dtype=np.int64))


def load_textured_mesh(path) -> tuple[TriangleMesh, TextureAtlas]:
    path = Path(path)
    mesh = load_obj(path.with_suffix(".obj"))
    rgb, _ = load_image_rgba(path.with_suffix(".png"))
    return mesh, atlas_from_image(rgb)


# -- sweep -------------------------------------------------------------------------


def config_hash(cfg: RunConfig) -> str:
    data = cfg.to_dict()
    for key in ("output", "workers"):
        data.pop(key)
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


def _round(x: float) -> str:
    if x is None or not np.isfinite(x):
        return "inf" if x == math.inf else "nan"
    return f"{x:.4f}"


def render_strip(cloud: GaussianCloud, bundle: Bundle, cfg: RunConfig) -> np.ndarray:
    """Three renders side by side at the true elevation."""
    bg = tuple(bundle.meta["background"])
    tiles = []
    for az in STRIP_AZIMUTHS:
        cam = orbit_camera(OrbitSpec(bundle.true_elevation, az, bundle.meta["radius"]), bundle.intrinsics)
        tiles.append(render(cam, cloud, bg, raster_settings(cfg)).rgb)
    return np.concatenate(tiles, axis=1)


def angle_tag(angle: float) -> str:
    return f"elev_{angle:+06.1f}".replace(".", "p")


@dataclass
class SweepReport:
    rows: list[dict]
    meta: dict


def run_sweep(cfg: RunConfig, bundle: Bundle | None = None, progress=None) -> SweepReport:
    """Fit, mesh and score one run per assumed elevation; failures become marked rows."""
    bundle = load_bundle(cfg.input) if bundle is None else bundle
    out_dir = Path(cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt_mesh = extract_surface(bundle.ground_truth, cfg, cfg.gt_mesh_threshold)
    rows = []
    for angle in sorted(cfg.sweep_angles):
        t0 = time.perf_counter()
        run_cfg = replace(cfg, elevation=float(angle))
        sub = out_dir / angle_tag(angle)
        sub.mkdir(exist_ok=True)
        row = {"assumed_elevation": f"{angle:.4f}"}
        try:
            res = fit_bundle(run_cfg, bundle)
            save_splats(res.cloud, sub / "splats.ply")
            save_training_metrics(res.state.history, sub / "metrics.csv")
            score = score_heldout(res.cloud, bundle, run_cfg)
            save_png(out_dir / f"strip_{angle_tag(angle)}.png", render_strip(res.cloud, bundle, run_cfg))
            try:
                mesh = extract_surface(res.cloud, run_cfg)
                chamfer = chamfer_distance(mesh, gt_mesh, cfg.chamfer_samples, cfg.seed)
                status = "ok"
            except EmptyMeshError as exc:
                chamfer, status = float("nan"), f"failed: EmptyMeshError: {exc}"
            row.update(
                held_out_psnr=_round(score.psnr),
                held_out_ssim=_round(score.ssim),
                chamfer=_round(chamfer),
                splat_count=str(len(res.cloud)),
                status=status,
            )
        except (SplatError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.error("sweep angle %s failed: %s", angle, exc)
            row.update(held_out_psnr="nan", held_out_ssim="nan", chamfer="nan", splat_count="0",
                       status=f"failed: {type(exc).__name__}: {exc}")
        row["runtime_s"] = f"{time.perf_counter() - t0:.1f}"
        rows.append(row)
        if progress is not None:
            progress(row)
    meta = {
        "csv_version": SWEEP_CSV_VERSION,
        "true_elevation": bundle.true_elevation,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "columns": SWEEP_COLUMNS,
    }
    write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    (out_dir / "sweep_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    save_config(cfg, out_dir / "config.yaml")
    return SweepReport(rows, meta)


# -- rendering ---------------------------------------------------------------------


def render_views(cfg: RunConfig) -> list[Path]:
    if not cfg.views:
        raise InvalidParameterError("no views requested; pass --views 'elevation,azimuth' ...")
    out_dir = Path(cfg.output) / "renders"
    out_dir.mkdir(parents=True, exist_ok=True)
    intr = intrinsics_for(cfg)
    bg = tuple(cfg.background)
    paths = []
    if cfg.mesh:
        mesh, atlas = load_textured_mesh(cfg.mesh)
        source = None
    else:
        path = Path(cfg.splats) if cfg.splats else Path(cfg.output) / "splats.ply"
        if not path.is_file():
            raise FileNotFoundError(f"splat archive {path} not found")
        source = load_splats(path)
    for k, spec in enumerate(cfg.views):
        el, az = parse_view_spec(spec)
        cam = orbit_camera(OrbitSpec(el, az, cfg.radius), intr)
        if source is not None:
            out = render(cam, source, bg, raster_settings(cfg))
            rgb, alpha = out.rgb, out.alpha
        else:
            tr = render_textured(cam, mesh, atlas, bg)
            rgb, alpha = tr.rgb, tr.alpha
        p = out_dir / f"view_{k:03d}.png"
        save_png(p, rgb, alpha)
        paths.append(p)
    return paths


def write_run_snapshot(cfg: RunConfig) -> None:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(serialize_config(cfg))

