"""File formats: splat PLY archives, OBJ/MTL meshes, PNG images, CSV reports,
density-grid dumps and the YAML run configuration.

Byte-level layouts are documented in FORMATS.md at the repository root.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import yaml

from .errors import (
    ConfigError,
    FormatError,
    ImageReadError,
    InvalidParameterError,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .gsmath import MAX_SH_DEGREE, GaussianCloud, num_sh_coeffs
from .meshex import DensityGrid, TriangleMesh
from .trainer import TrainConfig

SPLAT_FORMAT_VERSION = 1
_CHANNELS = ("r", "g", "b")


# -- splat archive ---------------------------------------------------------------


def splat_property_names(sh_degree: int) -> list[str]:
    names = ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "log_scale_x", "log_scale_y", "log_scale_z", "opacity_logit"]
    for k in range(num_sh_coeffs(sh_degree)):
        names += [f"sh{k}_{c}" for c in _CHANNELS]
    return names


def _pack_cloud(cloud: GaussianCloud) -> np.ndarray:
    n = len(cloud)
    return np.ascontiguousarray(
        np.concatenate(
            [
                cloud.positions,
                cloud.rotations,
                cloud.log_scales,
                cloud.opacity_logits[:, None],
                cloud.sh_coeffs.reshape(n, 3 * cloud.sh_coeffs.shape[1]),
            ],
            axis=1,
        ),
        dtype="<f8",
    )


def save_splats(cloud: GaussianCloud, path) -> None:
    names = splat_property_names(cloud.sh_degree)
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment format_version {SPLAT_FORMAT_VERSION}",
        f"comment sh_degree {cloud.sh_degree}",
        f"element vertex {len(cloud)}",
        *[f"property double {name}" for name in names],
        "end_header",
    ]
    data = _pack_cloud(cloud)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _read_header(blob: bytes) -> tuple[dict, int]:
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n"):
        raise MalformedHeaderError("missing 'ply' magic", 0)
    if end < 0:
        raise MalformedHeaderError("no 'end_header' line", len(blob))
    info = {"comments": {}, "properties": [], "count": None, "format": None}
    offset = 4
    for raw in blob[4:end].split(b"\n"):
        line_start = offset
        offset += len(raw) + 1
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise MalformedHeaderError("non-ASCII header line", line_start) from None
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if key == "format":
            if len(parts) != 3:
                raise MalformedHeaderError(f"bad format line {line!r}", line_start)
            info["format"] = (parts[1], parts[2], line_start)
        elif key == "comment":
            if len(parts) >= 3:
                info["comments"][parts[1]] = (parts[2], line_start)
        elif key == "element":
            if len(parts) != 3 or parts[1] != "vertex" or info["count"] is not None:
                raise MalformedHeaderError(f"unexpected element line {line!r}", line_start)
            try:
                info["count"] = int(parts[2])
            except ValueError:
                raise MalformedHeaderError(f"bad vertex count {parts[2]!r}", line_start) from None
            if info["count"] < 0:
                raise MalformedHeaderError("negative vertex count", line_start)
        elif key == "property":
            if len(parts) != 3:
                raise MalformedHeaderError(f"bad property line {line!r}", line_start)
            info["properties"].append((parts[1], parts[2], line_start))
        else:
            raise MalformedHeaderError(f"unknown header keyword {key!r}", line_start)
    return info, end + len(b"end_header\n")


def _int_comment(info: dict, key: str, offset: int) -> tuple[int, int]:
    if key not in info["comments"]:
        raise MalformedHeaderError(f"missing '{key}' comment", offset)
    value, at = info["comments"][key]
    try:
        return int(value), at
    except ValueError:
        raise MalformedHeaderError(f"'{key}' is not an integer: {value!r}", at) from None


def load_splats(path) -> GaussianCloud:
    blob = Path(path).read_bytes()
    info, data_start = _read_header(blob)
    if info["format"] is None:
        raise MalformedHeaderError("missing format line", 4)
    fmt, ver, at = info["format"]
    if fmt != "binary_little_endian" or ver != "1.0":
        raise MalformedHeaderError(f"unsupported PLY encoding {fmt} {ver}", at)
    version, at = _int_comment(info, "format_version", data_start)
    if version != SPLAT_FORMAT_VERSION:
        raise UnsupportedVersionError(f"archive format_version {version}, this reader supports {SPLAT_FORMAT_VERSION}", at)
    degree, at = _int_comment(info, "sh_degree", data_start)
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise MalformedHeaderError(f"sh_degree {degree} outside [0, {MAX_SH_DEGREE}]", at)
    if info["count"] is None:
        raise MalformedHeaderError("missing 'element vertex' line", data_start)
    expected = splat_property_names(degree)
    got = [p[1] for p in info["properties"]]
    if got != expected:
        at = info["properties"][0][2] if info["properties"] else data_start
        raise MalformedHeaderError(f"property list does not match sh_degree {degree}", at)
    for typ, name, at in info["properties"]:
        if typ != "double":
            raise MalformedHeaderError(f"property {name} has type {typ}, expected double", at)
    n = info["count"]
    record = 8 * len(expected)
    payload = len(blob) - data_start
    if payload < n * record:
        raise TruncatedPayloadError(
            f"payload holds {payload // record} complete records, header declares {n}",
            expected=n,
            actual=payload // record,
            offset=data_start + (payload // record) * record,
        )
    if payload > n * record:
        raise FormatError(f"{payload - n * record} unexpected trailing bytes", data_start + n * record)
    data = np.frombuffer(blob, dtype="<f8", count=n * len(expected), offset=data_start).reshape(n, len(expected))
    data = data.astype(np.float64)
    k = num_sh_coeffs(degree)
    return GaussianCloud(
        data[:, 0:3].copy(),
        data[:, 3:7].copy(),
        data[:, 7:10].copy(),
        data[:, 10].copy(),
        data[:, 11:].reshape(n, k, 3).copy(),
        degree,
    )


# -- images ----------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, rgb: np.ndarray, alpha: np.ndarray | None = None, bit_depth: int = 8) -> None:
    """Write an RGB or RGBA PNG from float images in [0, 1]."""
    if bit_depth not in (8, 16):
        raise InvalidParameterError("bit_depth must be 8 or 16")
    rgb = np.asarray(rgb, dtype=np.float64)
    chans = [rgb[..., 2], rgb[..., 1], rgb[..., 0]]  # OpenCV stores BGR
    if alpha is not None:
        chans.append(np.asarray(alpha, dtype=np.float64))
    img = np.stack(chans, axis=-1)
    if bit_depth == 8:
        data = to_uint8(img)
    else:
        data = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"could not write image {path}")


def load_image_rgba(path) -> tuple[np.ndarray, np.ndarray]:
    """RGB in [0, 1] and a foreground mask (alpha channel, or all ones)."""
    path = str(path)
    if not os.path.isfile(path):
        raise ImageReadError(f"{path}: no such file")
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ImageReadError(f"{path}: not a readable image")
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    img = img.astype(np.float64) / scale
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] in (1, 2):
        rgb = np.repeat(img[..., :1], 3, axis=2)
        alpha = img[..., 1] if img.shape[2] == 2 else np.ones(img.shape[:2])
    else:
        rgb = img[..., 2::-1]
        alpha = img[..., 3] if img.shape[2] == 4 else np.ones(img.shape[:2])
    return np.ascontiguousarray(rgb), np.ascontiguousarray(alpha)


# -- meshes ----------------------------------------------------------------------


def save_mesh_obj(mesh: TriangleMesh, atlas, path) -> tuple[Path, Path, Path]:
    """Write ``name.obj``, ``name.mtl`` and ``name.png``; returns the three paths."""
    if mesh.uvs is None:
        raise InvalidParameterError("mesh has no UV coordinates; unwrap it before export")
    path = Path(path)
    obj = path.with_suffix(".obj")
    mtl = path.with_suffix(".mtl")
    png = path.with_suffix(".png")
    normals = mesh.normals if mesh.normals is not None else mesh.compute_normals()
    uv_tris = mesh.triangles if mesh.uv_triangles is None else mesh.uv_triangles
    lines = [f"mtllib {mtl.name}", "usemtl atlas"]
    lines += [f"v {x:.7g} {y:.7g} {z:.7g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.7g} {v:.7g}" for u, v in mesh.uvs]
    lines += [f"vn {x:.7g} {y:.7g} {z:.7g}" for x, y, z in normals]
    for (a, b, c), (ta, tb, tc) in zip(mesh.triangles + 1, uv_tris + 1):
        lines.append(f"f {a}/{ta}/{a} {b}/{tb}/{b} {c}/{tc}/{c}")
    obj.write_text("\n".join(lines) + "\n")
    mtl.write_text(
        "newmtl atlas\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nd 1\nillum 1\n" f"map_Kd {png.name}\n"
    )
    if atlas is not None:
        save_png(png, atlas.rgb)
    return obj, mtl, png


def _obj_index(tok: str, count: int, line_no: int) -> int:
    try:
        i = int(tok)
    except ValueError:
        raise FormatError(f"line {line_no}: bad index {tok!r}") from None
    i = i - 1 if i > 0 else count + i
    if not 0 <= i < count:
        raise FormatError(f"line {line_no}: index {tok} out of range (have {count})")
    return i


def load_obj(path) -> TriangleMesh:
    """Parse triangles or polygons (fan-triangulated); `vt` and `vn` are optional."""
    verts, uvs, norms = [], [], []
    tris, uv_tris = [], []
    has_uv = True
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "vn":
                norms.append([float(x) for x in parts[1:4]])
        except ValueError:
            raise FormatError(f"line {line_no}: bad number in {raw!r}") from None
        if parts[0] == "f":
            corners = []
            for tok in parts[1:]:
                fields_ = tok.split("/")
                vi = _obj_index(fields_[0], len(verts), line_no)
                ti = _obj_index(fields_[1], len(uvs), line_no) if len(fields_) > 1 and fields_[1] else None
                corners.append((vi, ti))
            if len(corners) < 3:
                raise FormatError(f"line {line_no}: face with fewer than 3 corners")
            for k in range(1, len(corners) - 1):
                tri = (corners[0], corners[k], corners[k + 1])
                tris.append([c[0] for c in tri])
                if any(c[1] is None for c in tri):
                    has_uv = False
                else:
                    uv_tris.append([c[1] for c in tri])
    mesh = TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
    if uvs and has_uv:
        mesh.uvs = np.array(uvs, dtype=np.float64)
        mesh.uv_triangles = np.array(uv_tris, dtype=np.int64).reshape(-1, 3)
    if len(norms) == len(verts) and norms:
        mesh.normals = np.array(norms, dtype=np.float64)
    return mesh


# -- density grid dump ------------------------------------------------------------

_GRID_MAGIC = b"SSGRID1\n"
_GRID_HEADER = struct.Struct("<8sI6d")


def save_grid(grid: DensityGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(_GRID_MAGIC, grid.resolution, *grid.bounds.reshape(-1)))
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def load_grid(path) -> DensityGrid:
    blob = Path(path).read_bytes()
    if len(blob) < _GRID_HEADER.size:
        raise MalformedHeaderError("grid header truncated", len(blob))
    magic, res, *bounds = _GRID_HEADER.unpack_from(blob)
    if magic != _GRID_MAGIC:
        raise MalformedHeaderError("bad grid magic", 0)
    n = res**3
    have = (len(blob) - _GRID_HEADER.size) // 8
    if have != n:
        raise TruncatedPayloadError(f"grid holds {have} values, expected {n}", expected=n, actual=have,
                                    offset=_GRID_HEADER.size)
    values = np.frombuffer(blob, dtype="<f8", offset=_GRID_HEADER.size).reshape(res, res, res).astype(np.float64)
    return DensityGrid(values, np.array(bounds).reshape(2, 3))


# -- CSV -------------------------------------------------------------------------


def write_csv(path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_training_metrics(history: list[dict], path) -> None:
    write_csv(path, ["iteration", "loss", "splat_count", "timestep"], history)


# -- run configuration -------------------------------------------------------------

DEFAULT_SWEEP_ANGLES = (-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0)
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    """Every knob of a pipeline run. Only ``input`` has no default."""

    input: str
    output: str = "run"
    elevation: float = 0.0  # assumed elevation of the input views, degrees
    seed: int = 0
    workers: int = 1
    # scene synthesis
    preset: str = "critter"
    true_elevation: float = 0.0
    n_views: int = 24
    n_heldout: int = 8
    heldout_elevation_offset: float = 7.5
    # camera
    radius: float = 2.0
    fov_y: float = 49.1
    width: int = 64
    height: int = 64
    # initialization
    init_splats: int = 1000
    init_radius: float = 0.6
    sh_degree: int = 0
    # optimization (mirrors TrainConfig)
    lambda_dssim: float = 0.2
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    iterations: int = 5000
    densify_interval: int = 100
    densify_from: int = 100
    densify_until: float = 0.5
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    split_scale_threshold: float = 0.01
    split_factor: float = 1.6
    max_splats: int = 20000
    t_max: float = 0.98
    t_min: float = 0.02
    alpha_weight: float = 0.1
    background: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    log_interval: int = 50
    # mesh and texture
    mesh_threshold: float = 1.0  # applied to fitted clouds
    gt_mesh_threshold: float = 1.0  # applied to the ground-truth cloud when scoring
    grid_blocks: int = 16
    grid_sub: int = 8
    min_component_fraction: float = 0.05
    atlas_size: int = 1024
    bake_resolution: int = 128
    refine_steps: int = 50
    refine_noise: float = 0.1
    chamfer_samples: int = 20000
    # sweep and rendering
    sweep_angles: list = field(default_factory=lambda: list(DEFAULT_SWEEP_ANGLES))
    views: list = field(default_factory=list)  # "elevation,azimuth" strings for the render command
    splats: str = ""  # explicit splat archive for extract/render; default <output>/splats.ply
    mesh: str = ""  # explicit OBJ for refine/render

    def __post_init__(self):
        validate_config(self)

    def train_config(self) -> TrainConfig:
        kwargs = {name: getattr(self, name) for name in _TRAIN_FIELDS if hasattr(self, name)}
        kwargs["background"] = tuple(float(c) for c in self.background)
        return TrainConfig(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


_RANGES = {
    "elevation": (-90.0, 90.0),
    "true_elevation": (-90.0, 90.0),
    "heldout_elevation_offset": (-90.0, 90.0),
    "fov_y": (1e-6, 179.999),
    "lambda_dssim": (0.0, 1.0),
    "densify_until": (0.0, 1.0),
    "t_max": (0.0, 1.0),
    "t_min": (0.0, 1.0),
    "alpha_weight": (0.0, float("inf")),
    "refine_noise": (0.0, float("inf")),
    "min_component_fraction": (0.0, 1.0),
}
_POSITIVE = (
    "radius", "lr_position", "lr_position_final", "lr_rotation", "lr_scale", "lr_opacity", "lr_sh",
    "densify_grad_threshold", "prune_opacity_threshold", "split_scale_threshold", "split_factor",
    "mesh_threshold", "gt_mesh_threshold", "init_radius",
)
_AT_LEAST_ONE = (
    "workers", "n_views", "width", "height", "init_splats", "iterations", "densify_interval",
    "max_splats", "grid_blocks", "grid_sub", "atlas_size", "bake_resolution", "chamfer_samples",
)
_NON_NEGATIVE_INT = ("n_heldout", "densify_from", "log_interval", "refine_steps", "seed")


def validate_config(cfg: RunConfig) -> None:
    if not isinstance(cfg.input, str) or not cfg.input:
        raise ConfigError("input: a non-empty path is required")
    for name, (lo, hi) in _RANGES.items():
        v = getattr(cfg, name)
        if not lo <= v <= hi:
            raise ConfigError(f"{name}: {v} outside allowed range [{lo}, {hi}]")
    for name in _POSITIVE:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name}: must be > 0, got {getattr(cfg, name)}")
    for name in _AT_LEAST_ONE:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name}: must be >= 1, got {getattr(cfg, name)}")
    for name in _NON_NEGATIVE_INT:
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name}: must be >= 0, got {getattr(cfg, name)}")
    if not 0 <= cfg.sh_degree <= MAX_SH_DEGREE:
        raise ConfigError(f"sh_degree: {cfg.sh_degree} outside allowed range [0, {MAX_SH_DEGREE}]")
    if len(cfg.background) != 3 or not all(0.0 <= c <= 1.0 for c in cfg.background):
        raise ConfigError("background: expected three values in [0, 1]")
    for a in cfg.sweep_angles:
        if not -90.0 <= a <= 90.0:
            raise ConfigError(f"sweep_angles: {a} outside allowed range [-90, 90]")
    if not cfg.sweep_angles:
        raise ConfigError("sweep_angles: at least one angle is required")
    for v in cfg.views:
        parse_view_spec(v)


def parse_view_spec(text) -> tuple[float, float]:
    """``"elevation,azimuth"`` in degrees."""
    try:
        el, az = (float(x) for x in str(text).split(","))
    except ValueError:
        raise ConfigError(f"views: {text!r} is not 'elevation,azimuth'") from None
    if not -90.0 <= el <= 90.0:
        raise ConfigError(f"views: elevation {el} outside allowed range [-90, 90]")
    return el, az


_CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    typ = _CONFIG_FIELDS[name].type
    try:
        if typ == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if typ == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if typ == "str":
            return str(value)
        if typ == "list":
            if isinstance(value, str):
                value = [v for v in value.replace(";", " ").split() if v]
            if not isinstance(value, (list, tuple)):
                raise TypeError
            if name == "views":
                return [str(v) for v in value]
            return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {typ}") from None
    return value


def config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_CONFIG_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if "input" not in data or data["input"] in (None, ""):
        raise ConfigError("input: key is required")
    return RunConfig(**{k: _coerce(k, v) for k, v in data.items()})


def load_config_dict(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a flat key: value mapping")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"{k}: nested sections are not allowed")
    return data


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    data = load_config_dict(path)
    data.update(overrides or {})
    return config_from_dict(data)


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))
