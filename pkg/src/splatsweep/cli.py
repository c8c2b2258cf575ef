"""Command-line entry point: ``splatsweep <command> [--config FILE] [--key value ...]``.

Every run-config key is also a flag, spelled with dashes instead of
underscores. Values are resolved as flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import fields
from pathlib import Path

from . import pipeline as P
from .assets import (
    RunConfig,
    config_from_dict,
    load_config_dict,
    load_obj,
    load_splats,
    save_config,
    save_mesh_obj,
    save_splats,
    save_training_metrics,
    write_csv,
)
from .errors import ConfigError, SplatError
from .texture import refine_texture
from .trainer import photometric_guidance

log = logging.getLogger("splatsweep")

COMMANDS = ("synth", "fit", "extract", "bake", "refine", "render", "sweep")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run-config file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kwargs = {"dest": f.name, "default": None}
        if f.type == "list":
            kwargs["nargs"] = "+"
            kwargs["type"] = str if f.name == "views" else float
        else:
            kwargs["type"] = {"float": float, "int": int, "str": str}[f.type]
        parser.add_argument(flag, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatsweep", description="Gaussian splat fitting and elevation sweeps")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "render a synthetic ground-truth scene bundle into --input",
        "fit": "fit splats to the bundle's training views at the assumed --elevation",
        "extract": "extract, unwrap and bake a textured mesh from the fitted splats",
        "bake": "re-bake the texture of an existing OBJ from splats",
        "refine": "refine a mesh texture against the bundle's training views",
        "render": "render splats (or a textured --mesh) at --views 'elevation,azimuth'",
        "sweep": "fit, mesh and score one run per angle in --sweep-angles",
    }
    for name in COMMANDS:
        _add_config_flags(sub.add_parser(name, help=helps[name]))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data = load_config_dict(args.config) if args.config else {}
    for f in fields(RunConfig):
        value = getattr(args, f.name)
        if value is not None:
            data[f.name] = value
    return config_from_dict(data)


def _splat_path(cfg: RunConfig) -> Path:
    path = Path(cfg.splats) if cfg.splats else Path(cfg.output) / "splats.ply"
    if not path.is_file():
        raise FileNotFoundError(f"splat archive {path} not found; run 'splatsweep fit' or pass --splats")
    return path


def _mesh_path(cfg: RunConfig) -> Path:
    path = Path(cfg.mesh) if cfg.mesh else Path(cfg.output) / "mesh.obj"
    if not path.with_suffix(".obj").is_file():
        raise FileNotFoundError(f"mesh {path} not found; run 'splatsweep extract' or pass --mesh")
    return path


def cmd_synth(cfg: RunConfig) -> None:
    root = P.synthesize_bundle(cfg)
    print(f"wrote scene bundle to {root}")


def cmd_fit(cfg: RunConfig) -> None:
    bundle = P.load_bundle(cfg.input)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    res = P.fit_bundle(cfg, bundle)
    save_splats(res.cloud, out / "splats.ply")
    save_training_metrics(res.state.history, out / "metrics.csv")
    score = P.score_heldout(res.cloud, bundle, cfg) if bundle.heldout else None
    if score is not None:
        write_csv(out / "heldout.csv", ["held_out_psnr", "held_out_ssim"],
                  [{"held_out_psnr": f"{score.psnr:.4f}", "held_out_ssim": f"{score.ssim:.4f}"}])
    msg = f"fitted {len(res.cloud)} splats in {res.runtime_s:.1f}s"
    if score is not None:
        msg += f"; held-out PSNR {score.psnr:.2f} dB, SSIM {score.ssim:.4f}"
    print(msg)


def cmd_extract(cfg: RunConfig) -> None:
    cloud = load_splats(_splat_path(cfg))
    mesh = P.extract_surface(cloud, cfg)
    report = []
    mesh_uv, atlas = P.texture_mesh(mesh, cloud, cfg, report)
    obj, _, _ = save_mesh_obj(mesh_uv, atlas, Path(cfg.output) / "mesh")
    print(f"wrote {obj}: {len(mesh_uv)} triangles, texture baked from {report[0].views_used} views")


def cmd_bake(cfg: RunConfig) -> None:
    cloud = load_splats(_splat_path(cfg))
    mesh = load_obj(_mesh_path(cfg).with_suffix(".obj"))
    report = []
    mesh_uv, atlas = P.texture_mesh(mesh, cloud, cfg, report)
    obj, _, _ = save_mesh_obj(mesh_uv, atlas, Path(cfg.output) / "mesh")
    print(f"wrote {obj}: texture baked from {report[0].views_used} views")


def cmd_refine(cfg: RunConfig) -> None:
    mesh, atlas = P.load_textured_mesh(_mesh_path(cfg))
    bundle = P.load_bundle(cfg.input)
    cams = P.assumed_cameras(bundle, cfg.elevation)
    guidance = photometric_guidance([(c, v.rgb, v.alpha) for c, v in zip(cams, bundle.train)])
    history = []
    refined = refine_texture(mesh, atlas, guidance, cams, cfg.refine_steps, cfg.refine_noise,
                             batch=4, background=tuple(cfg.background), seed=cfg.seed, log=history)
    out = Path(cfg.output)
    obj, _, _ = save_mesh_obj(mesh, refined, out / "mesh_refined")
    write_csv(out / "refine.csv", ["step", "mse"], [{"step": i, "mse": f"{v:.6g}"} for i, v in enumerate(history)])
    print(f"wrote {obj} after {cfg.refine_steps} refinement steps")


def cmd_render(cfg: RunConfig) -> None:
    paths = P.render_views(cfg)
    print(f"wrote {len(paths)} renders to {paths[0].parent}")


def cmd_sweep(cfg: RunConfig) -> None:
    def progress(row):
        print(
            f"elevation {float(row['assumed_elevation']):+6.1f}: PSNR {row['held_out_psnr']} "
            f"SSIM {row['held_out_ssim']} chamfer {row['chamfer']} ({row['status']}, {row['runtime_s']}s)",
            flush=True,
        )

    report = P.run_sweep(cfg, progress=progress)
    print(f"wrote {Path(cfg.output) / 'sweep.csv'} with {len(report.rows)} rows")


HANDLERS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "extract": cmd_extract,
    "bake": cmd_bake,
    "refine": cmd_refine,
    "render": cmd_render,
    "sweep": cmd_sweep,
}


_NEGATIVE_VIEW = re.compile(r"^-\d+(\.\d*)?,")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    # argparse would read "-20,45" as an option; a leading space keeps it a value
    argv = [" " + a if _NEGATIVE_VIEW.match(a) else a for a in argv]
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (SplatError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
