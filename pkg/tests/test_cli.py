import json

import numpy as np
import pytest

from shapes import icosphere
from splatsweep.assets import RunConfig, load_image_rgba, load_obj, load_splats, read_csv, to_uint8
from splatsweep.camera import OrbitSpec, orbit_camera
from splatsweep.cli import main
from splatsweep.meshex import chamfer_distance
from splatsweep.pipeline import intrinsics_for, load_bundle, raster_settings
from splatsweep.rasterizer import render


def tiny(tmp_path, *extra):
    return [
        "--input", str(tmp_path / "bundle"), "--output", str(tmp_path / "run"),
        "--width", "24", "--height", "24", "--n-views", "6", "--n-heldout", "2",
        "--iterations", "30", "--init-splats", "200", "--grid-blocks", "4", "--grid-sub", "8",
        "--atlas-size", "64", "--bake-resolution", "24", "--chamfer-samples", "500", "--log-interval", "10",
        "--mesh-threshold", "0.3", *extra,
    ]


@pytest.fixture
def bundle(tmp_path):
    assert main(["synth", *tiny(tmp_path)]) == 0
    return tmp_path


def test_synth_writes_training_ring(bundle):
    root = bundle / "bundle"
    meta = json.loads((root / "scene.json").read_text())
    assert len(meta["train"]) == 6 and len(meta["heldout"]) == 2
    assert all(v["elevation"] == 0.0 for v in meta["train"])
    for v in meta["train"]:
        _, alpha = load_image_rgba(root / v["file"])
        assert alpha.max() > 0


def test_synth_is_deterministic(bundle, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", *tiny(tmp_path), "--input", str(again)]) == 0
    for name in ("train/000.png", "train/005.png", "heldout/001.png", "gt.ply"):
        assert (again / name).read_bytes() == (bundle / "bundle" / name).read_bytes()


def test_training_png_matches_gt_render(bundle):
    b = load_bundle(bundle / "bundle")
    cfg = RunConfig(input="x", width=24, height=24)
    v = b.meta["train"][3]
    cam = orbit_camera(OrbitSpec(v["elevation"], v["azimuth"], b.meta["radius"]), intrinsics_for(cfg))
    out = render(cam, b.ground_truth, tuple(b.meta["background"]), raster_settings(cfg))
    rgb, alpha = load_image_rgba(bundle / "bundle" / v["file"])
    np.testing.assert_array_equal(to_uint8(out.rgb), to_uint8(rgb))
    np.testing.assert_array_equal(to_uint8(out.alpha), to_uint8(alpha))


def test_unknown_preset(tmp_path, capsys):
    assert main(["synth", *tiny(tmp_path), "--preset", "dragon"]) == 1
    err = capsys.readouterr().err
    assert "critter" in err and "sphere" in err


def test_fit_extract_bake_refine_render(bundle, capsys):
    t = bundle
    assert main(["fit", *tiny(t)]) == 0
    run = t / "run"
    assert len(load_splats(run / "splats.ply")) > 0
    metrics = read_csv(run / "metrics.csv")
    assert [int(r["iteration"]) for r in metrics] == [1, 10, 20, 30]
    assert (run / "config.yaml").is_file() and (run / "heldout.csv").is_file()

    assert main(["extract", *tiny(t)]) == 0
    assert "26 views" in capsys.readouterr().out
    mesh = load_obj(run / "mesh.obj")
    assert len(mesh) > 0 and (run / "mesh.png").is_file() and (run / "mesh.mtl").is_file()

    assert main(["bake", *tiny(t)]) == 0
    assert len(load_obj(run / "mesh.obj")) == len(mesh)

    assert main(["refine", *tiny(t), "--refine-steps", "3"]) == 0
    assert len(read_csv(run / "refine.csv")) == 3
    assert (run / "mesh_refined.obj").is_file()

    views = ["--views", "-20,10", "0,90", "45,200"]
    assert main(["render", *tiny(t), *views]) == 0
    first = [(run / "renders" / f"view_{k:03d}.png").read_bytes() for k in range(3)]
    assert main(["render", *tiny(t), *views]) == 0
    assert first == [(run / "renders" / f"view_{k:03d}.png").read_bytes() for k in range(3)]
    assert main(["render", *tiny(t), *views, "--mesh", str(run / "mesh")]) == 0


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert main(["fit", *tiny(tmp_path)]) == 1
    assert "synth" in capsys.readouterr().err
    assert main(["render", *tiny(tmp_path), "--views", "0,0"]) == 1
    assert main(["fit", *tiny(tmp_path), "--elevation", "120"]) == 2
    assert "elevation" in capsys.readouterr().err


def test_config_file_and_flag_precedence(bundle, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("iterations: 5\nlog_interval: 1\nseed: 3\n")
    assert main(["fit", "--config", str(cfg), *tiny(tmp_path)[:-2], "--iterations", "4", "--log-interval", "1"]) == 0
    snap = (tmp_path / "run" / "config.yaml").read_text()
    assert "iterations: 4" in snap and "seed: 3" in snap


def test_default_sweep_has_seven_sorted_rows(bundle):
    t = bundle
    assert main(["sweep", *tiny(t), "--iterations", "3"]) == 0
    rows = read_csv(t / "run" / "sweep.csv")
    angles = [float(r["assumed_elevation"]) for r in rows]
    assert angles == [-30, -20, -10, 0, 10, 20, 30]
    assert list(rows[0]) == ["assumed_elevation", "held_out_psnr", "held_out_ssim", "chamfer", "splat_count",
                             "runtime_s", "status"]
    meta = json.loads((t / "run" / "sweep_meta.json").read_text())
    assert meta["true_elevation"] == 0.0 and len(meta["config_hash"]) == 16
    strips = sorted(p.name for p in (t / "run").glob("strip_*.png"))
    assert len(strips) == 7
    rgb, _ = load_image_rgba(t / "run" / strips[0])
    assert rgb.shape == (24, 72, 3)


def test_sweep_records_failures_and_continues(bundle):
    t = bundle
    # nothing crosses a huge threshold, so meshing fails for every angle
    assert main(["sweep", *tiny(t), "--iterations", "3", "--sweep-angles", "0", "10",
                 "--mesh-threshold", "1000"]) == 0
    rows = read_csv(t / "run" / "sweep.csv")
    assert len(rows) == 2
    assert all(r["status"].startswith("failed: EmptyMeshError") for r in rows)
    assert all(r["held_out_psnr"] != "nan" for r in rows)


@pytest.mark.slow
def test_sphere_fit_gives_closed_mesh_near_analytic_sphere(tmp_path):
    args = ["--input", str(tmp_path / "b"), "--output", str(tmp_path / "r"), "--preset", "sphere",
            "--iterations", "3000", "--mesh-threshold", "0.3"]
    assert main(["synth", *args]) == 0
    assert main(["fit", *args]) == 0
    assert main(["extract", *args]) == 0
    mesh = load_obj(tmp_path / "r" / "mesh.obj")
    assert mesh.is_closed()
    assert chamfer_distance(mesh, icosphere(0.4, 6), 20000) < 0.05 * 0.4
