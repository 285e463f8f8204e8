import json
import math

import numpy as np
import pytest

import pyramid_nerf.training as training
from pyramid_nerf.checkpoint import load_checkpoint
from pyramid_nerf.evaluation import (
    UnsupervisedLevelError,
    ablate,
    build_report,
    evaluate,
    format_table,
    render_flythrough,
    render_image,
)
from pyramid_nerf.pyramid import MODES, SupervisionGrid, assign_level, evaluate as evaluate_pyramid
from pyramid_nerf.training import TrainConfig

from conftest import SMALL_GRID, small_field


def test_self_comparison(tiny_dataset, tmp_path):
    items = [(r.scale, tiny_dataset.image(r), tiny_dataset.image(r)) for r in tiny_dataset.select("test")]
    rep = build_report(items)
    assert len(rep.rows) == 4
    for row in rep.rows:
        assert row["psnr"] == math.inf and row["ssim"] == 1.0 and row["avg_error_2"] == 0.0
    rep.write(tmp_path)
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "scale,psnr,ssim,avg_error_2,images" and lines[1].split(",")[1] == "inf"
    assert json.loads((tmp_path / "report.json").read_text())["aggregate"]["psnr"] == "inf"


def test_aggregate_is_mean_of_scales():
    r = np.random.default_rng(0)
    items = [(s, r.random((12, 12, 3)), r.random((12, 12, 3))) for s in (1.0, 1.0, 0.5)]
    rep = build_report(items)
    assert rep.aggregate["psnr"] == pytest.approx(np.mean([row["psnr"] for row in rep.rows]), abs=1e-12)
    assert [row["images"] for row in rep.rows] == [2, 1]


def test_evaluate_writes_report_and_renders(tiny_run, tiny_dataset, tmp_path):
    rep = evaluate(tiny_run / "checkpoint.pyrf", tiny_dataset, tmp_path)
    assert [row["scale"] for row in rep.rows] == [1.0, 0.5, 0.25, 0.125]
    assert all(np.isfinite(row["psnr"]) and np.isfinite(row["ssim"]) for row in rep.rows)
    for r in tiny_dataset.select("test"):
        assert (tmp_path / "renders" / f"{r.scale:g}" / f"{r.camera_id}.png").is_file()
    assert (tmp_path / "report.csv").is_file() and (tmp_path / "report.json").is_file()


def test_reports_are_deterministic(tiny_run, tiny_dataset, tmp_path):
    a = evaluate(tiny_run / "checkpoint.pyrf", tiny_dataset, tmp_path / "a", write_images=False)
    b = evaluate(tiny_run / "checkpoint.pyrf", tiny_dataset, tmp_path / "b", write_images=False)
    assert a.to_json() == b.to_json()
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()


def test_incompatible_checkpoint_names_the_field(tiny_run, tiny_dataset, tmp_path):
    state = load_checkpoint(tiny_run / "checkpoint.pyrf")
    state.field.bounds = state.field.bounds * 2
    with pytest.raises(ValueError, match="bounds"):
        evaluate(state, tiny_dataset, tmp_path)


def test_clamp_assertion_fires_when_clamping_is_broken(tiny_run, tiny_dataset, monkeypatch):
    state = load_checkpoint(tiny_run / "checkpoint.pyrf")
    cam = tiny_dataset.select("test", 1.0)[0].camera
    # shrink every supervised range to level 0, then disable the clamp itself
    state.supervision.max_level[state.supervision.touched] = 0
    state.supervision.min_level[state.supervision.touched] = 0
    monkeypatch.setattr(SupervisionGrid, "clamp", lambda self, x, a: (a, 0))
    with pytest.raises(UnsupervisedLevelError):
        render_image(state, cam)


def test_clamped_render_respects_ranges(tiny_run, tiny_dataset):
    state = load_checkpoint(tiny_run / "checkpoint.pyrf")
    stats = {}
    img = render_image(state, tiny_dataset.select("test", 1.0)[0].camera, stats=stats)
    assert np.all(np.isfinite(img)) and stats["samples"] > 0


@pytest.mark.parametrize("mode", MODES)
def test_head_evaluation_counters(mode):
    field = small_field(mode=mode, L=6)
    r = np.random.default_rng(0)
    S = 300
    x = r.uniform(-1, 1, (S, 3))
    d = r.standard_normal((S, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a = assign_level(r.uniform(-1, 6.5, S), field.pyramid_config)
    field.reset_counters()
    evaluate_pyramid(field, x, d, a)
    total = int(field.head_evals.sum())
    if mode in ("gauss", "feature_interp"):
        assert total == S
    elif mode == "default_interp":
        assert S <= total <= 2 * S
        assert total == S + int(np.sum((a.level > 0) & (a.weight < 1) & (a.weight > 0)))
    else:
        assert total == int(np.sum(a.level + 1))


def test_ablation_rows_and_failed_cell(tiny_dataset, tmp_path, monkeypatch):
    real = training.train

    def flaky(dataset, pyr, *args, **kwargs):
        if pyr.mode == "gauss" and pyr.level_selection == "volume_3d":
            raise RuntimeError("injected failure")
        return real(dataset, pyr, *args, **kwargs)

    monkeypatch.setattr(training, "train", flaky)
    cfg = TrainConfig(iterations=2, batch_rays=32, samples_per_ray=8, occupancy_resolution=8,
                      supervision_resolution=8)
    rows = ablate(tiny_dataset, tmp_path, cfg, modes=("gauss", "laplacian"), grids=(True,),
                  selections=("projected_area", "volume_3d"), grid_config=SMALL_GRID, levels=3)
    assert len(rows) == 4
    status = {(r["mode"], r["level_selection"]): r["status"] for r in rows}
    assert status[("gauss", "volume_3d")].startswith("failed: RuntimeError")
    assert sum(s == "ok" for s in status.values()) == 3
    csv_lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(csv_lines) == 5
    assert "injected failure" in format_table(rows)


def test_flythrough_frames(tiny_run, tmp_path):
    state = load_checkpoint(tiny_run / "checkpoint.pyrf")
    paths = render_flythrough(state, tmp_path, n_frames=3, resolution=12)
    assert [p.name for p in paths] == ["0000.png", "0001.png", "0002.png"]


def test_metrics_log_written(tiny_run):
    lines = (tiny_run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iteration,wall_seconds,train_loss,test_psnr,test_ssim"
    last = lines[-1].split(",")
    assert last[0] == "24" and float(last[3]) > 0 and -1 <= float(last[4]) <= 1
