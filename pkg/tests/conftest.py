import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pyramid_nerf.encoding import HashGridConfig
from pyramid_nerf.field import PyramidField
from pyramid_nerf.pyramid import PyramidConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SMALL_GRID = HashGridConfig(num_grid_levels=4, base_grid_resolution=4, per_level_scale=2.0,
                            features_per_level=2, table_size=2 ** 10)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_field(mode="default_interp", L=4, dtype=np.float64, shared=True, seed=0, selection="projected_area"):
    return PyramidField(SMALL_GRID, PyramidConfig(L=L, mode=mode, level_selection=selection),
                        shared_grid=shared, dtype=dtype, seed=seed)


def randomize(field, scale=0.5, seed=0):
    """Give every parameter (grid tables included) a non-trivial value."""
    r = np.random.default_rng(seed)
    field.store.values[:] = (r.standard_normal(field.store.size) * scale).astype(field.dtype)
    return field


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four-scale checkerboard, 88 px at full scale (11 px at 1/8, the SSIM minimum)."""
    from pyramid_nerf.scenes import build_dataset, make_scene

    return build_dataset(make_scene("slanted_checkerboard"), 4, 2, base_resolution=88, seed=3,
                         out_dir=tmp_path_factory.mktemp("tiny"), supersample=4)


@pytest.fixture(scope="session")
def tiny_run(tiny_dataset, tmp_path_factory):
    """A few iterations on the tiny dataset; returns the run directory."""
    from pyramid_nerf.training import TrainConfig, train

    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(iterations=24, batch_rays=128, samples_per_ray=24, occupancy_resolution=16,
                      supervision_resolution=16, occupancy_every=8, log_every=8)
    train(tiny_dataset, PyramidConfig(L=6), cfg, out, grid_config=SMALL_GRID)
    return out


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or (outcome == "passed" and rep.when != "call"):
                continue
            status = "PASS" if outcome == "passed" else "FAIL"
            detail = props.get("detail") or rep.longreprtext.strip().splitlines()[-1:]
            lines.append((props["criterion"], f"criterion {props['criterion']:>2}: {status}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
