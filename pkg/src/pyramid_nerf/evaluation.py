"""Image rendering, per-scale reports, the ablation matrix and flythroughs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import avg_error, psnr, ssim
from .pyramid import MODES, LEVEL_SELECTIONS, PyramidConfig
from .render import Camera, generate_rays, render_rays

logger = logging.getLogger(__name__)

RENDER_CHUNK = 4096


class UnsupervisedLevelError(AssertionError):
    """A clamped render still queried a level outside its cell's supervised range."""


def render_image(state, camera: Camera, *, clamp: bool = True, n_samples: int | None = None,
                 chunk: int = RENDER_CHUNK, stats: dict | None = None) -> np.ndarray:
    """Deterministic render (regular sample partition) of a full image.

    With ``clamp`` every query is restricted to the supervised level range of
    its cell and checked afterwards. ``stats`` receives ``clamped`` and
    ``samples`` counts.
    """
    f = state.field
    n_samples = n_samples or state.config.samples_per_ray
    rays = generate_rays(camera)
    out = np.empty((len(rays), 3), dtype=np.float64)
    clamped = samples = 0
    sup = state.supervision
    for s in range(0, len(rays), chunk):
        res = render_rays(f, rays[s:s + chunk], n_samples, occupancy=state.occupancy,
                          supervision=sup if clamp else None, clamp=clamp)
        if clamp and sup.global_range() is not None and res.samples.count:
            x = res.samples.positions[res.samples.valid]
            lo, hi = sup.cell_range(x)
            lv = res.assignment.level
            if np.any((lv < lo) | (lv > hi)):
                raise UnsupervisedLevelError("render queried an unsupervised pyramid level")
        clamped += res.n_clamped
        samples += res.samples.count
        out[s:s + chunk] = res.color
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + clamped
        stats["samples"] = stats.get("samples", 0) + samples
    return out.reshape(camera.height, camera.width, 3)


def scale_label(scale: float) -> str:
    return f"{scale:g}"


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    rows: list[dict]
    aggregate: dict
    train_seconds: float | None = None
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"rows": [_jsonable(r) for r in self.rows], "aggregate": _jsonable(self.aggregate),
                "train_seconds": self.train_seconds, "fingerprint": self.fingerprint, **self.extra}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "report.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["scale", "psnr", "ssim", "avg_error_2", "images"])
                for r in self.rows + [self.aggregate]:
                    w.writerow([r["scale"], _fmt(r["psnr"]), _fmt(r["ssim"]), _fmt(r["avg_error_2"]), r["images"]])
            (out / "report.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write report under {out}: {exc}") from exc

    def row(self, scale: float) -> dict:
        for r in self.rows:
            if r["scale"] == scale:
                return r
        raise KeyError(scale)


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else repr(float(v))


def _jsonable(row: dict) -> dict:
    return {k: ("inf" if isinstance(v, float) and v == math.inf else v) for k, v in row.items()}


def build_report(items, train_seconds: float | None = None, fingerprint: str = "") -> MetricsReport:
    """Per-scale means of PSNR/SSIM over ``(scale, prediction, target)`` triples.

    The aggregate row averages the per-scale values.
    """
    by_scale: dict[float, list[tuple[float, float]]] = {}
    for scale, pred, gt in items:
        by_scale.setdefault(float(scale), []).append((psnr(pred, gt), ssim(pred, gt)))
    rows = []
    for scale in sorted(by_scale, reverse=True):
        vals = np.asarray(by_scale[scale])
        p, s = float(np.mean(vals[:, 0])), float(np.mean(vals[:, 1]))
        rows.append({"scale": scale, "psnr": p, "ssim": s, "avg_error_2": avg_error(p, s), "images": len(vals)})
    if not rows:
        raise ValueError("no images to evaluate")
    agg_p = float(np.mean([r["psnr"] for r in rows]))
    agg_s = float(np.mean([r["ssim"] for r in rows]))
    agg = {"scale": "all", "psnr": agg_p, "ssim": agg_s,
           "avg_error_2": float(np.mean([r["avg_error_2"] for r in rows])),
           "images": sum(r["images"] for r in rows)}
    report = MetricsReport(rows, agg, train_seconds, fingerprint)
    for r in rows + [agg]:
        for k in ("psnr", "ssim", "avg_error_2"):
            if math.isnan(r[k]) or r[k] == -math.inf:
                raise ValueError(f"non-finite {k} at scale {r['scale']}")
    return report


def config_fingerprint(state) -> str:
    blob = json.dumps({"field": state.field.config_dict(), "train": state.config.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def check_compatible(state, dataset) -> None:
    if not np.array_equal(np.asarray(state.field.bounds), dataset.bounds):
        raise ValueError(f"incompatible checkpoint: bounds {state.field.bounds.tolist()} != dataset bounds "
                         f"{dataset.bounds.tolist()}")


def evaluate_split(state, dataset, split: str = "test") -> dict:
    """Aggregate PSNR/SSIM of a split without writing files."""
    items = [(r.scale, render_image(state, r.camera), dataset.image(r)) for r in dataset.select(split)]
    rep = build_report(items)
    return {"psnr": rep.aggregate["psnr"], "ssim": rep.aggregate["ssim"], "report": rep}


def evaluate(checkpoint, dataset, out_dir, train_seconds: float | None = None,
             write_images: bool = True) -> MetricsReport:
    """Render every test image at its own scale, write ``report.csv``/``report.json`` and PNGs."""
    from .checkpoint import load_checkpoint
    from .scenes import _encode_png

    state = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    check_compatible(state, dataset)
    out = Path(out_dir)
    items = []
    stats: dict = {}
    for r in dataset.select("test"):
        pred = render_image(state, r.camera, stats=stats)
        gt = dataset.image(r)
        items.append((r.scale, pred, gt))
        if write_images:
            path = out / "renders" / scale_label(r.scale) / f"{r.camera_id}.png"
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise OSError(f"cannot create {path.parent}: {exc}") from exc
            _encode_png(path, np.concatenate([np.clip(pred, 0, 1), gt], axis=1))
    report = build_report(items, train_seconds, config_fingerprint(state))
    report.extra = {"clamped_samples": int(stats.get("clamped", 0)), "samples": int(stats.get("samples", 0)),
                    "iteration": state.iteration}
    report.write(out)
    return report


# ---------------------------------------------------------------------------
# ablation


ABLATION_COLUMNS = ("mode", "shared_grid", "level_selection", "status", "psnr", "ssim", "avg_error_2",
                    "train_seconds", "head_evals")


def ablation_cells(modes=MODES, grids=(True, False), selections=LEVEL_SELECTIONS):
    return [(m, g, s) for m in modes for g in grids for s in selections]


def ablate(dataset, out_dir, train_config, modes=MODES, grids=(True, False), selections=LEVEL_SELECTIONS,
           grid_config=None, levels: int = 8) -> list[dict]:
    """Train and score every variant with one seed and budget; write ``ablation.csv``/``.json``.

    A failing cell is recorded with its error and the table is still written.
    """
    from .training import train

    out = Path(out_dir)
    rows = []
    for mode, shared, sel in ablation_cells(modes, grids, selections):
        name = f"{mode}-{'shared' if shared else 'separate'}-{sel}"
        row = {"mode": mode, "shared_grid": shared, "level_selection": sel}
        try:
            t0 = time.perf_counter()
            state = train(dataset, PyramidConfig(L=levels, mode=mode, level_selection=sel), train_config,
                          out / name, grid_config=grid_config, shared_grid=shared)
            seconds = time.perf_counter() - t0
            rep = evaluate(state, dataset, out / name, train_seconds=seconds, write_images=False)
            row.update(status="ok", psnr=rep.aggregate["psnr"], ssim=rep.aggregate["ssim"],
                       avg_error_2=rep.aggregate["avg_error_2"], train_seconds=seconds,
                       head_evals=int(state.field.head_evals.sum()))
        except Exception as exc:  # one broken variant must not sink the table
            logger.exception("ablation cell %s failed", name)
            row.update(status=f"failed: {type(exc).__name__}: {exc}", psnr=math.nan, ssim=math.nan,
                       avg_error_2=math.nan, train_seconds=math.nan, head_evals=0)
        rows.append(row)
        _write_ablation(out, rows)
    return rows


def _write_ablation(out: Path, rows: list[dict]) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            w.writerows(rows)
        (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write ablation table under {out}: {exc}") from exc


def format_table(rows: list[dict]) -> str:
    head = f"{'mode':<15} {'grid':<9} {'selection':<15} {'PSNR':>7} {'SSIM':>6} {'avg_err2':>8} {'train s':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['mode']:<15} {'shared' if r['shared_grid'] else 'separate':<9} "
                     f"{r['level_selection']:<15} {r['psnr']:>7.2f} {r['ssim']:>6.3f} {r['avg_error_2']:>8.4f} "
                     f"{r['train_seconds']:>8.1f}" + ("" if r["status"] == "ok" else f"  {r['status']}"))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# flythrough


def orbit_cameras(n_frames: int, resolution: int, radius: float = 2.5, height: float = 1.0,
                  fov_deg: float = 30.0, axis=(0.0, 0.0, 1.0)) -> list[Camera]:
    from .scenes import BOX_HALF_DIAGONAL, _orthonormal_frame, look_at

    focal = 0.5 * resolution / np.tan(np.deg2rad(fov_deg) / 2)
    ax, a, b = _orthonormal_frame(axis)
    cams = []
    for i in range(n_frames):
        phi = 2 * np.pi * i / n_frames
        eye = height * ax + radius * (np.cos(phi) * a + np.sin(phi) * b)
        d = float(np.linalg.norm(eye))
        cams.append(Camera(resolution, resolution, float(focal), look_at(eye, np.zeros(3), up=ax),
                           max(0.02, d - BOX_HALF_DIAGONAL), d + BOX_HALF_DIAGONAL))
    return cams


def render_flythrough(state, out_dir, n_frames: int = 24, resolution: int = 128, radius: float = 2.5,
                      height: float = 1.0, axis=(0.0, 0.0, 1.0)) -> list[Path]:
    from .scenes import _encode_png

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    paths = []
    for i, cam in enumerate(orbit_cameras(n_frames, resolution, radius, height, axis=axis)):
        p = out / f"{i:04d}.png"
        _encode_png(p, np.clip(render_image(state, cam), 0, 1))
        paths.append(p)
    return paths
