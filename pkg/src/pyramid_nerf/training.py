"""Optimisation loop: ray batches, Adam, occupancy and supervision upkeep, metrics log."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import mse_loss, mse_loss_backward
from .encoding import HashGridConfig
from .field import PyramidField
from .pyramid import LevelAssignment, PyramidConfig, SupervisionGrid, evaluate
from .render import OccupancyGrid, Rays, render_backward, render_rays

logger = logging.getLogger(__name__)

METRICS_HEADER = ("iteration", "wall_seconds", "train_loss", "test_psnr", "test_ssim")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_rays: int = 8192
    samples_per_ray: int = 128
    lr_grid: float = 1e-2
    lr_heads: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    seed: int = 0
    eval_every: int = 0  # 0: evaluate once at the end
    log_every: int = 50
    # cap on evaluated samples per step; the ray count adapts to stay near it
    target_samples: int | None = None
    min_batch_rays: int = 64
    scale_weighting: str = "pixel"  # or "scale": every scale drawn equally often
    occupancy_resolution: int = 64
    occupancy_every: int = 16
    occupancy_threshold: float = 0.01
    occupancy_decay: float = 0.95
    occupancy_subsets: int = 1  # k > 1 refreshes 1/k of the cells per update after the first
    supervision_resolution: int = 64
    sparse_heads: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_rays < 1 or self.min_batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if self.iterations < 0 or self.samples_per_ray < 1:
            raise ValueError("iterations must be >= 0 and samples_per_ray >= 1")
        for name in ("lr_grid", "lr_heads", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.scale_weighting not in ("pixel", "scale"):
            raise ValueError(f"unknown scale_weighting {self.scale_weighting!r}")
        if self.target_samples is not None and self.target_samples < 1:
            raise ValueError("target_samples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam over a :class:`ParameterStore`, stepped per parameter group.

    Segments are grouped by the prefix before the first dot (``grid0``,
    ``head3``, ...). A group left out of ``active`` keeps its parameters,
    moments and step count untouched for that step.
    """

    def __init__(self, store, lr_grid: float = 1e-2, lr_heads: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-15):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(store.values)
        self.v = np.zeros_like(store.values)
        self.groups: dict[str, slice] = {}
        spans: dict[str, list[slice]] = {}
        for name in store.names():
            spans.setdefault(name.split(".")[0], []).append(store.span(name))
        for g, parts in spans.items():
            lo, hi = parts[0].start, parts[-1].stop
            if sum(p.stop - p.start for p in parts) != hi - lo:
                raise ValueError(f"parameter group {g!r} is not contiguous")
            self.groups[g] = slice(lo, hi)
        self.lr = {g: (lr_grid if g.startswith("grid") else lr_heads) for g in self.groups}
        self.steps = {g: 0 for g in self.groups}

    def step(self, active: set[str] | None = None) -> None:
        values, grads = self.store.values, self.store.grads
        b1, b2 = self.beta1, self.beta2
        for g, sl in self.groups.items():
            if active is not None and g not in active:
                continue
            self.steps[g] += 1
            t = self.steps[g]
            grad = grads[sl]
            m, v = self.m[sl], self.v[sl]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            values[sl] -= self.lr[g] * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"steps": dict(self.steps), "lr": dict(self.lr), "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps}

    def load_state(self, meta: dict, m: np.ndarray, v: np.ndarray) -> None:
        if set(meta["steps"]) != set(self.steps):
            raise ValueError("optimizer groups do not match the parameter layout")
        self.steps = {k: int(x) for k, x in meta["steps"].items()}
        self.m[...] = m
        self.v[...] = v


# ---------------------------------------------------------------------------
# state and step


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, max_grad: float, ray_index: int | None, loss: float):
        self.iteration, self.max_grad, self.ray_index, self.loss = iteration, max_grad, ray_index, loss
        super().__init__(f"non-finite loss {loss} at iteration {iteration}: max |grad| = {max_grad}, "
                         f"first offending ray = {ray_index}")


@dataclass
class TrainState:
    field: PyramidField
    optimizer: Adam
    occupancy: OccupancyGrid
    supervision: SupervisionGrid
    rng: np.random.Generator
    config: TrainConfig
    step_size: float
    iteration: int = 0
    occupancy_updates: int = 0
    last_samples_per_ray: float = 0.0

    @classmethod
    def create(cls, field: PyramidField, config: TrainConfig, step_size: float) -> "TrainState":
        opt = Adam(field.store, config.lr_grid, config.lr_heads, config.beta1, config.beta2, config.eps)
        occ = OccupancyGrid(field.bounds, config.occupancy_resolution, config.occupancy_threshold,
                            config.occupancy_decay, config.occupancy_every)
        sup = SupervisionGrid(field.bounds, field.L, config.supervision_resolution)
        return cls(field, opt, occ, sup, np.random.default_rng(config.seed), config, step_size)


def queried_levels(mode: str, assignment: LevelAssignment):
    """Positions-aligned level arrays actually read by an evaluation in ``mode``."""
    lv = assignment.level
    out = [(np.ones(len(lv), dtype=bool), lv)]
    if mode in ("default_interp", "feature_interp"):
        blended = (assignment.weight < 1) & (lv > 0)
        out.append((blended, lv - 1))
    return out


def train_step(state: TrainState, rays: Rays, targets: np.ndarray) -> float:
    """One Adam step on a batch; returns the loss before the update."""
    if len(rays) == 0:
        raise ValueError("empty batch")
    field, cfg = state.field, state.config
    field.store.zero_grads()
    before = field.head_evals.copy()
    result = render_rays(field, rays, cfg.samples_per_ray, rng=state.rng, occupancy=state.occupancy,
                         need_grad=True)
    x = result.samples.positions[result.samples.valid]
    for mask, lv in queried_levels(field.pyramid_config.mode, result.assignment):
        state.supervision.record(x[mask], lv[mask])
    targets = np.asarray(targets, dtype=result.color.dtype)
    loss = mse_loss(result.color, targets)
    if not np.isfinite(loss):
        bad = np.flatnonzero(~np.all(np.isfinite(result.color), axis=1))
        raise TrainingDiverged(state.iteration, _max_abs(field.store.grads), int(bad[0]) if len(bad) else None,
                               loss)
    render_backward(field, result, mse_loss_backward(result.color, targets))
    g = field.store.grads
    if not np.all(np.isfinite(g)):
        raise TrainingDiverged(state.iteration, _max_abs(g), None, float("nan"))
    active = None
    if cfg.sparse_heads:
        touched = np.flatnonzero(field.head_evals > before)
        active = {f"grid{i}" for i in range(len(field.grids))} | {f"head{l}" for l in touched}
    state.optimizer.step(active)
    state.iteration += 1
    state.last_samples_per_ray = result.samples.count / len(rays)
    return loss


def _max_abs(a: np.ndarray) -> float:
    with np.errstate(invalid="ignore"):
        return float(np.nanmax(np.abs(a))) if a.size else 0.0


def update_occupancy(state: TrainState) -> None:
    """Refresh occupancy from densities at cell centres.

    Each cell is queried at the finest level supervised there (the global
    finest for unvisited cells) with full weight on that level.
    """
    field, occ, sup = state.field, state.occupancy, state.supervision
    g = sup.global_range()
    top = field.L - 1 if g is None else g[1]
    per_cell = sup.max_level.astype(np.int64)
    same_grid = sup.resolution == occ.resolution and np.array_equal(sup.bounds, occ.bounds)

    def density(x, ids):
        if same_grid:
            lv = per_cell[ids]
        else:
            lv = sup.max_level[sup.cell_index(x)].astype(np.int64)
        lv[lv < 0] = top
        a = LevelAssignment(np.zeros(len(x)), lv, np.ones(len(x)))
        return evaluate(field, x, None, a, density_only=True).sigma

    cells = None
    k = state.config.occupancy_subsets
    if occ.initialized and k > 1:
        cells = np.arange(state.occupancy_updates % k, occ.resolution ** 3, k)
    occ.update(density, state.step_size, cells=cells)
    state.occupancy_updates += 1


# ---------------------------------------------------------------------------
# batching


class RaySampler:
    """Draws training rays uniformly over pixels, or uniformly over scales first."""

    def __init__(self, rays: Rays, colors: np.ndarray, scales: np.ndarray, weighting: str = "pixel"):
        self.rays, self.colors, self.weighting = rays, colors, weighting
        self.scale_values = np.unique(scales)
        self.by_scale = [np.flatnonzero(scales == s) for s in self.scale_values]

    def __len__(self):
        return len(self.rays)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.weighting == "pixel":
            return rng.integers(0, len(self.rays), size=n)
        which = rng.integers(0, len(self.by_scale), size=n)
        out = np.empty(n, dtype=np.int64)
        for i, members in enumerate(self.by_scale):
            sel = which == i
            out[sel] = members[rng.integers(0, len(members), size=int(sel.sum()))]
        return out


def batch_size(state: TrainState) -> int:
    cfg = state.config
    if cfg.target_samples is None or state.last_samples_per_ray <= 0:
        if cfg.target_samples is None:
            return cfg.batch_rays
        return int(np.clip(cfg.target_samples // cfg.samples_per_ray, cfg.min_batch_rays, cfg.batch_rays))
    n = int(cfg.target_samples / state.last_samples_per_ray)
    return int(np.clip(n, cfg.min_batch_rays, cfg.batch_rays))


def mean_step_size(rays: Rays, samples_per_ray: int) -> float:
    return float(np.mean(rays.far - rays.near) / samples_per_ray)


def run_iterations(state: TrainState, sampler: RaySampler, n: int, callback=None) -> list[float]:
    """Advance ``n`` iterations; ``callback(state, loss)`` runs after each step."""
    losses = []
    cfg = state.config
    for _ in range(n):
        if cfg.occupancy_every > 0 and state.iteration > 0 and state.iteration % cfg.occupancy_every == 0:
            update_occupancy(state)
        idx = sampler.draw(state.rng, batch_size(state))
        loss = train_step(state, sampler.rays[idx], sampler.colors[idx])
        losses.append(loss)
        if callback is not None:
            callback(state, loss)
    return losses


def build_field(pyramid_config: PyramidConfig, grid_config: HashGridConfig | None = None, bounds=None,
                shared_grid: bool = True, dtype="float32", seed: int = 0) -> PyramidField:
    grid_config = grid_config or HashGridConfig()
    bounds = ((-1, -1, -1), (1, 1, 1)) if bounds is None else bounds
    return PyramidField(grid_config, pyramid_config, bounds, shared_grid, np.dtype(dtype), seed)


def train(dataset, pyramid_config: PyramidConfig, train_config: TrainConfig, out_dir,
          grid_config: HashGridConfig | None = None, shared_grid: bool = True, resume=None,
          stop_after: int | None = None) -> TrainState:
    """Train on the dataset's train split, logging to ``metrics.csv`` and saving ``checkpoint.pyrf``.

    ``resume`` is a checkpoint path to continue from. ``stop_after`` ends the
    run early after that many total iterations, still writing a checkpoint.
    """
    from .checkpoint import load_checkpoint, save_checkpoint
    from .evaluation import evaluate_split

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rays, colors, scales = dataset.ray_table("train")
    sampler = RaySampler(rays, colors, scales, train_config.scale_weighting)
    if resume is not None:
        state = load_checkpoint(resume)
        train_config = state.config
        if not np.array_equal(state.field.bounds, dataset.bounds):
            raise ValueError("checkpoint bounds do not match the dataset")
    else:
        field = build_field(pyramid_config, grid_config, dataset.bounds, shared_grid, train_config.dtype,
                            train_config.seed)
        state = TrainState.create(field, train_config, mean_step_size(rays, train_config.samples_per_ray))
    log_path = out / "metrics.csv"
    rows = _read_log(log_path) if resume is not None else []
    rows = [r for r in rows if int(r[0]) <= state.iteration]
    elapsed0 = float(rows[-1][1]) if rows else 0.0
    t_start = time.perf_counter()
    end = train_config.iterations if stop_after is None else min(stop_after, train_config.iterations)
    cfg = train_config

    def log(st, loss):
        it = st.iteration
        wall = elapsed0 + time.perf_counter() - t_start
        do_eval = (cfg.eval_every > 0 and it % cfg.eval_every == 0) or it == cfg.iterations
        if do_eval:
            report = evaluate_split(st, dataset, "test")
            rows.append([it, f"{wall:.3f}", repr(float(loss)), repr(report["psnr"]), repr(report["ssim"])])
            logger.info("iter %d loss %.5f test psnr %.2f", it, loss, report["psnr"])
        elif it % cfg.log_every == 0:
            rows.append([it, f"{wall:.3f}", repr(float(loss)), "", ""])
            logger.info("iter %d loss %.5f", it, loss)

    run_iterations(state, sampler, max(0, end - state.iteration), log)
    _write_log(log_path, rows)
    save_checkpoint(state, out / "checkpoint.pyrf")
    return state


def _read_log(path: Path) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        return [row for row in reader]


def _write_log(path: Path, rows) -> None:
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRICS_HEADER)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write metrics log {path}: {exc}") from exc
