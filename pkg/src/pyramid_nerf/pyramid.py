"""Footprint-to-level mapping and multi-head evaluation.

A sample whose projected footprint has width ``w`` (world units) gets the
continuous level ``M = log_s((1/w) / N0)``: the level whose voxel side
``1 / (N0 s^l)`` matches the footprint. The integer level is
``l = clamp(ceil(M), 0, L-1)`` and the interpolation weight ``w = l - M``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import activation, activation_backward
from .encoding import encode_direction

MODES = ("default_interp", "gauss", "laplacian", "feature_interp")
LEVEL_SELECTIONS = ("projected_area", "volume_3d")


@dataclass(frozen=True)
class PyramidConfig:
    """``L`` levels with resolutions ``N0 * s**l`` voxels per unit length.

    ``N0=None`` means "align the finest level with the finest grid level";
    :meth:`resolve` fills it in.
    """

    L: int = 8
    s: float = 1.6
    N0: float | None = None
    mode: str = "default_interp"
    level_selection: str = "projected_area"
    continuous_blend: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if not self.s > 1:
            raise ValueError(f"s must be > 1, got {self.s}")
        if self.N0 is not None and not self.N0 > 0:
            raise ValueError(f"N0 must be > 0, got {self.N0}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.level_selection not in LEVEL_SELECTIONS:
            raise ValueError(f"level_selection must be one of {LEVEL_SELECTIONS}, got {self.level_selection!r}")

    def resolve(self, finest_resolution: float) -> "PyramidConfig":
        if self.N0 is not None:
            return self
        return replace(self, N0=float(finest_resolution) / self.s ** (self.L - 1))

    def resolution(self, level) -> float:
        if self.N0 is None:
            raise ValueError("N0 is unresolved")
        return self.N0 * self.s ** np.asarray(level, dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidConfig":
        return cls(**d)


@dataclass
class LevelAssignment:
    """Continuous level ``M``, integer ``level`` and interpolation ``weight`` per sample."""

    M: np.ndarray
    level: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.level)

    def __getitem__(self, idx) -> "LevelAssignment":
        return LevelAssignment(self.M[idx], self.level[idx], self.weight[idx])


def footprint_measure(width, volume, selection: str = "projected_area"):
    """Inverse length fed to :func:`map_level`."""
    if selection == "projected_area":
        return 1.0 / np.asarray(width, dtype=np.float64)
    if selection == "volume_3d":
        return 1.0 / np.cbrt(np.asarray(volume, dtype=np.float64))
    raise ValueError(f"level_selection must be one of {LEVEL_SELECTIONS}, got {selection!r}")


def map_level(P, config: PyramidConfig):
    """``M = log_s(P / N0)``."""
    P_arr = np.asarray(P, dtype=np.float64)
    if not np.all(np.isfinite(P_arr)) or np.any(P_arr <= 0):
        raise ValueError("footprint measure P must be finite and > 0")
    M = (np.log(P_arr) - np.log(config.N0)) / np.log(config.s)
    return float(M) if np.ndim(P) == 0 else M


def assign_level(M, config: PyramidConfig) -> LevelAssignment:
    """Clamp ``ceil(M)`` into the pyramid and derive the blend weight.

    Outside the pyramid the weight is pinned to 1 so the clamped level is used
    on its own.
    """
    M_arr = np.atleast_1d(np.asarray(M, dtype=np.float64))
    if config.continuous_blend:
        fl = np.floor(M_arr)
        raw = fl + 1
        w = M_arr - fl
    else:
        raw = np.ceil(M_arr)
        w = raw - M_arr
    level = np.clip(raw, 0, config.L - 1).astype(np.int64)
    w = np.where((raw > config.L - 1) | (level == 0), 1.0, np.clip(w, 0.0, 1.0))
    return LevelAssignment(M_arr, level, w)


# ---------------------------------------------------------------------------
# supervised level ranges


class SupervisionGrid:
    """Coarsest/finest level recorded per cell of a uniform grid over the scene box."""

    def __init__(self, bounds, L: int, resolution: int = 64):
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        self.L = L
        self.resolution = resolution
        n = resolution ** 3
        self.min_level = np.full(n, L, dtype=np.int16)
        self.max_level = np.full(n, -1, dtype=np.int16)

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        u = np.clip((np.atleast_2d(x) - lo) / (hi - lo), 0.0, 1.0)
        ijk = np.minimum((u * self.resolution).astype(np.int64), self.resolution - 1)
        return ijk[:, 0] + self.resolution * (ijk[:, 1] + self.resolution * ijk[:, 2])

    def record(self, x: np.ndarray, levels) -> None:
        cells = self.cell_index(x)
        levels = np.broadcast_to(np.asarray(levels, dtype=np.int16), cells.shape)
        np.minimum.at(self.min_level, cells, levels)
        np.maximum.at(self.max_level, cells, levels)

    def merge(self, other: "SupervisionGrid") -> None:
        np.minimum(self.min_level, other.min_level, out=self.min_level)
        np.maximum(self.max_level, other.max_level, out=self.max_level)

    @property
    def touched(self) -> np.ndarray:
        return self.max_level >= 0

    def global_range(self) -> tuple[int, int] | None:
        t = self.touched
        if not t.any():
            return None
        return int(self.min_level[t].min()), int(self.max_level[t].max())

    def cell_range(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-position ``(lo, hi)``; untouched cells report the global coarsest level."""
        cells = self.cell_index(x)
        lo = self.min_level[cells].astype(np.int64)
        hi = self.max_level[cells].astype(np.int64)
        g = self.global_range()
        if g is not None:
            untouched = hi < 0
            lo[untouched] = g[0]
            hi[untouched] = g[0]
        return lo, hi

    def clamp(self, x: np.ndarray, assignment: LevelAssignment) -> tuple[LevelAssignment, int]:
        """Restrict levels to what was supervised; returns the number of clamped samples."""
        if self.global_range() is None:
            return assignment, 0
        lo, hi = self.cell_range(x)
        level = assignment.level
        clamped = (level > hi) | (level < lo)
        new_level = np.clip(level, lo, hi)
        new_w = np.where(clamped, 1.0, assignment.weight)
        return LevelAssignment(assignment.M, new_level, new_w), int(clamped.sum())

    def copy(self) -> "SupervisionGrid":
        out = SupervisionGrid(self.bounds, self.L, self.resolution)
        out.min_level[:] = self.min_level
        out.max_level[:] = self.max_level
        return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class FieldOutput:
    sigma: np.ndarray
    rgb: np.ndarray | None
    cache: object = None


def blend_features(w: np.ndarray, fine: np.ndarray, coarse: np.ndarray | None) -> np.ndarray:
    """``w * fine + (1 - w) * coarse``, with ``coarse`` zero-padded to ``fine``'s width."""
    out = w[:, None] * fine
    if coarse is not None:
        out[:, :coarse.shape[1]] += (1 - w)[:, None] * coarse
    return out


class _GridFeatures:
    """Encodes each grid once, on only the rows that need it."""

    def __init__(self, field, x: np.ndarray, needs: dict[int, np.ndarray], need_grad: bool):
        S = x.shape[0]
        self.field = field
        self.rows: dict[int, np.ndarray] = {}
        self.pos: dict[int, np.ndarray] = {}
        self.feats: dict[int, np.ndarray] = {}
        self.caches: dict[int, object] = {}
        self.grads: dict[int, np.ndarray] = {}
        for g, (mask, width_levels) in needs.items():
            rows = np.flatnonzero(mask)
            pos = np.full(S, -1, dtype=np.int64)
            pos[rows] = np.arange(rows.size)
            feats, cache = field.grids[g].encode(x[rows], width_levels)
            self.rows[g], self.pos[g], self.feats[g] = rows, pos, feats
            if need_grad:
                self.caches[g] = cache
                self.grads[g] = np.zeros_like(feats)

    def get(self, g: int, rows: np.ndarray, width: int) -> np.ndarray:
        return self.feats[g][self.pos[g][rows], :width]

    def add_grad(self, g: int, rows: np.ndarray, grad: np.ndarray) -> None:
        self.grads[g][self.pos[g][rows], :grad.shape[1]] += grad

    def backward(self) -> None:
        for g, cache in self.caches.items():
            self.field.grids[g].backward(cache, self.grads[g])


def _grid_index(field, level: int) -> int:
    return 0 if field.shared_grid else level


def _head_jobs(mode: str, level: np.ndarray, weight: np.ndarray):
    """Yield ``(head, row_mask, coef)`` describing which samples each head sees."""
    if mode == "gauss" or mode == "feature_interp":
        for i in np.unique(level):
            yield int(i), level == i, None
    elif mode == "default_interp":
        for i in range(int(level.max()) + 1 if level.size else 0):
            as_fine = (level == i) & (weight > 0)
            as_coarse = (level == i + 1) & (weight < 1)
            mask = as_fine | as_coarse
            if mask.any():
                coef = np.where(level[mask] == i, weight[mask], 1 - weight[mask])
                yield i, mask, coef
    elif mode == "laplacian":
        for i in range(int(level.max()) + 1 if level.size else 0):
            yield i, level >= i, None
    else:
        raise ValueError(f"unknown mode {mode!r}")


def evaluate(field, x: np.ndarray, d: np.ndarray | None, assignment: LevelAssignment,
             mode: str | None = None, *, density_only: bool = False, need_grad: bool = False) -> FieldOutput:
    """Bucketed evaluation: each head runs once over all samples that need it.

    Modes:
      * ``gauss`` -- ``f_l`` alone;
      * ``laplacian`` -- ``sum_{i<=l} f_i`` in pre-activation space;
      * ``default_interp`` -- ``w f_l + (1-w) f_{l-1}`` after activation;
      * ``feature_interp`` -- head ``l`` on blended features of levels ``l`` and ``l-1``.
    """
    mode = mode or field.pyramid_config.mode
    dtype = field.dtype
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    S = x.shape[0]
    level = np.asarray(assignment.level, dtype=np.int64)
    weight = np.where(level == 0, 1.0, assignment.weight).astype(dtype)
    sh = None if density_only else encode_direction(d).astype(dtype)

    jobs = list(_head_jobs(mode, level, weight))

    needs: dict[int, list] = {}
    for i, mask, _ in jobs:
        parts = [i]
        if mode == "feature_interp" and i > 0:
            parts.append(i - 1)
        for j in parts:
            g = _grid_index(field, j)
            m, k = needs.get(g, (np.zeros(S, dtype=bool), 0))
            needs[g] = (m | mask, max(k, field.grid_levels_for_head[j]))
    feats = _GridFeatures(field, x, needs, need_grad)

    sigma = np.zeros(S, dtype=dtype)
    rgb = None if density_only else np.zeros((S, 3), dtype=dtype)
    if mode == "laplacian":
        sigma_raw_sum = np.zeros(S, dtype=dtype)
        rgb_raw_sum = None if density_only else np.zeros((S, 3), dtype=dtype)
    records = []
    for i, mask, coef in jobs:
        rows = np.flatnonzero(mask)
        width = field.heads[i].in_dim
        fine = feats.get(_grid_index(field, i), rows, width)
        if mode == "feature_interp":
            coarse = None
            if i > 0:
                coarse = feats.get(_grid_index(field, i - 1), rows, field.heads[i - 1].in_dim)
            inp = blend_features(weight[rows], fine, coarse)
        else:
            inp = fine
        s_raw, c_raw, hcache = field.run_head(i, inp, None if density_only else sh[rows], density_only)
        if mode == "laplacian":
            sigma_raw_sum[rows] += s_raw
            if not density_only:
                rgb_raw_sum[rows] += c_raw
            s_act = c_act = None
        else:
            s_act = activation("truncated_exp", s_raw)
            c_act = None if density_only else activation("sigmoid", c_raw)
            if mode == "default_interp":
                sigma[rows] += coef * s_act
                if not density_only:
                    rgb[rows] += coef[:, None] * c_act
            else:
                sigma[rows] = s_act
                if not density_only:
                    rgb[rows] = c_act
        if need_grad:
            records.append((i, rows, coef, hcache, s_raw, c_raw, s_act, c_act))
    if mode == "laplacian":
        sigma = activation("truncated_exp", sigma_raw_sum)
        if not density_only:
            rgb = activation("sigmoid", rgb_raw_sum)

    cache = None
    if need_grad:
        cache = {"mode": mode, "records": records, "feats": feats, "weight": weight,
                 "density_only": density_only, "sigma": sigma, "rgb": rgb}
        if mode == "laplacian":
            cache["raw"] = (sigma_raw_sum, rgb_raw_sum)
    return FieldOutput(sigma, rgb, cache)


def evaluate_backward(field, out: FieldOutput, d_sigma: np.ndarray, d_rgb: np.ndarray | None) -> None:
    """Accumulate parameter gradients for a previous ``evaluate(..., need_grad=True)``."""
    cache = out.cache
    if cache is None:
        raise ValueError("evaluate was not run with need_grad=True")
    mode = cache["mode"]
    feats: _GridFeatures = cache["feats"]
    weight = cache["weight"]
    density_only = cache["density_only"]
    if density_only:
        d_rgb = None
    if mode == "laplacian":
        s_sum, c_sum = cache["raw"]
        ds_sum = activation_backward("truncated_exp", s_sum, d_sigma, cache["sigma"])
        dc_sum = None if d_rgb is None else activation_backward("sigmoid", c_sum, d_rgb, cache["rgb"])
    for i, rows, coef, hcache, s_raw, c_raw, s_act, c_act in cache["records"]:
        if mode == "laplacian":
            ds_raw = ds_sum[rows]
            dc_raw = None if dc_sum is None else dc_sum[rows]
        else:
            ds = d_sigma[rows]
            dc = None if d_rgb is None else d_rgb[rows]
            if mode == "default_interp":
                ds = coef * ds
                dc = None if dc is None else coef[:, None] * dc
            ds_raw = activation_backward("truncated_exp", s_raw, ds, s_act)
            dc_raw = None if dc is None else activation_backward("sigmoid", c_raw, dc, c_act)
        d_inp = field.heads[i].backward(hcache, ds_raw, dc_raw)
        if mode == "feature_interp":
            w = weight[rows]
            feats.add_grad(_grid_index(field, i), rows, w[:, None] * d_inp)
            if i > 0:
                width = field.heads[i - 1].in_dim
                feats.add_grad(_grid_index(field, i - 1), rows, (1 - w)[:, None] * d_inp[:, :width])
        else:
            feats.add_grad(_grid_index(field, i), rows, d_inp)
    feats.backward()


def evaluate_per_sample(field, x, d, assignment: LevelAssignment, mode: str | None = None):
    """Reference path: one sample at a time, no bucketing. Slow; for checking."""
    mode = mode or field.pyramid_config.mode
    dtype = field.dtype
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sh_all = encode_direction(d).astype(dtype)
    S = x.shape[0]
    sigma = np.zeros(S, dtype=dtype)
    rgb = np.zeros((S, 3), dtype=dtype)

    def raw(i, inp, sh):
        s, c, _ = field.run_head(i, inp, sh)
        return s, c

    def feat(i, xi):
        f, _ = field.grid_for(i).encode(xi, field.grid_levels_for_head[i])
        return f[:, :field.heads[i].in_dim]

    for n in range(S):
        xi = x[n:n + 1]
        sh = sh_all[n:n + 1]
        l = int(assignment.level[n])
        w = dtype.type(1.0 if l == 0 else assignment.weight[n])
        if mode == "gauss":
            s, c = raw(l, feat(l, xi), sh)
            sigma[n], rgb[n] = activation("truncated_exp", s)[0], activation("sigmoid", c)[0]
        elif mode == "laplacian":
            s_tot = np.zeros(1, dtype=dtype)
            c_tot = np.zeros((1, 3), dtype=dtype)
            for i in range(l + 1):
                s, c = raw(i, feat(i, xi), sh)
                s_tot += s
                c_tot += c
            sigma[n], rgb[n] = activation("truncated_exp", s_tot)[0], activation("sigmoid", c_tot)[0]
        elif mode == "default_interp":
            s_hi, c_hi = raw(l, feat(l, xi), sh)
            s_val = w * activation("truncated_exp", s_hi)[0]
            c_val = w * activation("sigmoid", c_hi)[0]
            if l > 0:
                s_lo, c_lo = raw(l - 1, feat(l - 1, xi), sh)
                s_val = s_val + (1 - w) * activation("truncated_exp", s_lo)[0]
                c_val = c_val + (1 - w) * activation("sigmoid", c_lo)[0]
            sigma[n], rgb[n] = s_val, c_val
        elif mode == "feature_interp":
            coarse = feat(l - 1, xi) if l > 0 else None
            inp = blend_features(np.array([w], dtype=dtype), feat(l, xi), coarse)
            s, c = raw(l, inp, sh)
            sigma[n], rgb[n] = activation("truncated_exp", s)[0], activation("sigmoid", c)[0]
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return sigma, rgb
