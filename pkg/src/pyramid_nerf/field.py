"""Per-level MLP heads over shared (or per-level) hash-grid features."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .autodiff import ParameterStore, activation, linear_backward, linear_forward
from .encoding import SH_DIM, HashGrid, HashGridConfig, encode_direction

DENSITY_HIDDEN = 64
DENSITY_OUT = 16  # sigma + 15 geometry features
COLOR_HIDDEN = 128
GEO_DIM = DENSITY_OUT - 1
# raw-density output bias at init; truncated_exp(0) = 1 so sigma starts near 1
DENSITY_BIAS_INIT = 0.0


def head_parameter_count(in_dim: int) -> int:
    """Closed-form size of one head: density MLP (1x64) + colour MLP (2x128)."""
    density = in_dim * DENSITY_HIDDEN + DENSITY_HIDDEN + DENSITY_HIDDEN * DENSITY_OUT + DENSITY_OUT
    color_in = GEO_DIM + SH_DIM
    color = (color_in * COLOR_HIDDEN + COLOR_HIDDEN
             + COLOR_HIDDEN * COLOR_HIDDEN + COLOR_HIDDEN
             + COLOR_HIDDEN * 3 + 3)
    return density + color


def _uniform(rng, fan_in, fan_out, gain):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class LevelHead:
    """One pyramid level: features -> (sigma_raw, rgb_raw) before activation."""

    def __init__(self, store: ParameterStore, name: str, in_dim: int, rng: np.random.Generator,
                 density_bias: float = DENSITY_BIAS_INIT):
        self.store = store
        self.name = name
        self.in_dim = in_dim
        relu_gain = np.sqrt(2.0)
        shapes = [
            ("w0", in_dim, DENSITY_HIDDEN, relu_gain),
            ("w1", DENSITY_HIDDEN, DENSITY_OUT, 1.0),
            ("w2", GEO_DIM + SH_DIM, COLOR_HIDDEN, relu_gain),
            ("w3", COLOR_HIDDEN, COLOR_HIDDEN, relu_gain),
            ("w4", COLOR_HIDDEN, 3, 1.0),
        ]
        for key, fan_in, fan_out, gain in shapes:
            store.add(f"{name}.{key}", _uniform(rng, fan_in, fan_out, gain))
            bias = np.zeros(fan_out)
            if key == "w1":
                bias[0] = density_bias
            store.add(f"{name}.b{key[1]}", bias)

    def _p(self, key):
        return self.store[f"{self.name}.{key}"]

    def _g(self, key):
        return self.store.grad(f"{self.name}.{key}")

    @property
    def parameter_count(self) -> int:
        return sum(self.store[f"{self.name}.{k}"].size
                   for k in ("w0", "b0", "w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"))

    def forward(self, feats: np.ndarray, sh: np.ndarray, density_only: bool = False):
        """Returns ``(sigma_raw, rgb_raw or None, cache)``."""
        h0_pre = linear_forward(feats, self._p("w0"), self._p("b0"))
        h0 = np.maximum(h0_pre, 0)
        dens = linear_forward(h0, self._p("w1"), self._p("b1"))
        sigma_raw = dens[:, 0]
        if density_only:
            return sigma_raw, None, (feats, h0_pre, h0, None)
        cin = np.concatenate([dens[:, 1:], sh], axis=1)
        h2_pre = linear_forward(cin, self._p("w2"), self._p("b2"))
        h2 = np.maximum(h2_pre, 0)
        h3_pre = linear_forward(h2, self._p("w3"), self._p("b3"))
        h3 = np.maximum(h3_pre, 0)
        rgb_raw = linear_forward(h3, self._p("w4"), self._p("b4"))
        return sigma_raw, rgb_raw, (feats, h0_pre, h0, (cin, h2_pre, h2, h3_pre, h3))

    def backward(self, cache, d_sigma_raw: np.ndarray, d_rgb_raw: np.ndarray | None) -> np.ndarray:
        """Accumulate parameter grads; return the cotangent of ``feats``."""
        feats, h0_pre, h0, color_cache = cache
        d_dens = np.zeros((feats.shape[0], DENSITY_OUT), dtype=feats.dtype)
        d_dens[:, 0] = d_sigma_raw
        if d_rgb_raw is not None:
            cin, h2_pre, h2, h3_pre, h3 = color_cache
            d_h3, gw, gb = linear_backward(h3, self._p("w4"), d_rgb_raw)
            self._g("w4")[...] += gw
            self._g("b4")[...] += gb
            d_h3 = d_h3 * (h3_pre > 0)
            d_h2, gw, gb = linear_backward(h2, self._p("w3"), d_h3)
            self._g("w3")[...] += gw
            self._g("b3")[...] += gb
            d_h2 = d_h2 * (h2_pre > 0)
            d_cin, gw, gb = linear_backward(cin, self._p("w2"), d_h2)
            self._g("w2")[...] += gw
            self._g("b2")[...] += gb
            d_dens[:, 1:] = d_cin[:, :GEO_DIM]
        d_h0, gw, gb = linear_backward(h0, self._p("w1"), d_dens)
        self._g("w1")[...] += gw
        self._g("b1")[...] += gb
        d_h0 = d_h0 * (h0_pre > 0)
        d_feats, gw, gb = linear_backward(feats, self._p("w0"), d_h0)
        self._g("w0")[...] += gw
        self._g("b0")[...] += gb
        return d_feats


class PyramidField:
    """Hash-grid features plus ``L`` independent level heads.

    With ``shared_grid`` a single :class:`HashGrid` feeds every head; otherwise
    each level owns its own grid. Head ``l`` reads grid levels
    ``0..grid_levels_for_head[l]-1`` so coarse heads never see fine features.
    """

    def __init__(self, grid_config: HashGridConfig, pyramid_config, bounds=((-1, -1, -1), (1, 1, 1)),
                 shared_grid: bool = True, dtype=np.float32, seed: int = 0):
        self.grid_config = grid_config
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        self.shared_grid = shared_grid
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.store = ParameterStore(dtype)
        side = float(np.max(self.bounds[1] - self.bounds[0]))
        world = np.asarray(grid_config.resolutions(), dtype=np.float64) / side
        self.pyramid_config = pyramid_config.resolve(world[-1])
        self.grid_levels_for_head = self._grid_levels_per_head(world)
        if shared_grid:
            self.grids = [HashGrid(grid_config, self.bounds, self.store, "grid0", rng)]
        else:
            # a per-level grid only needs the levels its head reads
            self.grids = [
                HashGrid(replace(grid_config, num_grid_levels=self.grid_levels_for_head[l]),
                         self.bounds, self.store, f"grid{l}", rng)
                for l in range(self.L)
            ]
        F = grid_config.features_per_level
        self.heads = [LevelHead(self.store, f"head{l}", self.grid_levels_for_head[l] * F, rng)
                      for l in range(self.L)]
        self.head_evals = np.zeros(self.L, dtype=np.int64)

    @property
    def L(self) -> int:
        return self.pyramid_config.L

    @property
    def dtype(self):
        return self.store.dtype

    def _grid_levels_per_head(self, world: np.ndarray) -> list[int]:
        out = []
        for l in range(self.L):
            target = self.pyramid_config.resolution(l)
            k = int(np.argmin(np.abs(np.log(world) - np.log(target))))
            out.append(k + 1)
        return out

    def grid_for(self, level: int) -> HashGrid:
        return self.grids[0] if self.shared_grid else self.grids[level]

    def head_input(self, level: int, feats: np.ndarray) -> np.ndarray:
        return feats[:, :self.heads[level].in_dim]

    def run_head(self, level: int, feats: np.ndarray, sh: np.ndarray, density_only: bool = False):
        self.head_evals[level] += feats.shape[0]
        return self.heads[level].forward(feats, sh, density_only)

    def reset_counters(self) -> None:
        self.head_evals[:] = 0

    def eval_head(self, level: int, x, d):
        """Activated ``(sigma, rgb)`` of a single head at positions ``x``."""
        if not 0 <= level < self.L:
            raise IndexError(f"level {level} out of range for a {self.L}-level pyramid")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        grid = self.grid_for(level)
        feats, _ = grid.encode(x, self.grid_levels_for_head[level])
        sh = encode_direction(d).astype(self.dtype)
        sigma_raw, rgb_raw, _ = self.run_head(level, self.head_input(level, feats), sh)
        return activation("truncated_exp", sigma_raw), activation("sigmoid", rgb_raw)

    def config_dict(self) -> dict:
        return {
            "grid": self.grid_config.to_dict(),
            "pyramid": self.pyramid_config.to_dict(),
            "bounds": self.bounds.tolist(),
            "shared_grid": self.shared_grid,
            "dtype": self.dtype.name,
            "seed": self.seed,
        }

