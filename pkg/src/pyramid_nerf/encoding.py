"""Multi-resolution hash-grid features and spherical-harmonic view encoding."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ParameterStore

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)

# Corner offsets in the order used everywhere: bit 0 -> x, bit 1 -> y, bit 2 -> z.
CORNERS = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class HashGridConfig:
    num_grid_levels: int = 8
    base_grid_resolution: int = 16
    per_level_scale: float = 1.6
    features_per_level: int = 2
    table_size: int = 2 ** 16

    def __post_init__(self):
        if self.num_grid_levels < 1:
            raise ValueError("num_grid_levels must be >= 1")
        if not self.per_level_scale > 1:
            raise ValueError("per_level_scale must be > 1")
        if self.base_grid_resolution < 1 or self.features_per_level < 1:
            raise ValueError("base_grid_resolution and features_per_level must be >= 1")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ValueError(f"table_size must be a power of two, got {t}")

    @property
    def output_dim(self) -> int:
        return self.num_grid_levels * self.features_per_level

    def resolutions(self) -> list[int]:
        """Cells per box side for each grid level."""
        return [
            int(np.floor(self.base_grid_resolution * self.per_level_scale ** k + 1e-9))
            for k in range(self.num_grid_levels)
        ]

    def entries(self) -> list[int]:
        """Table rows per grid level: dense while it fits, hashed otherwise."""
        return [min(self.table_size, (r + 1) ** 3) for r in self.resolutions()]

    def to_dict(self) -> dict:
        return asdict(self)


def spatial_hash(ijk: np.ndarray, table_size: int) -> np.ndarray:
    """XOR of coordinate-times-prime in wrapping 32-bit arithmetic, masked to the table."""
    ijk = np.asarray(ijk).astype(np.uint32)
    h = ijk[..., 0] * np.uint32(HASH_PRIMES[0])
    h ^= ijk[..., 1] * np.uint32(HASH_PRIMES[1])
    h ^= ijk[..., 2] * np.uint32(HASH_PRIMES[2])
    return (h & np.uint32(table_size - 1)).astype(np.int64)


class HashGrid:
    """Hash-grid encoder whose tables live inside a ``ParameterStore``.

    ``bounds`` is a ``(2, 3)`` array of box min/max; positions are mapped to
    the unit cube and clamped to it before lookup.
    """

    def __init__(self, config: HashGridConfig, bounds, store: ParameterStore, name: str = "grid",
                 rng: np.random.Generator | None = None):
        self.config = config
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        self.store = store
        self.name = name
        self.resolutions = config.resolutions()
        self.entries = config.entries()
        rng = rng if rng is not None else np.random.default_rng(0)
        for k, n in enumerate(self.entries):
            store.add(self._segment(k), rng.uniform(-1e-4, 1e-4, size=(n, config.features_per_level)))

    def _segment(self, k: int) -> str:
        return f"{self.name}.level{k}"

    @property
    def box_side(self) -> float:
        return float(np.max(self.bounds[1] - self.bounds[0]))

    def world_resolutions(self) -> np.ndarray:
        """Grid cells per unit world length at each level."""
        return np.asarray(self.resolutions, dtype=np.float64) / self.box_side

    def normalize(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)

    def corner_indices(self, x: np.ndarray, k: int):
        """Table rows and trilinear weights of the 8 corners around ``x`` at level ``k``.

        Both are ``(8, n)`` (corner-major). Corner ``c`` has offset bits
        ``(c & 1, c >> 1 & 1, c >> 2 & 1)`` in x, y, z.
        """
        res = self.resolutions[k]
        pos = self.normalize(np.asarray(x, dtype=np.float64)) * res
        base = np.minimum(np.floor(pos), res - 1)
        frac = pos - base
        b = np.ascontiguousarray(base.T).astype(np.int64)
        if (res + 1) ** 3 <= self.config.table_size:
            ax = (b[0], b[1] * (res + 1), b[2] * (res + 1) ** 2)
            steps = (1, res + 1, (res + 1) ** 2)
            combine = np.add
        else:
            ax = tuple(b[a].astype(np.uint32) * np.uint32(HASH_PRIMES[a]) for a in range(3))
            steps = tuple(np.uint32(p) for p in HASH_PRIMES)
            combine = np.bitwise_xor
        lo_hi = [(ax[a], ax[a] + steps[a]) for a in range(3)]
        idx = np.empty((8, len(pos)), dtype=ax[0].dtype)
        for c in range(8):
            yz = combine(lo_hi[1][(c >> 1) & 1], lo_hi[2][(c >> 2) & 1])
            combine(yz, lo_hi[0][c & 1], out=idx[c])
        if combine is np.bitwise_xor:
            idx &= np.uint32(self.config.table_size - 1)
        idx = idx.astype(np.intp)
        dtype = self.store.dtype
        f = np.ascontiguousarray(frac.T).astype(dtype)
        wa = [(1 - f[a], f[a]) for a in range(3)]
        weights = np.empty((8, len(pos)), dtype=dtype)
        for c in range(8):
            np.multiply(wa[1][(c >> 1) & 1] * wa[2][(c >> 2) & 1], wa[0][c & 1], out=weights[c])
        return idx, weights, frac

    def _gather(self, k: int, idx: np.ndarray) -> np.ndarray:
        """Corner feature rows ``(8, n, F)`` fetched with one gather."""
        table = np.ascontiguousarray(self.store[self._segment(k)])
        F = table.shape[1]
        rows = table.view(np.dtype((np.void, F * table.itemsize))).ravel()
        return rows[idx].view(table.dtype).reshape(idx.shape + (F,))

    def encode(self, x: np.ndarray, num_levels: int | None = None):
        """Features for positions ``x`` (``(n, 3)``).

        Only the first ``num_levels`` grid levels are looked up; the remaining
        feature slots are zero. Returns ``(features, cache)``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cfg = self.config
        num_levels = cfg.num_grid_levels if num_levels is None else num_levels
        dtype = self.store.dtype
        out = np.zeros((x.shape[0], cfg.output_dim), dtype=dtype)
        cache = []
        F = cfg.features_per_level
        for k in range(num_levels):
            idx, w, frac = self.corner_indices(x, k)
            out[:, k * F:(k + 1) * F] = np.einsum("cn,cnf->nf", w, self._gather(k, idx))
            cache.append((idx, w, frac))
        return out, (x, cache)

    def backward(self, cache, grad_features: np.ndarray, need_x_grad: bool = False):
        """Scatter feature cotangents into the table gradients."""
        x, levels = cache
        F = self.config.features_per_level
        grad_x = np.zeros_like(x) if need_x_grad else None
        for k, (idx, w, frac) in enumerate(levels):
            g = grad_features[:, k * F:(k + 1) * F]
            if not np.any(g):
                continue
            gtab = self.store.grad(self._segment(k))
            flat_idx = idx.ravel()
            for f in range(F):
                contrib = (w * g[:, f]).ravel()
                gtab[:, f] += np.bincount(flat_idx, weights=contrib, minlength=gtab.shape[0]).astype(gtab.dtype)
            if need_x_grad:
                grad_x += self._position_grad(x, k, idx, frac, g)
        return grad_x

    def _position_grad(self, x, k, idx, frac, g):
        res = self.resolutions[k]
        lo, hi = self.bounds
        u = (x - lo) / (hi - lo)
        inside = (u > 0) & (u < 1)
        dot = np.einsum("cnf,nf->nc", self._gather(k, idx), g)
        grad = np.zeros_like(x)
        for a in range(3):
            dsel = np.where(CORNERS[None, :, a] == 1, 1.0, -1.0)
            others = [b for b in range(3) if b != a]
            wo = np.ones_like(dot)
            for b in others:
                wo = wo * np.where(CORNERS[None, :, b] == 1, frac[:, None, b], 1.0 - frac[:, None, b])
            grad[:, a] = np.sum(dsel * wo * dot, axis=1) * res / (hi[a] - lo[a])
        return grad * inside


# ---------------------------------------------------------------------------
# view direction

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

SH_DIM = 16


def encode_direction(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of degrees 0-3 (16 values per direction)."""
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1) > 1e-6):
        logger.warning("encode_direction: %d non-unit directions normalized",
                       int(np.sum(np.abs(norm - 1) > 1e-6)))
        d = d / np.where(norm > 0, norm, 1.0)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((d.shape[0], SH_DIM))
    out[:, 0] = SH_C0
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (xx - yy)
    out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
    out[:, 10] = SH_C3[1] * x * y * z
    out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out[0] if single else out
