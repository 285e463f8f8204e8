"""Pinhole rays, stratified frustum samples, occupancy skipping and compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pyramid import (
    LevelAssignment,
    PyramidConfig,
    SupervisionGrid,
    assign_level,
    evaluate,
    evaluate_backward,
    evaluate_per_sample,
    footprint_measure,
    map_level,
)

WHITE = np.ones(3)


@dataclass
class Camera:
    """Pinhole camera looking down its local -z axis (x right, y up)."""

    width: int
    height: int
    focal: float
    pose: np.ndarray  # 3x4 camera-to-world
    near: float
    far: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera size must be positive, got {self.width}x{self.height}")
        if not self.focal > 0:
            raise ValueError(f"focal must be > 0, got {self.focal}")
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        R = self.pose[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    def scaled(self, factor: float) -> "Camera":
        """Same pose and field of view at ``factor`` times the resolution."""
        return Camera(int(np.floor(self.width * factor)), int(np.floor(self.height * factor)),
                      self.focal * factor, self.pose.copy(), self.near, self.far)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:, 3]

    def all_pixels(self) -> np.ndarray:
        ii, jj = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([ii.ravel(), jj.ravel()], axis=1)


@dataclass
class Rays:
    """A batch of rays; ``footprint_rate`` is footprint width per unit distance."""

    origins: np.ndarray
    directions: np.ndarray
    footprint_rate: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.footprint_rate[idx],
                    self.near[idx], self.far[idx])

    def to_matrix(self) -> np.ndarray:
        """``(n, 9)``: origin, direction, footprint_rate, near, far."""
        return np.column_stack([self.origins, self.directions, self.footprint_rate, self.near, self.far])

    @classmethod
    def from_matrix(cls, X: np.ndarray) -> "Rays":
        X = np.asarray(X, dtype=np.float64)
        return cls(X[:, 0:3], X[:, 3:6], X[:, 6], X[:, 7], X[:, 8])

    @classmethod
    def concatenate(cls, parts: list["Rays"]) -> "Rays":
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("origins", "directions", "footprint_rate", "near", "far")))


def pixel_directions(camera: Camera, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit world directions through continuous pixel coordinates (``u`` column, ``v`` row)."""
    cam = np.stack([(u - camera.width / 2) / camera.focal,
                    -(v - camera.height / 2) / camera.focal,
                    -np.ones_like(u, dtype=np.float64)], axis=-1)
    world = cam @ camera.pose[:, :3].T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def generate_rays(camera: Camera, pixels: np.ndarray | None = None) -> Rays:
    """Rays through pixel centres; ``pixels`` is ``(n, 2)`` of ``(row, col)``."""
    if pixels is None:
        pixels = camera.all_pixels()
    pixels = np.atleast_2d(np.asarray(pixels))
    rows, cols = pixels[:, 0], pixels[:, 1]
    if np.any(rows < 0) or np.any(rows >= camera.height) or np.any(cols < 0) or np.any(cols >= camera.width):
        raise IndexError(f"pixel index outside a {camera.height}x{camera.width} image")
    d = pixel_directions(camera, cols + 0.5, rows + 0.5)
    n = len(pixels)
    return Rays(np.broadcast_to(camera.center, (n, 3)).copy(), d,
                np.full(n, 1.0 / camera.focal), np.full(n, camera.near), np.full(n, camera.far))


# ---------------------------------------------------------------------------
# samples


@dataclass
class FrustumSamples:
    """Dense ``(rays, n)`` intervals; ``valid`` marks samples kept after skipping."""

    rays: Rays
    t0: np.ndarray
    t1: np.ndarray
    valid: np.ndarray

    @property
    def t_mid(self) -> np.ndarray:
        return 0.5 * (self.t0 + self.t1)

    @property
    def delta(self) -> np.ndarray:
        return self.t1 - self.t0

    @property
    def positions(self) -> np.ndarray:
        return self.rays.origins[:, None, :] + self.rays.directions[:, None, :] * self.t_mid[..., None]

    @property
    def footprint_width(self) -> np.ndarray:
        return self.rays.footprint_rate[:, None] * self.t_mid

    @property
    def volume(self) -> np.ndarray:
        return self.footprint_width ** 2 * self.delta

    def flat(self):
        """Positions, directions, widths, volumes of the valid samples."""
        v = self.valid
        dirs = np.broadcast_to(self.rays.directions[:, None, :], v.shape + (3,))
        return self.positions[v], dirs[v], self.footprint_width[v], self.volume[v]

    @property
    def count(self) -> int:
        return int(self.valid.sum())


def sample_rays(rays: Rays, n: int, occupancy: "OccupancyGrid | None" = None,
                rng: np.random.Generator | None = None) -> FrustumSamples:
    """Partition ``[near, far]`` into ``n`` intervals.

    With ``rng`` the interior interval boundaries are jittered uniformly
    within one stratum width around their regular positions. Without it the
    partition is regular.
    """
    if n < 1:
        raise ValueError("need at least one sample per ray")
    R = len(rays)
    j = np.arange(n + 1, dtype=np.float64)
    frac = np.broadcast_to(j / n, (R, n + 1)).copy()
    if rng is not None and n > 1:
        u = rng.random((R, n - 1))
        frac[:, 1:n] = (j[1:n] - 0.5 + u) / n
    span = (rays.far - rays.near)[:, None]
    edges = rays.near[:, None] + span * frac
    t0, t1 = edges[:, :-1], edges[:, 1:]
    samples = FrustumSamples(rays, t0, t1, np.ones((R, n), dtype=bool))
    if occupancy is not None:
        samples.valid = occupancy.query(samples.positions.reshape(-1, 3)).reshape(R, n)
    return samples


class OccupancyGrid:
    """Binary grid of cells with non-negligible density, refreshed with decay."""

    def __init__(self, bounds, resolution: int = 64, threshold: float = 0.01, decay: float = 0.95,
                 update_every: int = 16):
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        self.resolution = resolution
        self.threshold = threshold
        self.decay = decay
        self.update_every = update_every
        n = resolution ** 3
        self.estimates = np.zeros(n, dtype=np.float32)
        self.occupied = np.ones(n, dtype=bool)
        self.initialized = False

    def cell_index(self, x: np.ndarray):
        lo, hi = self.bounds
        u = (x - lo) / (hi - lo)
        inside = np.all((u >= 0) & (u <= 1), axis=-1)
        ijk = np.clip((u * self.resolution).astype(np.int64), 0, self.resolution - 1)
        return ijk[:, 0] + self.resolution * (ijk[:, 1] + self.resolution * ijk[:, 2]), inside

    def query(self, x: np.ndarray) -> np.ndarray:
        """True where ``x`` lies inside the box in an occupied cell."""
        idx, inside = self.cell_index(np.asarray(x, dtype=np.float64))
        return inside & self.occupied[idx]

    def cell_centers(self) -> np.ndarray:
        r = self.resolution
        c = (np.arange(r) + 0.5) / r
        zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
        u = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
        lo, hi = self.bounds
        return lo + u * (hi - lo)

    def update(self, density_fn, step_size: float, chunk: int = 1 << 16, cells: np.ndarray | None = None) -> None:
        """``estimate = max(decay * estimate, 1 - exp(-sigma * step))`` at cell centres.

        ``density_fn(x, ids)`` gets centre positions and their cell ids. With
        ``cells`` only those cells are refreshed; the first update covers all.
        """
        if not self.initialized:
            cells = None
        ids = np.arange(self.resolution ** 3) if cells is None else np.asarray(cells)
        centers = self.cell_centers()[ids]
        new = np.empty(len(ids), dtype=np.float32)
        for s in range(0, len(ids), chunk):
            sigma = np.asarray(density_fn(centers[s:s + chunk], ids[s:s + chunk]), dtype=np.float64)
            new[s:s + chunk] = -np.expm1(-sigma * step_size)
        if self.initialized:
            self.estimates[ids] = np.maximum(self.decay * self.estimates[ids], new)
        else:
            self.estimates = new
            self.initialized = True
        self.occupied = self.estimates > self.threshold

    def set_all(self, occupied: bool) -> None:
        self.occupied[:] = occupied

    @property
    def occupancy_fraction(self) -> float:
        return float(self.occupied.mean())


# ---------------------------------------------------------------------------
# compositing


def composite(sigma: np.ndarray, rgb: np.ndarray, delta: np.ndarray, background=WHITE):
    """Front-to-back quadrature over dense ``(rays, n)`` arrays.

    Returns ``(color, weights, residual_transmittance)``.
    """
    sigma = np.asarray(sigma)
    rgb = np.asarray(rgb)
    delta = np.asarray(delta, dtype=sigma.dtype)
    if sigma.shape != delta.shape or rgb.shape != sigma.shape + (3,):
        raise ValueError(f"misaligned composite inputs: sigma {sigma.shape}, rgb {rgb.shape}, delta {delta.shape}")
    tau = sigma * delta
    cs = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros_like(cs[..., :1]), cs[..., :-1]], axis=-1))
    alpha = -np.expm1(-tau)
    weights = trans * alpha
    residual = np.exp(-cs[..., -1]) if cs.shape[-1] else np.ones(sigma.shape[:-1], dtype=sigma.dtype)
    bg = np.asarray(background, dtype=sigma.dtype)
    color = np.sum(weights[..., None] * rgb, axis=-2) + residual[..., None] * bg
    return color, weights, residual


def composite_backward(sigma, rgb, delta, weights, residual, d_color, background=WHITE):
    """Cotangents ``(d_sigma, d_rgb)`` for :func:`composite`."""
    delta = np.asarray(delta, dtype=sigma.dtype)
    bg = np.asarray(background, dtype=sigma.dtype)
    d_rgb = weights[..., None] * d_color[..., None, :]
    wc = np.einsum("...n,...nc,...c->...n", weights, rgb, d_color)
    # colour gathered strictly behind each sample, background included
    after = np.flip(np.cumsum(np.flip(wc, -1), -1), -1) - wc
    after = after + (residual * (d_color @ bg))[..., None]
    trans_next = np.exp(-np.cumsum(sigma * delta, axis=-1))
    own = trans_next * np.einsum("...nc,...c->...n", rgb, d_color)
    d_sigma = delta * (own - after)
    return d_sigma, d_rgb


# ---------------------------------------------------------------------------
# full render


@dataclass
class RenderResult:
    color: np.ndarray
    weights: np.ndarray
    residual: np.ndarray
    samples: FrustumSamples
    assignment: LevelAssignment
    n_clamped: int = 0
    cache: dict = field(default_factory=dict, repr=False)


def assign_samples(samples_flat, config: PyramidConfig) -> LevelAssignment:
    _, _, width, volume = samples_flat
    P = footprint_measure(width, volume, config.level_selection)
    return assign_level(map_level(P, config), config)


def render_rays(field, rays: Rays, n_samples: int, *, rng=None, occupancy: OccupancyGrid | None = None,
                supervision: SupervisionGrid | None = None, clamp: bool = False, need_grad: bool = False,
                per_sample: bool = False, background=WHITE, mode: str | None = None) -> RenderResult:
    """Sample, assign levels, evaluate the pyramid and composite."""
    config = field.pyramid_config
    samples = sample_rays(rays, n_samples, occupancy, rng)
    flat = samples.flat()
    x, d = flat[0], flat[1]
    assignment = assign_samples(flat, config)
    n_clamped = 0
    if clamp and supervision is not None:
        assignment, n_clamped = supervision.clamp(x, assignment)
    dtype = field.dtype
    R, n = samples.valid.shape
    sigma = np.zeros((R, n), dtype=dtype)
    rgb = np.zeros((R, n, 3), dtype=dtype)
    out = None
    if len(x):
        if per_sample:
            s, c = evaluate_per_sample(field, x, d, assignment, mode)
        else:
            out = evaluate(field, x, d, assignment, mode, need_grad=need_grad)
            s, c = out.sigma, out.rgb
        sigma[samples.valid] = s
        rgb[samples.valid] = c
    delta = samples.delta.astype(dtype)
    color, weights, residual = composite(sigma, rgb, delta, background)
    cache = {}
    if need_grad:
        cache = {"sigma": sigma, "rgb": rgb, "delta": delta, "field_out": out, "background": background}
    return RenderResult(color, weights, residual, samples, assignment, n_clamped, cache)


def render_backward(field, result: RenderResult, d_color: np.ndarray) -> None:
    """Accumulate parameter gradients of a render made with ``need_grad=True``."""
    c = result.cache
    if not c:
        raise ValueError("render_rays was not run with need_grad=True")
    if c["field_out"] is None:
        return
    d_sigma, d_rgb = composite_backward(c["sigma"], c["rgb"], c["delta"], result.weights, result.residual,
                                        d_color.astype(c["sigma"].dtype), c["background"])
    v = result.samples.valid
    evaluate_backward(field, c["field_out"], d_sigma[v], d_rgb[v])


def render_ray(field, ray: Rays, n_samples: int, **kwargs) -> np.ndarray:
    """Colour of a single ray (``ray`` may be a length-1 :class:`Rays`)."""
    return render_rays(field, ray, n_samples, **kwargs).color[0]
