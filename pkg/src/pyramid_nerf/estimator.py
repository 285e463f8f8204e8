"""scikit-learn style wrapper: rays in, colours out."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .metrics import psnr
from .pyramid import PyramidConfig
from .render import Rays, render_rays
from .training import RaySampler, TrainConfig, TrainState, build_field, mean_step_size, run_iterations

RAY_FEATURES = 9  # origin (3), unit direction (3), footprint rate, near, far


def _check_rays(X: np.ndarray) -> None:
    if X.shape[1] != RAY_FEATURES:
        raise ValueError(f"expected {RAY_FEATURES} ray features per row, got {X.shape[1]}")
    if np.any(X[:, 6] <= 0):
        raise ValueError("footprint rate must be > 0")
    if np.any(X[:, 7] >= X[:, 8]):
        raise ValueError("near must be < far for every ray")


class PyramidFieldRegressor(RegressorMixin, BaseEstimator):
    """Fits a pyramid of grid radiance fields to ray/colour pairs.

    ``X`` rows are rays as produced by :meth:`Rays.to_matrix`; ``y`` rows are
    RGB targets in ``[0, 1]``. ``score`` reports PSNR in dB rather than R^2.
    """

    def __init__(self, levels: int = 8, mode: str = "default_interp", level_selection: str = "projected_area",
                 shared_grid: bool = True, iterations: int = 3000, batch_rays: int = 8192,
                 samples_per_ray: int = 128, target_samples: int | None = None, lr_grid: float = 1e-2,
                 lr_heads: float = 1e-3, seed: int = 0, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                 clamp: bool = True):
        self.levels = levels
        self.mode = mode
        self.level_selection = level_selection
        self.shared_grid = shared_grid
        self.iterations = iterations
        self.batch_rays = batch_rays
        self.samples_per_ray = samples_per_ray
        self.target_samples = target_samples
        self.lr_grid = lr_grid
        self.lr_heads = lr_heads
        self.seed = seed
        self.bounds = bounds
        self.clamp = clamp

    def _train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_rays=self.batch_rays,
                           samples_per_ray=self.samples_per_ray, target_samples=self.target_samples,
                           lr_grid=self.lr_grid, lr_heads=self.lr_heads, seed=self.seed)

    def fit(self, X, y, scales=None):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        _check_rays(X)
        if y.ndim != 2 or y.shape[1] != 3:
            raise ValueError(f"y must be (n, 3) RGB, got {y.shape}")
        cfg = self._train_config()
        rays = Rays.from_matrix(X)
        scales = np.ones(len(X)) if scales is None else np.asarray(scales, dtype=np.float64)
        field = build_field(PyramidConfig(L=self.levels, mode=self.mode, level_selection=self.level_selection),
                            bounds=self.bounds, shared_grid=self.shared_grid, seed=self.seed)
        self.state_ = TrainState.create(field, cfg, mean_step_size(rays, cfg.samples_per_ray))
        self.loss_curve_ = run_iterations(self.state_, RaySampler(rays, y, scales), cfg.iterations)
        self.n_features_in_ = RAY_FEATURES
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        _check_rays(X)
        st = self.state_
        rays = Rays.from_matrix(X)
        out = np.empty((len(X), 3))
        for s in range(0, len(X), 4096):
            res = render_rays(st.field, rays[s:s + 4096], st.config.samples_per_ray, occupancy=st.occupancy,
                              supervision=st.supervision, clamp=self.clamp)
            out[s:s + 4096] = res.color
        return out

    def score(self, X, y, sample_weight=None):
        if sample_weight is not None:
            raise ValueError("sample weights are not supported")
        return psnr(np.clip(self.predict(X), 0, 1), np.asarray(y, dtype=np.float64))
