"""Scikit-learn style estimator wrapping the dense encoder-decoder, so the
reconstructor composes with pipelines and parameter search."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .ded import LossConfig, forward, infer, train
from .errors import GridMismatch
from .grid import GridSpec, OccupancyVolume


class DedReconstructor(BaseEstimator):
    """Reconstruct full occupancy volumes from sparse path volumes.

    fit(X, y) accepts lists of OccupancyVolume (grid inferred) or arrays of
    shape (n_samples, n_voxels) with ``grid`` set in the constructor.
    """

    def __init__(self, grid=None, hidden_sizes=(64, 64), epochs=50, batch_size=16,
                 lr=3e-3, beta1=0.9, beta2=0.999, eps_adam=1e-8,
                 ce_weight=0.4, dice_weight=0.6, lambda_swr=0.0,
                 use_boundary_mask=True, mask_alpha=14.0, mask_sigma=1.5,
                 input_mask_prob=0.1, seed=0):
        self.grid = grid
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_adam = eps_adam
        self.ce_weight = ce_weight
        self.dice_weight = dice_weight
        self.lambda_swr = lambda_swr
        self.use_boundary_mask = use_boundary_mask
        self.mask_alpha = mask_alpha
        self.mask_sigma = mask_sigma
        self.input_mask_prob = input_mask_prob
        self.seed = seed

    def _loss_config(self) -> LossConfig:
        return LossConfig(
            ce_weight=self.ce_weight, dice_weight=self.dice_weight,
            lambda_swr=self.lambda_swr, use_boundary_mask=self.use_boundary_mask,
            mask_alpha=self.mask_alpha, mask_sigma=self.mask_sigma,
            input_mask_prob=self.input_mask_prob,
        )

    def _resolve(self, X):
        """Normalize inputs to (list of OccupancyVolume, grid)."""
        if len(X) and isinstance(X[0], OccupancyVolume):
            grid = X[0].grid
            if self.grid is not None and GridSpec(*_grid_tuple(self.grid)) != grid:
                raise GridMismatch("constructor grid differs from input volumes")
            return list(X), grid
        if self.grid is None:
            raise ValueError("array input requires grid in the constructor")
        grid = GridSpec(*_grid_tuple(self.grid))
        arr = np.asarray(X)
        vols = [OccupancyVolume(grid, row.reshape(grid.dims) > 0.5) for row in arr]
        return vols, grid

    def fit(self, X, y):
        xv, grid = self._resolve(X)
        yv, grid_y = self._resolve(y)
        if grid != grid_y:
            raise GridMismatch("input and target grids differ")
        self.model_, self.history_ = train(
            list(zip(xv, yv)), grid, hidden_sizes=self.hidden_sizes,
            cfg=self._loss_config(), epochs=self.epochs, batch_size=self.batch_size,
            seed=self.seed, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            eps_adam=self.eps_adam,
        )
        self.grid_ = grid
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        xv, grid = self._resolve(X)
        if grid != self.grid_:
            raise GridMismatch("input grid differs from fitted grid")
        flat = np.stack([v.data.ravel().astype(float) for v in xv])
        z, _ = forward(self.model_, flat, mode="infer")
        return z

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        xv, grid = self._resolve(X)
        if grid != self.grid_:
            raise GridMismatch("input grid differs from fitted grid")
        return [infer(self.model_, v)[1] for v in xv]


def _grid_tuple(grid):
    if isinstance(grid, GridSpec):
        return grid.dims, grid.spacing_mm, grid.origin_mm
    return tuple(grid["dims"]), grid["spacing_mm"], tuple(grid["origin_mm"])
