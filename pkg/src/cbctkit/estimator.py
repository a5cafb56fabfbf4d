"""Scikit-learn style estimator wrapping the trainable restorer.

``SparseViewRestorer`` follows the sklearn contract: hyperparameters are
stored verbatim in ``__init__``, fitted state lives in trailing-underscore
attributes, and ``get_params``/``set_params``/``clone`` work through
``BaseEstimator``.  X is a stack of sparse-view HU volumes, y the matching
dense-view targets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .denoiser import DenoiserConfig
from .metrics import body_mask, psnr
from .restoration import (
    T_SAMPLING_FIXED_ONE,
    T_SAMPLING_GRID,
    TrainingConfig,
    restore_batch,
    train_model,
)
from .validation import as_volume_stack, check_divisible_dims, check_paired_stacks


class SparseViewRestorer(BaseEstimator):
    """Removes sparse-view streak artefacts from reconstructed volumes.

    Parameters mirror the network and training recipes; see
    :class:`~cbctkit.denoiser.DenoiserConfig` and
    :class:`~cbctkit.restoration.TrainingConfig`.  ``n_steps`` is the default
    number of restoration steps at prediction time.
    """

    def __init__(
        self,
        levels: int = 3,
        base_channels: int = 8,
        attention_levels=None,
        time_embed_dim: int = 64,
        with_time_embedding: bool = True,
        norm: str = "batch",
        lr: float = 1e-4,
        lr_step_epochs: int = 10,
        lr_decay: float = 0.95,
        batch_size: int = 4,
        grad_accum_every: int = 2,
        epochs: int = 30,
        n_steps: int = 2,
        t_grid: int = 100,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.levels = levels
        self.base_channels = base_channels
        self.attention_levels = attention_levels
        self.time_embed_dim = time_embed_dim
        self.with_time_embedding = with_time_embedding
        self.norm = norm
        self.lr = lr
        self.lr_step_epochs = lr_step_epochs
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.grad_accum_every = grad_accum_every
        self.epochs = epochs
        self.n_steps = n_steps
        self.t_grid = t_grid
        self.random_state = random_state
        self.verbose = verbose

    def _configs(self):
        dconfig = DenoiserConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            attention_levels=self.attention_levels,
            time_embed_dim=self.time_embed_dim,
            with_time_embedding=self.with_time_embedding,
            norm=self.norm,
        )
        tconfig = TrainingConfig(
            lr=self.lr,
            lr_step_epochs=self.lr_step_epochs,
            lr_decay=self.lr_decay,
            batch=self.batch_size,
            grad_accum_every=self.grad_accum_every,
            epochs=self.epochs,
            seed=self.random_state,
            t_grid=self.t_grid,
            t_sampling=(
                T_SAMPLING_GRID if self.with_time_embedding else T_SAMPLING_FIXED_ONE
            ),
        )
        return dconfig, tconfig

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on paired (sparse, dense) HU volumes.

        Validation pairs, when given, add a per-epoch masked-PSNR column to
        ``history_``.
        """
        X = as_volume_stack(X, "X")
        y = as_volume_stack(y, "y")
        check_paired_stacks(X, y)
        check_divisible_dims(X.shape[1:], self.levels)
        dconfig, tconfig = self._configs()
        pairs = list(zip(X, y))
        val_pairs = None
        if X_val is not None:
            X_val = as_volume_stack(X_val, "X_val")
            y_val = as_volume_stack(y_val, "y_val")
            check_paired_stacks(X_val, y_val)
            val_pairs = list(zip(X_val, y_val))
        self.model_, self.history_ = train_model(
            pairs, tconfig, dconfig, val_pairs=val_pairs, verbose=self.verbose
        )
        self.denoiser_config_ = dconfig
        self.training_config_ = tconfig
        self.volume_shape_ = X.shape[1:]
        return self

    def predict(self, X, n_steps: int | None = None) -> np.ndarray:
        """Restored HU volumes, shape (N, nx, ny, nz)."""
        check_is_fitted(self, "model_")
        X = as_volume_stack(X, "X")
        check_divisible_dims(X.shape[1:], self.levels)
        steps = self.n_steps if n_steps is None else int(n_steps)
        return restore_batch(self.model_, X, steps)

    def transform(self, X) -> np.ndarray:
        """Alias for :meth:`predict` so the estimator drops into pipelines."""
        return self.predict(X)

    def score(self, X, y) -> float:
        """Mean masked PSNR (dB) of predictions against dense targets."""
        check_is_fitted(self, "model_")
        X = as_volume_stack(X, "X")
        y = as_volume_stack(y, "y")
        check_paired_stacks(X, y)
        pred = self.predict(X)
        scores = [
            psnr(pred[i], y[i], body_mask(y[i]).mask) for i in range(len(pred))
        ]
        return float(np.mean(scores))
