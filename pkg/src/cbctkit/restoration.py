"""Iterative restoration: the degradation mixture, the deterministic
multi-step sampler, the training-time t distribution, and the trainer.

The degradation at level t is the convex combination
``x_t = (1 - t) * x + t * y`` between the clean target x (t = 0) and the
degraded input y (t = 1).  Restoration inverts that path in N steps over the
descending grid t = 1, 1 - 1/N, ..., 1/N:

    x_{t - 1/N} = (1 / (N t)) * F(x_t, t) + (1 - 1 / (N t)) * x_t

where F predicts the clean volume from any degradation level.  On that grid
N*t is the exact integer N - k, so the mixing coefficients are computed
without rounding; with N = 1 the sampler reduces bit-exactly to F(y, 1).
The degradation is deterministic and noise-free; a stochastic perturbation
exists only as the opt-in ``noise_level`` extension of :func:`degrade`.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .errors import ConfigError, DivergenceError
from .metrics import body_mask, psnr
from .volume import VoxelVolume, denormalize_array, normalize_array

T_SAMPLING_GRID = "grid"
T_SAMPLING_FIXED_ONE = "fixed-one"


@dataclass(frozen=True)
class RestorationSchedule:
    """Step count N and the induced descending time grid."""

    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def times(self) -> np.ndarray:
        """t_k = 1 - k/N for k = 0..N: strictly decreasing from 1 to 0."""
        n = self.n_steps
        return 1.0 - np.arange(n + 1, dtype=np.float64) / n


def degrade(
    x: np.ndarray,
    y: np.ndarray,
    t: float,
    noise_level: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Convex mixture between clean x (t=0) and degraded y (t=1).

    Endpoints are returned bit-exactly.  ``noise_level`` enables the
    stochastic-perturbation extension (adds t * noise_level Gaussian noise);
    it defaults to 0 and nothing in the toolkit turns it on.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ConfigError(f"degrade shapes differ: {x.shape} vs {y.shape}")
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ConfigError(f"t must lie in [0, 1], got {t}")
    if noise_level < 0.0:
        raise ConfigError(f"noise_level must be >= 0, got {noise_level}")
    if noise_level == 0.0:
        if t == 0.0:
            return x.copy()
        if t == 1.0:
            return y.copy()
    mixed = ((1.0 - t) * x + t * y).astype(x.dtype, copy=False)
    if noise_level > 0.0 and t > 0.0:
        gen = rng if rng is not None else np.random.default_rng(0)
        mixed = (mixed + t * noise_level * gen.standard_normal(x.shape)).astype(
            x.dtype, copy=False
        )
    return mixed


def sample(
    y: np.ndarray,
    schedule: RestorationSchedule,
    denoise_fn,
) -> np.ndarray:
    """Run the N-step restoration from the degraded volume y.

    ``denoise_fn(values, t)`` must return the clean-volume prediction with
    the same shape.  Exactly N evaluations are made.  Raises DivergenceError
    naming the step if an intermediate goes non-finite.
    """
    x_hat = np.asarray(y).copy()
    n = schedule.n_steps
    for k in range(n):
        nt = n - k  # N * t_k, exactly
        t = nt / n
        pred = np.asarray(denoise_fn(x_hat, t))
        if pred.shape != x_hat.shape:
            raise ConfigError(
                f"denoiser returned shape {pred.shape}, expected {x_hat.shape}"
            )
        if not np.all(np.isfinite(pred)):
            raise DivergenceError(f"non-finite prediction at step {k + 1}/{n} (t={t})")
        coeff = 1.0 / nt
        x_hat = (coeff * pred + (1.0 - coeff) * x_hat).astype(x_hat.dtype, copy=False)
        if not np.all(np.isfinite(x_hat)):
            raise DivergenceError(f"non-finite estimate at step {k + 1}/{n} (t={t})")
    return x_hat


def sample_t(rng: np.random.Generator, grid: int = 100) -> float:
    """Training-time degradation level: uniform on {1/T, ..., 1}, never 0."""
    return int(rng.integers(1, int(grid) + 1)) / float(grid)


def model_denoise_fn(model: Denoiser):
    """Adapter: (B?, X, Y, Z) normalized numpy arrays -> model prediction."""

    def fn(values: np.ndarray, t: float) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float32)
        batched = arr.ndim == 4
        x = torch.from_numpy(np.ascontiguousarray(arr))
        if not batched:
            x = x[None]
        was_training = model.training
        model.eval()
        with torch.no_grad():
            out = model(x[:, None], float(t))[:, 0].numpy()
        if was_training:
            model.train()
        return out if batched else out[0]

    return fn


def restore_volume(model: Denoiser, vol: VoxelVolume, n_steps: int) -> VoxelVolume:
    """HU volume in, restored HU volume out (normalize, sample, denormalize)."""
    norm = normalize_array(vol.values)
    restored = sample(norm, RestorationSchedule(n_steps), model_denoise_fn(model))
    return VoxelVolume(denormalize_array(restored), vol.spacing, vol.origin, unit="HU")


def restore_batch(model: Denoiser, volumes_hu: np.ndarray, n_steps: int) -> np.ndarray:
    """Batched restore for (N, X, Y, Z) HU arrays."""
    norm = normalize_array(volumes_hu)
    restored = sample(norm, RestorationSchedule(n_steps), model_denoise_fn(model))
    return denormalize_array(restored)


@dataclass(frozen=True)
class TrainingConfig:
    """Training recipe: Adam at lr 1e-4, MAE loss, batch 4 with gradient
    accumulation every 2 steps, lr times 0.95 every 10 epochs."""

    lr: float = 1e-4
    lr_step_epochs: int = 10
    lr_decay: float = 0.95
    batch: int = 4
    grad_accum_every: int = 2
    epochs: int = 30
    seed: int = 0
    t_grid: int = 100
    t_sampling: str = T_SAMPLING_GRID
    val_steps: int = 2

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 < self.lr_decay <= 1):
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.grad_accum_every < 1:
            raise ConfigError(f"grad_accum_every must be >= 1, got {self.grad_accum_every}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_step_epochs < 1:
            raise ConfigError(f"lr_step_epochs must be >= 1, got {self.lr_step_epochs}")
        if self.t_sampling not in (T_SAMPLING_GRID, T_SAMPLING_FIXED_ONE):
            raise ConfigError(f"unknown t_sampling {self.t_sampling!r}")

    def lr_at_epoch(self, epoch_index: int) -> float:
        """Learning rate during 0-indexed epoch ``epoch_index``."""
        return self.lr * self.lr_decay ** (epoch_index // self.lr_step_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


def _pairs_to_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    sparse, dense = [], []
    for inp, tgt in pairs:
        iv = inp.values if isinstance(inp, VoxelVolume) else np.asarray(inp)
        tv = tgt.values if isinstance(tgt, VoxelVolume) else np.asarray(tgt)
        if iv.shape != tv.shape:
            raise ConfigError(f"pair shapes differ: {iv.shape} vs {tv.shape}")
        sparse.append(iv.astype(np.float32))
        dense.append(tv.astype(np.float32))
    return np.stack(sparse), np.stack(dense)


def train_model(
    pairs,
    config: TrainingConfig,
    dconfig: DenoiserConfig,
    val_pairs=None,
    log_path: str | None = None,
    verbose: bool = False,
) -> tuple[Denoiser, list[dict]]:
    """Train the denoiser on (sparse HU, dense HU) volume pairs.

    Per step: draw a degradation level t per item (fixed at 1 for the
    baseline recipe), form x_t from the normalized pair, minimize the MAE of
    F(x_t, t) against the normalized dense target.  Logs one row per epoch
    with the lr, the mean training MAE, and when validation pairs are given
    the masked PSNR of the N-step restoration (N = ``config.val_steps``).
    Deterministic in (pairs, config, dconfig).
    """
    if not pairs:
        raise ConfigError("training requires a non-empty dataset")
    sparse_hu, dense_hu = _pairs_to_arrays(pairs)
    y_all = torch.from_numpy(normalize_array(sparse_hu))
    x_all = torch.from_numpy(normalize_array(dense_hu))
    n_samples = y_all.shape[0]

    val_inputs = val_targets = val_masks = None
    if val_pairs:
        v_sparse, v_dense = _pairs_to_arrays(val_pairs)
        val_inputs, val_targets = v_sparse, v_dense
        val_masks = [body_mask(v).mask for v in v_dense]

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = build_denoiser(dconfig, seed=config.seed)
    model.train()
    opt = torch.optim.Adam(
        model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8
    )

    history: list[dict] = []
    global_step = 0
    pending = 0
    for epoch in range(config.epochs):
        lr = config.lr_at_epoch(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n_samples)
        losses = []
        for start in range(0, n_samples, config.batch):
            idx = torch.from_numpy(order[start : start + config.batch].copy())
            x = x_all[idx][:, None]
            y = y_all[idx][:, None]
            if config.t_sampling == T_SAMPLING_FIXED_ONE:
                t = torch.ones(len(idx))
            else:
                t = torch.tensor(
                    [sample_t(rng, config.t_grid) for _ in range(len(idx))],
                    dtype=torch.float32,
                )
            tb = t[:, None, None, None, None]
            x_t = (1.0 - tb) * x + tb * y
            pred = model(x_t, t)
            loss = (pred - x).abs().mean()
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at step {global_step + 1} "
                    f"(epoch {epoch + 1})"
                )
            losses.append(float(loss.detach()))
            (loss / config.grad_accum_every).backward()
            pending += 1
            global_step += 1
            if pending == config.grad_accum_every:
                opt.step()
                opt.zero_grad()
                pending = 0
        if pending:
            opt.step()
            opt.zero_grad()
            pending = 0
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_mae": float(np.mean(losses)),
            "val_psnr_masked": "",
        }
        if val_inputs is not None:
            restored = restore_batch(model, val_inputs, config.val_steps)
            scores = [
                psnr(restored[i], val_targets[i], val_masks[i])
                for i in range(len(val_masks))
            ]
            row["val_psnr_masked"] = float(np.mean(scores))
        history.append(row)
        if verbose:
            msg = f"[train] epoch {row['epoch']}/{config.epochs} lr={lr:.3e} mae={row['train_mae']:.5f}"
            if row["val_psnr_masked"] != "":
                msg += f" val_psnr={row['val_psnr_masked']:.2f}"
            print(msg, flush=True)
    model.eval()
    if log_path:
        write_training_log(history, log_path)
    return model, history


def write_training_log(history: list[dict], path: str) -> None:
    """CSV log: one row per epoch (epoch, lr, train_mae, val_psnr_masked)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "lr", "train_mae", "val_psnr_masked"]
        )
        writer.writeheader()
        for row in history:
            writer.writerow({k: _fmt(row[k]) for k in writer.fieldnames})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value
