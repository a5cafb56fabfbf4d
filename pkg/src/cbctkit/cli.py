"""Command-line experiment driver.

Commands: ``simulate``, ``train``, ``restore``, ``evaluate``, ``sweep-steps``,
``report``.  Every command is a pure function of its config and seeds; with
``TOOLKIT_DETERMINISTIC=1`` torch runs single-threaded with deterministic
kernels so reruns produce bit-identical artifacts.

Exit codes: 0 success, 1 validation error (bad flags or config), 2 runtime
error.
"""

from __future__ import annotations

import csv
import json
import os
import sys

import click
import numpy as np

from . import __version__
from .denoiser import DenoiserConfig, load_checkpoint, save_checkpoint
from .errors import ConfigError, ToolkitError
from .geometry import (
    ConeBeamGeometry,
    make_desk_geometry,
    make_full_fan_geometry,
    make_reference_geometry,
)
from .metrics import evaluate_pair
from .phantom import load_manifest, load_pairs, make_dataset
from .restoration import (
    T_SAMPLING_FIXED_ONE,
    TrainingConfig,
    restore_volume,
    train_model,
)
from .volume import read_volume, write_volume

DETERMINISTIC_ENV = "TOOLKIT_DETERMINISTIC"

_GEOMETRY_PRESETS = {
    "desk": make_desk_geometry,
    "reference": make_reference_geometry,
    "full-fan": make_full_fan_geometry,
}


def deterministic_mode_enabled() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0")


def _apply_deterministic_mode() -> None:
    if deterministic_mode_enabled():
        import torch

        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")


def _field(cfg: dict, name: str, kind, default=None, required=False):
    if name not in cfg:
        if required:
            raise ConfigError(f"config field '{name}': missing")
        return default
    value = cfg[name]
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config field '{name}': expected {kind.__name__}, got {value!r}")


def _geometry_from_config(cfg) -> ConeBeamGeometry:
    if cfg is None:
        return make_desk_geometry()
    if isinstance(cfg, str):
        if cfg not in _GEOMETRY_PRESETS:
            raise ConfigError(
                f"config field 'geometry': unknown preset {cfg!r} "
                f"(choose from {sorted(_GEOMETRY_PRESETS)})"
            )
        return _GEOMETRY_PRESETS[cfg]()
    if isinstance(cfg, dict):
        return ConeBeamGeometry.from_dict(cfg)
    raise ConfigError("config field 'geometry': expected preset name or object")


@click.group(name="cbctkit")
@click.version_option(__version__)
def cli():
    """Sparse-view cone-beam CT toolkit."""


@cli.command()
@click.argument("config_path", metavar="CONFIG.json")
def simulate(config_path):
    """Generate a paired sparse/dense pseudo-CBCT dataset from a JSON config.

    Config fields: out_dir (required), n, views_dense, views_sparse,
    master_seed, geometry (preset name or object), grid {dims, spacing_mm},
    n_inclusions.
    """
    _apply_deterministic_mode()
    cfg = _load_json(config_path)
    out_dir = _field(cfg, "out_dir", str, required=True)
    n = _field(cfg, "n", int, default=8)
    views_dense = _field(cfg, "views_dense", int, default=180)
    views_sparse = _field(cfg, "views_sparse", int, default=50)
    master_seed = _field(cfg, "master_seed", int, default=0)
    n_inclusions = cfg.get("n_inclusions")
    if n_inclusions is not None:
        n_inclusions = _field(cfg, "n_inclusions", int)
    if n < 1:
        raise ConfigError(f"config field 'n': must be >= 1, got {n}")
    if views_sparse < 2:
        raise ConfigError(f"config field 'views_sparse': must be >= 2, got {views_sparse}")
    if views_dense < views_sparse:
        raise ConfigError(
            f"config field 'views_dense': must be >= views_sparse, got "
            f"{views_dense} < {views_sparse}"
        )
    geom = _geometry_from_config(cfg.get("geometry"))
    grid_cfg = cfg.get("grid", {})
    dims = tuple(grid_cfg.get("dims", (64, 64, 32)))
    spacing = tuple(grid_cfg.get("spacing_mm", (4.0, 4.0, 6.0)))
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ConfigError(f"config field 'grid.dims': need 3 positive ints, got {list(dims)}")
    if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
        raise ConfigError(
            f"config field 'grid.spacing_mm': need 3 positive floats, got {list(spacing)}"
        )
    manifest = make_dataset(
        n,
        views_sparse,
        views_dense,
        geom,
        out_dir,
        master_seed=master_seed,
        dims=dims,
        spacing=spacing,
        n_inclusions=n_inclusions,
        verbose=True,
    )
    click.echo(f"wrote {len(manifest['samples'])} pairs to {out_dir}")


@cli.command()
@click.option("--dataset", "dataset_path", required=True, help="dataset manifest JSON")
@click.option("--out", "out_dir", required=True, help="output directory")
@click.option("--val-dataset", "val_path", default=None, help="validation manifest")
@click.option("--config", "config_path", default=None, help="JSON with 'denoiser'/'training' sections")
@click.option("--epochs", type=int, default=None, help="override training epochs")
@click.option("--seed", type=int, default=None, help="override training seed")
@click.option(
    "--baseline-unet",
    is_flag=True,
    help="disable the time embedding (plain 3D U-Net comparator, t fixed at 1)",
)
def train(dataset_path, out_dir, val_path, config_path, epochs, seed, baseline_unet):
    """Train the restorer on a simulated dataset; writes checkpoint + CSV log."""
    _apply_deterministic_mode()
    cfg = _load_json(config_path) if config_path else {}
    den_kwargs = dict(cfg.get("denoiser", {}))
    train_kwargs = dict(cfg.get("training", {}))
    if baseline_unet:
        den_kwargs["with_time_embedding"] = False
        train_kwargs["t_sampling"] = T_SAMPLING_FIXED_ONE
    if epochs is not None:
        train_kwargs["epochs"] = epochs
    if seed is not None:
        train_kwargs["seed"] = seed
    if "attention_levels" in den_kwargs and den_kwargs["attention_levels"] is not None:
        den_kwargs["attention_levels"] = tuple(den_kwargs["attention_levels"])
    try:
        dconfig = DenoiserConfig(**den_kwargs)
        tconfig = TrainingConfig(**train_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}")
    pairs = load_pairs(dataset_path)
    val_pairs = load_pairs(val_path) if val_path else None
    os.makedirs(out_dir, exist_ok=True)
    model, history = train_model(
        pairs,
        tconfig,
        dconfig,
        val_pairs=val_pairs,
        log_path=os.path.join(out_dir, "training_log.csv"),
        verbose=True,
    )
    ckpt = os.path.join(out_dir, "checkpoint")
    save_checkpoint(
        model,
        ckpt,
        seed=tconfig.seed,
        step=len(history),
        extra={
            "training": tconfig.to_dict(),
            "dataset": os.path.abspath(dataset_path),
            "version": __version__,
        },
    )
    with open(os.path.join(out_dir, "train_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "kind": "train-manifest",
                "version": __version__,
                "dataset": os.path.abspath(dataset_path),
                "val_dataset": os.path.abspath(val_path) if val_path else None,
                "denoiser": dconfig.to_dict(),
                "training": tconfig.to_dict(),
                "deterministic": deterministic_mode_enabled(),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    click.echo(f"checkpoint written to {ckpt}.json/.raw")


@cli.command()
@click.option("--checkpoint", "ckpt_path", required=True)
@click.option("--input", "input_path", required=True, help="degraded volume (base path)")
@click.option("--output", "output_path", required=True)
@click.option("--steps", type=int, default=2, show_default=True, help="restoration steps N")
def restore(ckpt_path, input_path, output_path, steps):
    """Restore a sparse-view volume with a trained checkpoint."""
    _apply_deterministic_mode()
    if steps < 1:
        raise ConfigError(f"--steps must be >= 1, got {steps}")
    model, _header = load_checkpoint(ckpt_path)
    vol = read_volume(input_path)
    restored = restore_volume(model, vol, steps)
    write_volume(restored, output_path)
    click.echo(f"restored volume written to {output_path}")


def _metric_row(pred, target, mask_mode: str) -> dict:
    report = evaluate_pair(pred, target, mask=mask_mode if mask_mode != "none" else "none")
    row = report.as_dict()
    if mask_mode == "none":
        row["mae_masked"] = ""
        row["psnr_masked"] = ""
    return row


def _write_csv(path: str, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_fmt(row.get(k, "")) for k in fieldnames})


def _csv_fmt(value):
    if isinstance(value, float):
        return "inf" if value == float("inf") else repr(value)
    return value


@cli.command()
@click.option("--pred", "pred_path", required=True)
@click.option("--target", "target_path", required=True)
@click.option(
    "--mask",
    "mask_mode",
    type=click.Choice(["body", "none"]),
    default="body",
    show_default=True,
)
@click.option("--out", "out_path", default=None, help="CSV output path")
def evaluate(pred_path, target_path, mask_mode, out_path):
    """Distortion metrics for a (prediction, target) volume pair."""
    _apply_deterministic_mode()
    pred = read_volume(pred_path)
    target = read_volume(target_path)
    row = _metric_row(pred, target, mask_mode)
    fields = ["mae_masked", "psnr_masked", "psnr_unmasked", "ssim"]
    if out_path:
        _write_csv(out_path, fields, [row])
        click.echo(f"metrics written to {out_path}")
    for key in fields:
        click.echo(f"{key}: {row[key]}")


def _parse_steps(spec: str) -> list[int]:
    steps: list[int] = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if "-" in token:
            lo, _, hi = token.partition("-")
            try:
                lo_i, hi_i = int(lo), int(hi)
            except ValueError:
                raise ConfigError(f"--steps: cannot parse range {token!r}")
            if lo_i < 1 or hi_i < lo_i:
                raise ConfigError(f"--steps: bad range {token!r}")
            steps.extend(range(lo_i, hi_i + 1))
        else:
            try:
                steps.append(int(token))
            except ValueError:
                raise ConfigError(f"--steps: cannot parse {token!r}")
    if not steps or any(s < 1 for s in steps):
        raise ConfigError(f"--steps: need positive step counts, got {spec!r}")
    return sorted(set(steps))


@cli.command(name="sweep-steps")
@click.option("--checkpoint", "ckpt_path", required=True)
@click.option("--dataset", "dataset_path", required=True, help="evaluation manifest")
@click.option("--steps", "steps_spec", default="1-10", show_default=True,
              help="step counts, e.g. '1,2,5' or '1-30'")
@click.option("--out", "out_dir", required=True)
def sweep_steps(ckpt_path, dataset_path, steps_spec, out_dir):
    """Restore an evaluation set at several step counts; emit CSV, a line
    plot, and per-step center slices for external perceptual scoring."""
    _apply_deterministic_mode()
    steps = _parse_steps(steps_spec)
    model, _header = load_checkpoint(ckpt_path)
    pairs = load_pairs(dataset_path)
    os.makedirs(out_dir, exist_ok=True)
    slice_dir = os.path.join(out_dir, "slices")
    os.makedirs(slice_dir, exist_ok=True)
    from .metrics import body_mask, mae, psnr, ssim

    masks = [body_mask(t.values).mask for _, t in pairs]
    rows = []
    for step in steps:
        maes, psnrs, ssims = [], [], []
        for i, (inp, tgt) in enumerate(pairs):
            restored = restore_volume(model, inp, step)
            maes.append(mae(restored.values, tgt.values, masks[i]))
            psnrs.append(psnr(restored.values, tgt.values, masks[i]))
            ssims.append(ssim(restored.values, tgt.values))
            if i == 0:
                _save_center_slice(
                    restored.values, os.path.join(slice_dir, f"steps{step:02d}.png")
                )
        rows.append(
            {
                "steps": step,
                "mae_masked": float(np.mean(maes)),
                "psnr_masked": float(np.mean(psnrs)),
                "ssim": float(np.mean(ssims)),
            }
        )
        click.echo(
            f"steps={step}: psnr_masked={rows[-1]['psnr_masked']:.2f} "
            f"mae_masked={rows[-1]['mae_masked']:.2f}"
        )
    csv_path = os.path.join(out_dir, "sweep.csv")
    _write_csv(csv_path, ["steps", "mae_masked", "psnr_masked", "ssim"], rows)
    _plot_sweep(rows, os.path.join(out_dir, "sweep.png"))
    click.echo(f"sweep written to {csv_path}")


def _save_center_slice(values: np.ndarray, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import image as mpimage

    axial = values[:, :, values.shape[2] // 2].T
    mpimage.imsave(path, axial, cmap="gray", vmin=-1000.0, vmax=1000.0, origin="lower")


def _plot_sweep(rows: list[dict], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["steps"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(steps, [r["psnr_masked"] for r in rows], "o-", color="tab:blue")
    ax1.set_xlabel("restoration steps")
    ax1.set_ylabel("masked PSNR (dB)", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(steps, [r["mae_masked"] for r in rows], "s--", color="tab:red")
    ax2.set_ylabel("masked MAE (HU)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@cli.command()
@click.option("--dir", "exp_dir", required=True, help="experiment directory to summarize")
def report(exp_dir):
    """Summarize manifests, training logs, and metric CSVs under a directory."""
    if not os.path.isdir(exp_dir):
        raise ConfigError(f"--dir: not a directory: {exp_dir}")
    found = False
    for root, _dirs, files in sorted(os.walk(exp_dir)):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, exp_dir)
            if name == "manifest.json":
                try:
                    m = load_manifest(path)
                except (ConfigError, KeyError):
                    continue
                click.echo(
                    f"{rel}: dataset of {m['n_samples']} pairs "
                    f"({m['views_sparse']}/{m['views_dense']} views, seed {m['master_seed']})"
                )
                found = True
            elif name == "training_log.csv":
                with open(path, newline="", encoding="utf-8") as fh:
                    rows = list(csv.DictReader(fh))
                if rows:
                    last = rows[-1]
                    msg = (
                        f"{rel}: {len(rows)} epochs, final train_mae={last['train_mae']}"
                    )
                    if last.get("val_psnr_masked"):
                        msg += f", val_psnr_masked={last['val_psnr_masked']}"
                    click.echo(msg)
                    found = True
            elif name.endswith(".csv"):
                with open(path, newline="", encoding="utf-8") as fh:
                    rows = list(csv.DictReader(fh))
                click.echo(f"{rel}: {len(rows)} rows [{', '.join(rows[0].keys())}]" if rows else f"{rel}: empty")
                found = True
    if not found:
        click.echo("no manifests, logs, or CSVs found")


def main(argv=None) -> int:
    """Entry point with the stable exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 2
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except (ToolkitError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        click.echo(f"runtime error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
