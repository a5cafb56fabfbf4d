import csv
import json
import os

import numpy as np
import pytest

from cbctkit.cli import _parse_steps, main
from cbctkit.errors import ConfigError
from cbctkit.volume import read_volume


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end workspace: dataset -> checkpoint, reused across tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    config = {
        "out_dir": str(data_dir),
        "n": 2,
        "views_dense": 12,
        "views_sparse": 4,
        "master_seed": 1,
        "geometry": "desk",
        "grid": {"dims": [16, 16, 8], "spacing_mm": [12.0, 12.0, 18.0]},
    }
    cfg_path = root / "simulate.json"
    cfg_path.write_text(json.dumps(config))
    assert main(["simulate", str(cfg_path)]) == 0

    train_cfg = {
        "denoiser": {"levels": 2, "base_channels": 4, "time_embed_dim": 8},
        "training": {"epochs": 2, "batch": 2, "seed": 0},
    }
    train_cfg_path = root / "train.json"
    train_cfg_path.write_text(json.dumps(train_cfg))
    run_dir = root / "run"
    assert (
        main(
            [
                "train",
                "--dataset",
                str(data_dir / "manifest.json"),
                "--out",
                str(run_dir),
                "--config",
                str(train_cfg_path),
            ]
        )
        == 0
    )
    return {
        "root": root,
        "data": data_dir,
        "manifest": data_dir / "manifest.json",
        "checkpoint": run_dir / "checkpoint",
        "run": run_dir,
    }


def test_simulate_outputs(workspace):
    manifest = json.load(open(workspace["manifest"]))
    assert manifest["n_samples"] == 2
    raws = [f for f in os.listdir(workspace["data"]) if f.endswith(".raw")]
    assert len(raws) == 4


def test_train_outputs(workspace):
    log = workspace["run"] / "training_log.csv"
    rows = list(csv.DictReader(open(log)))
    assert len(rows) == 2  # one row per epoch
    assert rows[0]["epoch"] == "1"
    assert os.path.exists(str(workspace["checkpoint"]) + ".json")
    assert os.path.exists(str(workspace["checkpoint"]) + ".raw")
    tm = json.load(open(workspace["run"] / "train_manifest.json"))
    assert tm["training"]["epochs"] == 2


def test_restore_roundtrip(workspace):
    inp = workspace["data"] / "sample0000_input"
    out = workspace["root"] / "restored"
    code = main(
        [
            "restore",
            "--checkpoint",
            str(workspace["checkpoint"]),
            "--input",
            str(inp),
            "--output",
            str(out),
            "--steps",
            "2",
        ]
    )
    assert code == 0
    vol = read_volume(str(out))
    assert vol.unit == "HU"
    assert vol.dims == (16, 16, 8)


def test_restore_single_step_equals_regression(workspace):
    from cbctkit.denoiser import load_checkpoint
    from cbctkit.restoration import model_denoise_fn
    from cbctkit.volume import denormalize_array, normalize_array

    inp = workspace["data"] / "sample0000_input"
    out1 = workspace["root"] / "restored_n1"
    assert (
        main(
            [
                "restore",
                "--checkpoint",
                str(workspace["checkpoint"]),
                "--input",
                str(inp),
                "--output",
                str(out1),
                "--steps",
                "1",
            ]
        )
        == 0
    )
    model, _ = load_checkpoint(str(workspace["checkpoint"]))
    vol = read_volume(str(inp))
    direct = denormalize_array(
        model_denoise_fn(model)(normalize_array(vol.values), 1.0)
    )
    got = read_volume(str(out1))
    np.testing.assert_array_equal(got.values, direct)


def test_evaluate_pair_metrics(workspace, capsys):
    pred = workspace["data"] / "sample0000_input"
    target = workspace["data"] / "sample0000_target"
    out_csv = workspace["root"] / "metrics.csv"
    code = main(
        [
            "evaluate",
            "--pred",
            str(pred),
            "--target",
            str(target),
            "--out",
            str(out_csv),
        ]
    )
    assert code == 0
    rows = list(csv.DictReader(open(out_csv)))
    assert len(rows) == 1
    assert set(rows[0]) == {"mae_masked", "psnr_masked", "psnr_unmasked", "ssim"}
    assert float(rows[0]["mae_masked"]) > 0


def test_evaluate_identical_pair_is_inf(workspace):
    target = workspace["data"] / "sample0000_target"
    out_csv = workspace["root"] / "metrics_self.csv"
    code = main(
        [
            "evaluate",
            "--pred",
            str(target),
            "--target",
            str(target),
            "--out",
            str(out_csv),
        ]
    )
    assert code == 0
    row = list(csv.DictReader(open(out_csv)))[0]
    assert row["mae_masked"] == "0.0"
    assert row["psnr_masked"] == "inf"
    assert row["ssim"] == "1.0"


def test_evaluate_mask_none(workspace):
    pred = workspace["data"] / "sample0000_input"
    target = workspace["data"] / "sample0000_target"
    out_csv = workspace["root"] / "metrics_none.csv"
    code = main(
        [
            "evaluate",
            "--pred",
            str(pred),
            "--target",
            str(target),
            "--mask",
            "none",
            "--out",
            str(out_csv),
        ]
    )
    assert code == 0
    row = list(csv.DictReader(open(out_csv)))[0]
    assert row["mae_masked"] == ""
    assert row["psnr_masked"] == ""
    assert row["psnr_unmasked"] != ""


def test_sweep_steps_outputs(workspace):
    out_dir = workspace["root"] / "sweep"
    code = main(
        [
            "sweep-steps",
            "--checkpoint",
            str(workspace["checkpoint"]),
            "--dataset",
            str(workspace["manifest"]),
            "--steps",
            "1,2",
            "--out",
            str(out_dir),
        ]
    )
    assert code == 0
    rows = list(csv.DictReader(open(out_dir / "sweep.csv")))
    assert [r["steps"] for r in rows] == ["1", "2"]
    assert os.path.exists(out_dir / "sweep.png")
    assert os.path.exists(out_dir / "slices" / "steps01.png")
    assert os.path.exists(out_dir / "slices" / "steps02.png")


def test_sweep_rerun_reproduces_csv(workspace):
    outs = []
    for name in ("sweep_a", "sweep_b"):
        out_dir = workspace["root"] / name
        assert (
            main(
                [
                    "sweep-steps",
                    "--checkpoint",
                    str(workspace["checkpoint"]),
                    "--dataset",
                    str(workspace["manifest"]),
                    "--steps",
                    "1,2",
                    "--out",
                    str(out_dir),
                ]
            )
            == 0
        )
        outs.append(open(out_dir / "sweep.csv", "rb").read())
    assert outs[0] == outs[1]


def test_report_summarizes(workspace, capsys):
    code = main(["report", "--dir", str(workspace["root"])])
    assert code == 0
    out = capsys.readouterr().out
    assert "dataset of 2 pairs" in out
    assert "training_log.csv" in out


def test_train_baseline_unet_flag(workspace):
    out = workspace["root"] / "baseline_run"
    code = main(
        [
            "train",
            "--dataset",
            str(workspace["manifest"]),
            "--out",
            str(out),
            "--epochs",
            "1",
            "--config",
            str(workspace["root"] / "train.json"),
            "--baseline-unet",
        ]
    )
    assert code == 0
    manifest = json.load(open(out / "train_manifest.json"))
    assert manifest["denoiser"]["with_time_embedding"] is False
    assert manifest["training"]["t_sampling"] == "fixed-one"
    from cbctkit.denoiser import load_checkpoint

    model, _ = load_checkpoint(str(out / "checkpoint"))
    assert model.time_mlp is None


def test_parse_steps():
    assert _parse_steps("1,2,5") == [1, 2, 5]
    assert _parse_steps("1-4") == [1, 2, 3, 4]
    assert _parse_steps("3,1-2") == [1, 2, 3]
    with pytest.raises(ConfigError):
        _parse_steps("0")
    with pytest.raises(ConfigError):
        _parse_steps("abc")


def test_exit_code_validation_error(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"out_dir": str(tmp_path / "d"), "views_sparse": 0}))
    assert main(["simulate", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "views_sparse" in err


def test_exit_code_missing_config():
    assert main(["simulate", "/nonexistent/config.json"]) == 1


def test_exit_code_usage_error():
    assert main(["restore"]) == 1  # missing required options


def test_exit_code_runtime_error(tmp_path):
    # checkpoint does not exist -> runtime error
    code = main(
        [
            "restore",
            "--checkpoint",
            str(tmp_path / "nope"),
            "--input",
            str(tmp_path / "x"),
            "--output",
            str(tmp_path / "y"),
        ]
    )
    assert code == 2


def test_unknown_command():
    assert main(["frobnicate"]) == 1
