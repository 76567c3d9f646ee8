"""Command-line behavior: config precedence, pipeline smoke, exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from sfmdepth.cli import main
from sfmdepth.dataset_io import read_pfm, read_ply


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def echoed_config(stdout):
    for line in stdout.splitlines():
        if line.startswith("resolved-config "):
            return json.loads(line[len("resolved-config ") :])
    raise AssertionError("no resolved-config line in output")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One generated dataset plus a short training run, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    ckpt = root / "model.npz"
    assert main(
        ["gen", "--out", str(data), "--frames", "4", "--size", "16",
         "--points", "40", "--seed", "3"]
    ) == 0
    assert main(
        ["train", "--data", str(data), "--out", str(ckpt), "--model", "depthnet",
         "--levels", "2", "--base-channels", "4", "--epochs", "2",
         "--validation-fraction", "0.0", "--seed", "0"]
    ) == 0
    return root, data, ckpt


class TestConfigResolution:
    def test_flags_override_defaults_and_echo(self, capsys, tmp_path):
        out = tmp_path / "ds"
        code, stdout, _ = run_cli(
            capsys, "gen", "--out", str(out), "--frames", "2", "--size", "16",
            "--points", "30", "--seed", "5",
        )
        assert code == 0
        cfg = echoed_config(stdout)
        assert cfg["frames"] == 2
        assert cfg["points"] == 30
        assert cfg["seed"] == 5
        assert cfg["sigma_frac"] == 0.005
        assert cfg["scene"] == "heightfield"
        assert (out / "manifest.json").is_file()

    def test_config_file_fills_gaps_but_flags_win(self, capsys, tmp_path):
        cfg_file = tmp_path / "gen.json"
        cfg_file.write_text(json.dumps({"frames": 3, "points": 25, "seed": 4}))
        out = tmp_path / "ds"
        code, stdout, _ = run_cli(
            capsys, "gen", "--config", str(cfg_file), "--out", str(out),
            "--frames", "2", "--size", "16",
        )
        assert code == 0
        cfg = echoed_config(stdout)
        assert cfg["frames"] == 2  # flag beats file
        assert cfg["points"] == 25  # file beats default
        assert cfg["seed"] == 4

    def test_unknown_config_key_rejected(self, capsys, tmp_path):
        cfg_file = tmp_path / "gen.json"
        cfg_file.write_text(json.dumps({"framez": 3}))
        code, _, err = run_cli(capsys, "gen", "--config", str(cfg_file), "--out", "x")
        assert code == 2
        assert "framez" in err

    def test_config_file_missing(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "gen", "--config", str(tmp_path / "no.json"), "--out", "x"
        )
        assert code == 2
        assert "not found" in err

    def test_config_file_invalid_json(self, capsys, tmp_path):
        cfg_file = tmp_path / "bad.json"
        cfg_file.write_text("{oops")
        code, _, err = run_cli(capsys, "gen", "--config", str(cfg_file), "--out", "x")
        assert code == 2
        assert "JSON" in err

    def test_config_root_must_be_object(self, capsys, tmp_path):
        cfg_file = tmp_path / "list.json"
        cfg_file.write_text("[1, 2]")
        code, _, _ = run_cli(capsys, "gen", "--config", str(cfg_file), "--out", "x")
        assert code == 2

    def test_missing_required_option(self, capsys):
        code, _, err = run_cli(capsys, "gen")
        assert code == 2
        assert "--out" in err


class TestPipeline:
    def test_predict_writes_rasters_for_all_frames(self, capsys, pipeline, tmp_path):
        _, data, ckpt = pipeline
        out = tmp_path / "pred"
        code, _, _ = run_cli(
            capsys, "predict", "--checkpoint", str(ckpt), "--data", str(data),
            "--out", str(out),
        )
        assert code == 0
        files = sorted(p.name for p in out.glob("*.pfm"))
        assert files == [f"depth_{i:05d}.pfm" for i in range(4)]
        raster = read_pfm(out / "depth_00000.pfm")
        assert raster.shape == (16, 16)
        assert np.all(raster > 0)

    def test_predict_respects_frame_subset(self, capsys, pipeline, tmp_path):
        _, data, ckpt = pipeline
        out = tmp_path / "pred"
        code, _, _ = run_cli(
            capsys, "predict", "--checkpoint", str(ckpt), "--data", str(data),
            "--out", str(out), "--frames", "1,3",
        )
        assert code == 0
        assert sorted(p.name for p in out.glob("*.pfm")) == [
            "depth_00001.pfm", "depth_00003.pfm"
        ]

    def test_bad_frame_list_is_config_error(self, capsys, pipeline, tmp_path):
        _, data, ckpt = pipeline
        code, _, _ = run_cli(
            capsys, "predict", "--checkpoint", str(ckpt), "--data", str(data),
            "--out", str(tmp_path / "p"), "--frames", "1,x",
        )
        assert code == 2

    def test_eval_from_prediction_directory(self, capsys, pipeline, tmp_path):
        _, data, ckpt = pipeline
        pred = tmp_path / "pred"
        assert main(
            ["predict", "--checkpoint", str(ckpt), "--data", str(data),
             "--out", str(pred)]
        ) == 0
        capsys.readouterr()
        report_path = tmp_path / "report.json"
        code, stdout, _ = run_cli(
            capsys, "eval", "--data", str(data), "--pred", str(pred),
            "--report", str(report_path),
        )
        assert code == 0
        body = stdout.split("\n", 1)[1]  # after the resolved-config line
        report = json.loads(body)
        assert [f["frame_id"] for f in report["frames"]] == [0, 1, 2, 3]
        assert report["mean_aligned_rms"] > 0
        assert json.loads(report_path.read_text()) == report

    def test_eval_from_checkpoint_matches_prediction_directory(
        self, capsys, pipeline, tmp_path
    ):
        _, data, ckpt = pipeline
        pred = tmp_path / "pred"
        assert main(
            ["predict", "--checkpoint", str(ckpt), "--data", str(data),
             "--out", str(pred)]
        ) == 0
        capsys.readouterr()
        code_a, out_a, _ = run_cli(
            capsys, "eval", "--data", str(data), "--pred", str(pred)
        )
        code_b, out_b, _ = run_cli(
            capsys, "eval", "--data", str(data), "--checkpoint", str(ckpt)
        )
        assert code_a == code_b == 0
        report_a = json.loads(out_a.split("\n", 1)[1])
        report_b = json.loads(out_b.split("\n", 1)[1])
        # the prediction directory holds float32 rasters, so allow that grid
        assert report_a["mean_aligned_rms"] == pytest.approx(
            report_b["mean_aligned_rms"], rel=1e-5
        )
        assert report_a["mean_scale_corrected"] == pytest.approx(
            report_b["mean_scale_corrected"], rel=1e-5
        )
        assert [f["frame_id"] for f in report_a["frames"]] == [
            f["frame_id"] for f in report_b["frames"]
        ]

    def test_eval_requires_exactly_one_source(self, capsys, pipeline, tmp_path):
        _, data, ckpt = pipeline
        code_none, _, _ = run_cli(capsys, "eval", "--data", str(data))
        code_both, _, _ = run_cli(
            capsys, "eval", "--data", str(data), "--pred", str(tmp_path),
            "--checkpoint", str(ckpt),
        )
        assert code_none == 2
        assert code_both == 2

    def test_export_ply_with_intensity(self, capsys, pipeline, tmp_path):
        _, data, ckpt = pipeline
        pred = tmp_path / "pred"
        assert main(
            ["predict", "--checkpoint", str(ckpt), "--data", str(data),
             "--out", str(pred), "--frames", "0"]
        ) == 0
        capsys.readouterr()
        cloud_path = tmp_path / "cloud.ply"
        code, _, _ = run_cli(
            capsys, "export-ply", "--depth", str(pred / "depth_00000.pfm"),
            "--data", str(data), "--out", str(cloud_path),
            "--image", str(data / "images" / "frame_00000.pgm"),
        )
        assert code == 0
        depth = read_pfm(pred / "depth_00000.pfm")
        cloud = read_ply(cloud_path)
        assert len(cloud) == int(np.sum(depth > 0))
        assert "property float intensity" in cloud_path.read_text().split("end_header")[0]

    def test_resume_without_checkpoint_is_config_error(self, capsys, pipeline, tmp_path):
        _, data, _ = pipeline
        code, _, err = run_cli(
            capsys, "train", "--data", str(data), "--out", str(tmp_path / "new.npz"),
            "--epochs", "2", "--resume",
        )
        assert code == 2
        assert "resume" in err

    def test_gradcheck_passes(self, capsys):
        code, stdout, _ = run_cli(capsys, "gradcheck", "--seed", "0")
        assert code == 0
        assert "all 29 checks passed" in stdout


class TestExitCodes:
    def test_missing_dataset_is_data_error(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "train", "--data", str(tmp_path / "nope"),
            "--out", str(tmp_path / "m.npz"),
        )
        assert code == 3
        assert "data error" in err

    def test_missing_checkpoint_is_data_error(self, capsys, pipeline, tmp_path):
        _, data, _ = pipeline
        code, _, err = run_cli(
            capsys, "predict", "--checkpoint", str(tmp_path / "ghost.npz"),
            "--data", str(data), "--out", str(tmp_path / "p"),
        )
        assert code == 3
        assert "checkpoint not found" in err

    def test_missing_prediction_directory_is_data_error(self, capsys, pipeline, tmp_path):
        _, data, _ = pipeline
        code, _, _ = run_cli(
            capsys, "eval", "--data", str(data), "--pred", str(tmp_path / "ghost")
        )
        assert code == 3

    def test_divergent_training_is_numerical_error(self, capsys, pipeline, tmp_path):
        _, data, _ = pipeline
        with np.errstate(over="ignore"):
            code, _, err = run_cli(
                capsys, "train", "--data", str(data), "--out", str(tmp_path / "m.npz"),
                "--model", "pixel", "--learning-rate", "1e6", "--epochs", "3",
                "--validation-fraction", "0.0",
            )
        assert code == 4
        assert "numerical error" in err


class TestEntryPoints:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "sfmdepth", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "gen" in proc.stdout and "gradcheck" in proc.stdout

    def test_console_script(self):
        proc = subprocess.run(["sfmdepth", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "predict" in proc.stdout
