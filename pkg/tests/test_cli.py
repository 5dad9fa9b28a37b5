"""Command-line surface: exit codes, artifacts, full pipeline."""

import json

import numpy as np
import pytest

from hdrfuse.cli import main
from hdrfuse.datasets import read_image

TINY = [
    "--set", "network.embed_dim=8", "--set", "network.num_blocks=1",
    "--set", "network.depth_per_block=2", "--set", "network.num_heads=2",
    "--set", "network.window_sizes=[2, 4]", "--set",
    "network.attn_patch_size=4", "--set", "train.crop=32",
    "--set", "train.stride=32", "--set", "train.batch_size=2",
    "--set", "train.epochs=1", "--set", "train.timesteps=1",
    "--set", "apss.pool=32", "--set", "loss.taps=1",
    "--set", "synth.n_unlabeled=3", "--set", "synth.m_static=2",
    "--set", "synth.k_dynamic=1", "--set", "synth.height=32",
    "--set", "synth.width=32",
]


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path), "--set", "train.bogus=1"])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_override_shape(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path), "--set", "no_dots"])
        assert rc == 2

    def test_missing_dataset(self, tmp_path, capsys):
        rc = main(["pretrain", "--data", str(tmp_path / "nope"),
                   "--run-dir", str(tmp_path / "run")] + TINY)
        assert rc == 3
        assert "data error" in capsys.readouterr().err

    def test_predict_needs_one_source(self, tmp_path, capsys):
        rc = main(["predict", "--ckpt", "x.pt", "--out", str(tmp_path)])
        assert rc == 2


class TestSynth:
    def test_writes_samples_and_manifest(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path / "data"),
                   "--seed", "3"] + TINY)
        assert rc == 0
        assert "wrote 6 samples" in capsys.readouterr().out
        manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
        assert manifest["seed"] == 3
        roles = sorted(e["role"] for e in manifest["samples"])
        assert roles == ["D", "S", "S", "U", "U", "U"]
        first = tmp_path / "data" / manifest["samples"][0]["path"]
        assert (first / "ldr_2.png").exists()
        assert (first / "exposures.txt").exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> pretrain -> finetune -> iterate, shared by later tests."""
    root = tmp_path_factory.mktemp("pipe")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--seed", "0"] + TINY) == 0

    pre = root / "pre"
    assert main(["pretrain", "--data", str(data),
                 "--run-dir", str(pre)] + TINY) == 0
    pre_ckpt = pre / "ckpt" / "pretrained.pt"
    assert pre_ckpt.exists()

    ft = root / "ft"
    assert main(["finetune", "--data", str(data), "--ckpt", str(pre_ckpt),
                 "--run-dir", str(ft)] + TINY) == 0
    ft_ckpt = ft / "ckpt" / "finetuned.pt"
    assert ft_ckpt.exists()

    it = root / "it"
    assert main(["iterate", "--data", str(data), "--ckpt", str(ft_ckpt),
                 "--run-dir", str(it)] + TINY) == 0
    it_ckpt = it / "ckpt" / "iterated.pt"
    assert it_ckpt.exists()
    return root, data, it_ckpt


class TestPipeline:
    def test_apss_report_written(self, pipeline):
        root, _, _ = pipeline
        rep = json.loads(
            (root / "it" / "apss" / "timestep_0.json").read_text())
        assert {"tau", "beta", "samples", "labeled_losses"} <= rep.keys()

    def test_eval_writes_reports_and_figures(self, pipeline, capsys):
        root, data, ckpt = pipeline
        out = root / "eval"
        rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt),
                   "--out", str(out), "--plot"] + TINY)
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "psnr_mu" in stdout and "mean" in stdout
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["config"]["train"]["seed"] == 0
        assert len(payload["samples"]) == 3
        csv_lines = (out / "metrics.csv").read_text().splitlines()
        assert csv_lines[0].startswith("name,")
        assert len(csv_lines) == 5  # header + 3 samples + mean
        for key in ("psnr_l", "psnr_mu", "ssim_l", "ssim_mu"):
            assert (out / f"{key}.png").stat().st_size > 0

    def test_predict_dataset_roundtrip(self, pipeline):
        root, data, ckpt = pipeline
        out = root / "pred"
        rc = main(["predict", "--data", str(data), "--ckpt", str(ckpt),
                   "--out", str(out), "--format", "pfm"] + TINY)
        assert rc == 0
        preds = sorted(out.glob("*.pfm"))
        assert len(preds) == 6
        img = read_image(preds[0])
        assert img.shape == (32, 32, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_predict_single_sample_hdr(self, pipeline):
        root, data, ckpt = pipeline
        manifest = json.loads((data / "manifest.json").read_text())
        sample_dir = data / manifest["samples"][0]["path"]
        out = root / "pred_one"
        rc = main(["predict", "--sample", str(sample_dir), "--ckpt",
                   str(ckpt), "--out", str(out), "--format", "hdr"] + TINY)
        assert rc == 0
        files = sorted(out.glob("*.hdr"))
        assert len(files) == 1
        img = read_image(files[0])
        assert img.shape == (32, 32, 3)
        assert np.isfinite(img).all()

    def test_run_root_env_fallback(self, pipeline, tmp_path, monkeypatch):
        _, data, ckpt = pipeline
        monkeypatch.setenv("HDRFUSE_RUN_ROOT", str(tmp_path))
        monkeypatch.chdir(tmp_path)
        rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt)] + TINY)
        assert rc == 0
        assert (tmp_path / "eval" / "metrics.json").exists()
