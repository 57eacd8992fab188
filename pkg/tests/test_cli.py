import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import tiny_discriminator, tiny_generator
from percepgen.cli import dispatch, load_config
from percepgen.dataset import sample_counts
from percepgen.imaging import Image, read_png, write_png
from percepgen.model import ModelBundle, save_checkpoint


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def checkpoint(tmp_path):
    return save_checkpoint(ModelBundle.create(tiny_generator(), seed=1), tmp_path / "m.pgck")


@pytest.fixture
def image(tmp_path):
    img = Image(np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8), "u8")
    return write_png(img, tmp_path / "in.png")


def test_infer(capsys, checkpoint, image, tmp_path):
    code, out, _ = run(capsys, "infer", "--checkpoint", checkpoint, "--image", image,
                       "--prompt", "strongly apply chromostereopsis and foveate", "--out", tmp_path / "o.png", "--json")
    assert code == 0
    assert json.loads(out)["prompt"] == "foveate and apply chromostereopsis"
    assert read_png(tmp_path / "o.png").shape == (32, 32, 3)


def test_usage_errors(capsys, checkpoint, image, tmp_path):
    code, _, err = run(capsys, "infer", "--prompt", "sharpen")
    assert code == 1 and "unknown verb 'sharpen'" in err
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "train", "--epochs", "x")[0] == 1
    assert run(capsys, "infer", "--prompt", "denoise")[0] == 1  # missing --image/--out
    code, _, err = run(capsys, "infer", "--checkpoint", tmp_path / "nope.pgck", "--image", image,
                       "--prompt", "denoise", "--out", tmp_path / "o.png")
    assert code == 2 and "error" in err


def test_device_env(capsys, checkpoint, image, tmp_path, monkeypatch):
    monkeypatch.setenv("PGL_DEVICE", "cuda")
    code, _, err = run(capsys, "infer", "--checkpoint", checkpoint, "--image", image,
                       "--prompt", "denoise", "--out", tmp_path / "o.png")
    assert code == 2 and "cpu only" in err


def test_dataset_commands(capsys, tmp_path):
    src = tmp_path / "src"
    assert run(capsys, "dataset", "synth", "--out", src, "--count", 6, "--size", 40)[0] == 0
    code, out, _ = run(capsys, "dataset", "build", "--sources", src, "--out", tmp_path / "ds",
                       "--categories", "ID,F", "--per-category", 4, "--resolution", 32,
                       "--test-fraction", 0.25, "--json")
    assert code == 0 and json.loads(out)["counts"] == {"ID": 4, "F": 4}
    code, out, _ = run(capsys, "dataset", "stats", tmp_path / "ds", "--json")
    assert json.loads(out) == {"ID": 3, "F": 3}
    code, out, _ = run(capsys, "dataset", "split", tmp_path / "ds", "--test-fraction", 0.5, "--json")
    assert json.loads(out) == {"train": 4, "test": 4}


def test_stats_matches_library(capsys, tiny_manifest):
    code, out, _ = run(capsys, "dataset", "stats", tiny_manifest.root, "--phase", 1, "--json")
    assert code == 0
    assert json.loads(out) == {c.name: n for c, n in sample_counts(tiny_manifest, 1).items()}


def test_train_eval_bench(capsys, tiny_manifest, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"generator": tiny_generator().as_dict(),
                               "discriminator": tiny_discriminator().as_dict(),
                               "schedule": {"batch_size": 8, "probe_per_category": 0},
                               "loss": {"lam": 50.0}}))
    monkeypatch.setenv("PGL_RUN_DIR", str(tmp_path / "run"))
    code, out, _ = run(capsys, "train", "--manifest", tiny_manifest.root, "--config", cfg,
                       "--epochs", 2, "--b-max", 2, "--json")
    assert code == 0, out
    saved = json.loads((tmp_path / "run" / "train_config.json").read_text())
    assert saved["loss"]["lam"] == 50.0 and saved["loss"]["b_max"] == 2.0  # file and flag layers
    assert saved["schedule"]["phase1_epochs"] == 1
    header = tmp_path / "run" / "model.pgck"
    assert load_config(cfg)["loss"]["lam"] == 50.0

    code, out, _ = run(capsys, "eval", "--manifest", tiny_manifest.root, "--checkpoint", header,
                       "--categories", "F,F+C", "--json")
    payload = json.loads(out)
    assert code == 0 and list(payload["categories"]) == ["F"] and payload["skipped"] == ["F+C"]
    code, out, _ = run(capsys, "eval", "--manifest", tiny_manifest.root, "--identity")
    assert code == 0 and "PSNR" in out

    code, out, _ = run(capsys, "bench", "--checkpoint", header, "--iters", 2, "--warmup", 0, "--chain", 2, "--json")
    assert code == 0 and json.loads(out)["models"] == 2


def test_bad_config(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert run(capsys, "dataset", "stats", tmp_path, "--config", bad)[0] == 1


def test_console_script(tmp_path):
    res = subprocess.run([sys.executable, "-m", "percepgen.cli", "infer", "--prompt", "sharpen"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "sharpen" in res.stderr
    res = subprocess.run([sys.executable, "-m", "percepgen.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "percepgen" in res.stdout
