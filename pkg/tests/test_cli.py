import json

import numpy as np
import pytest

from gendf.cli import main
from gendf.harness import read_features

SMALL = ["--set", "n_train=16", "--set", "n_eval=16", "--set", "batch_size=8",
         "--set", "steps=2", "--set", "log_every=1", "--set", "num_blocks=1"]


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("GENDF_SEED", raising=False)


def test_gen_data_then_train_then_eval(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--out", str(data), *SMALL]) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["splits"]["train"]["count"] == 16

    assert main(["train", "--out", str(run), "--data", str(data), *SMALL]) == 0
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["split"] for l in lines] == ["train", "train", "eval"]
    assert "trainable parameters" in capsys.readouterr().out

    assert main(["eval", "--model", str(run / "model.bin"), "--data", str(data), "--perturb", "all"]) == 0
    out = capsys.readouterr().out
    recs = [json.loads(l) for l in out.splitlines() if l.startswith("{")]
    assert [r.get("perturbation") for r in recs] == [None, "contrast:1.5", "saturation:2", "pixelate:2", "blur:1"]
    assert all(np.isfinite(r["auc"]) for r in recs)
    assert "d_auc" in out


def test_train_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / name), *SMALL]) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_env_seed(tmp_path, monkeypatch):
    assert main(["train", "--out", str(tmp_path / "a"), *SMALL]) == 0
    monkeypatch.setenv("GENDF_SEED", "11")
    assert main(["train", "--out", str(tmp_path / "b"), *SMALL]) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() != (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert "seed = 11" in (tmp_path / "b" / "config.txt").read_text()


def test_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("dsrl = false\nfsr = false\ncifaug = false\n")
    assert main(["train", "--out", str(tmp_path / "r"), "--config", str(cfg), *SMALL]) == 0
    assert "dsrl = False" in (tmp_path / "r" / "config.txt").read_text()


def test_export_features(tmp_path):
    path = tmp_path / "f.bin"
    assert main(["export-features", "--out", str(path), *SMALL]) == 0
    feats, labels = read_features(path)
    assert feats.shape == (16, 64) and labels.tolist() == [0, 1] * 8


def test_ablate(tmp_path, capsys):
    assert main(["ablate", "--grid", "fsr-vs-linear", "--out", str(tmp_path), *SMALL]) == 0
    rows = [json.loads(l) for l in (tmp_path / "ablate-fsr-vs-linear.jsonl").read_text().splitlines()]
    assert [r["variant"] for r in rows] == ["linear", "fsr"]
    assert "median_auc" in capsys.readouterr().out


def test_gradcheck_small(capsys):
    assert main(["gradcheck", "--set", "embed_dim=16", "--set", "num_heads=2", "--set", "rank=2",
                 "--set", "num_blocks=1"]) == 0
    report = json.loads(capsys.readouterr().out.splitlines()[0])["gradcheck"]
    assert max(report.values()) < 1e-4


@pytest.mark.parametrize("argv,code", [
    (["train", "--set", "rank=99"], 2),
    (["train", "--set", "nonsense=1"], 2),
    (["eval", "--data", "/nonexistent"], 3),
    (["eval", "--perturb", "jpeg"], 2),
])
def test_errors_are_machine_readable(argv, code, capsys, tmp_path):
    assert main(argv + ["--set", "n_eval=8"] if argv[0] == "eval" else argv) == code
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) == {"error", "message"}
