import json

import cv2
import numpy as np
import pytest
import yaml

from helpers import OracleDetector
from unsuperpoint.cli import main
from unsuperpoint.config import CONFIG_ENV_VAR, build_config, load_config
from unsuperpoint.evaluation import discover_scenes, read_detections, write_detections
from unsuperpoint.model import load_checkpoint
from unsuperpoint.synthetic import write_corpus
from unsuperpoint.visualize import match_visualize
from unsuperpoint.evaluation import ModelDetector
from unsuperpoint.geometry import Homography, homography_corner_error

TINY = {"backbone_channels": [8, 8, 16, 16, 32, 32, 32, 32], "descriptor_dim": 16,
        "resolution": [48, 64], "batch_size": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_corpus(root / "corpus", 4, seed=1, size=(60, 80))
    (root / "cfg.yaml").write_text(yaml.safe_dump(TINY))
    assert main(["--config", str(root / "cfg.yaml"), "--seed", "3", "train", "--corpus", str(root / "corpus"),
                 "--out", str(root / "run"), "--steps", "2"]) == 0
    return root


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "ckpt_2.pt").exists() and (run / "loss_log.jsonl").exists()
    model, payload = load_checkpoint(run / "ckpt_2.pt")
    assert payload["step"] == 2 and model.config.descriptor_dim == 16
    assert payload["extra"]["train_config"]["seed"] == 3


def test_train_is_seed_reproducible(workspace, tmp_path):
    args = ["--config", str(workspace / "cfg.yaml"), "--seed", "3", "train", "--corpus",
            str(workspace / "corpus"), "--out", str(tmp_path / "again"), "--steps", "2"]
    assert main(args) == 0
    assert (tmp_path / "again" / "loss_log.jsonl").read_bytes() == (workspace / "run" / "loss_log.jsonl").read_bytes()


def test_train_resume(workspace, tmp_path):
    args = ["--config", str(workspace / "cfg.yaml"), "train", "--corpus", str(workspace / "corpus"),
            "--out", str(tmp_path / "r"), "--steps", "3", "--resume", str(workspace / "run" / "ckpt_2.pt")]
    assert main(args) == 0
    assert (tmp_path / "r" / "ckpt_3.pt").exists()


def test_detect_records_and_determinism(workspace, tmp_path):
    ckpt = str(workspace / "run" / "ckpt_2.pt")
    img = str(workspace / "corpus" / "img_0000.png")
    for out in ("a", "b"):
        assert main(["detect", "--checkpoint", ckpt, "--out", str(tmp_path / out), "-n", "300",
                     "--resolution", "240", "320", "--overlay", img]) == 0
    a = (tmp_path / "a" / "img_0000.txt").read_bytes()
    assert a == (tmp_path / "b" / "img_0000.txt").read_bytes()
    assert len(read_detections(tmp_path / "a" / "img_0000.txt")) == 300
    assert cv2.imread(str(tmp_path / "a" / "img_0000_points.png")) is not None


def test_detect_nms_and_binary(workspace, tmp_path):
    ckpt = str(workspace / "run" / "ckpt_2.pt")
    img = str(workspace / "corpus" / "img_0001.png")
    assert main(["detect", "--checkpoint", ckpt, "--out", str(tmp_path), "--nms-radius", "4", "--binary",
                 "--resolution", "240", "320", img]) == 0
    ps = read_detections(tmp_path / "img_0001.bin")
    d = np.abs(ps.positions[:, None] - ps.positions[None]).max(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 4


def test_detect_failures_exit_codes(workspace, tmp_path, capsys):
    ckpt = str(workspace / "run" / "ckpt_2.pt")
    bad = tmp_path / "broken.png"
    bad.write_text("not an image")
    good = str(workspace / "corpus" / "img_0000.png")
    assert main(["detect", "--checkpoint", ckpt, "--out", str(tmp_path / "o"), good, str(bad)]) == 2
    assert "broken.png" in capsys.readouterr().err
    assert main(["detect", "--checkpoint", ckpt, "--out", str(tmp_path / "o"), str(bad)]) == 1


def test_evaluate_with_detections_and_export(tmp_path, oracle_dataset, capsys):
    oracle = OracleDetector(oracle_dataset, (240, 320))
    det = tmp_path / "det"
    for scene in discover_scenes(oracle_dataset)[0]:
        for k in [1] + [t[0] for t in scene.targets]:
            write_detections(det / scene.name / f"{k}.txt", oracle(None, f"{scene.name}/{k}"))
    report = tmp_path / "oracle.json"
    assert main(["evaluate", "--dataset", str(oracle_dataset), "--detections", str(det), "--report", str(report),
                 "--name", "oracle"]) == 0
    data = json.loads(report.read_text())
    assert data["repeatability"] == 1.0 and data["num_pairs"] == 15
    assert report.with_suffix(".txt").exists()
    capsys.readouterr()
    assert main(["export", str(report), str(report), "--out", str(tmp_path / "table.json")]) == 0
    table = capsys.readouterr().out
    assert "oracle" in table and "1.000" in table
    assert len(json.loads((tmp_path / "table.json").read_text())["rows"]) == 2
    data["schema_version"] = 99
    (tmp_path / "old.json").write_text(json.dumps(data))
    assert main(["export", str(report), str(tmp_path / "old.json")]) == 1
    assert "old.json" in capsys.readouterr().err


def test_evaluate_with_checkpoint(workspace, tmp_path, oracle_dataset):
    report = tmp_path / "model.json"
    assert main(["evaluate", "--dataset", str(oracle_dataset), "--checkpoint",
                 str(workspace / "run" / "ckpt_2.pt"), "--report", str(report), "-n", "100"]) == 0
    data = json.loads(report.read_text())
    assert data["num_pairs"] == 15 and 0 <= data["repeatability"] <= 1
    assert all(0 <= v <= 1 for v in data["ha"].values())


def test_diagnose_histograms(workspace, tmp_path):
    assert main(["--config", str(workspace / "cfg.yaml"), "diagnose", "histograms", "--checkpoint",
                 str(workspace / "run" / "ckpt_2.pt"), "--corpus", str(workspace / "corpus"),
                 "--out", str(tmp_path), "--pairs", "2"]) == 0
    assert (tmp_path / "relative_x_hist.png").exists() and (tmp_path / "distances_hist.txt").exists()


def test_diagnose_matches(workspace, tmp_path, oracle_dataset):
    scene = oracle_dataset / "v_synthetic0"
    out = tmp_path / "m.png"
    assert main(["diagnose", "matches", "--checkpoint", str(workspace / "run" / "ckpt_2.pt"),
                 "--ref", str(scene / "1.png"), "--tgt", str(scene / "2.png"),
                 "--homography", str(scene / "H_1_2"), "--out", str(out)]) == 0
    assert cv2.imread(str(out)) is not None


def test_match_visualize_identical_images(workspace):
    model, _ = load_checkpoint(workspace / "run" / "ckpt_2.pt")
    img = np.random.default_rng(0).uniform(0, 1, (240, 320, 3)).astype(np.float32)
    img = cv2.GaussianBlur(img, (0, 0), 2)
    canvas, est = match_visualize(ModelDetector(model), img, img, Homography.identity())
    assert est.success
    assert homography_corner_error(Homography.identity(), est.homography, (240, 320)) < 2
    assert canvas.shape[1] == 640 and canvas.dtype == np.uint8


def test_config_precedence(tmp_path, monkeypatch):
    f = tmp_path / "c.yaml"
    f.write_text("lr: 0.005\nepochs: 3\nalpha_uni_xy: 50\neval_resolution: [120, 160]\n")
    cfg = load_config(f, {"lr": 0.01, "epochs": None})
    assert cfg.train.lr == 0.01 and cfg.train.epochs == 3 and cfg.weights.alpha_uni_xy == 50
    assert cfg.eval.resolution == (120, 160) and cfg.train.resolution == (240, 320)
    monkeypatch.setenv(CONFIG_ENV_VAR, str(f))
    assert load_config().train.epochs == 3
    assert build_config().train.epochs == 10
    with pytest.raises(KeyError):
        build_config({"no_such_key": 1})
    (tmp_path / "nested.yaml").write_text("train:\n  lr: 1\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "nested.yaml")


def test_seed_reaches_eval(tmp_path):
    cfg = build_config({"seed": 9})
    assert cfg.train.seed == 9 and cfg.eval.seed == 9


def test_bad_config_is_usage_error(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("bogus: 1\n")
    with pytest.raises(SystemExit) as exc:
        main(["--config", str(f), "export", str(f)])
    assert exc.value.code == 2


def test_help_mentions_precedence(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    assert "config file" in out and "train" in out and "evaluate" in out
