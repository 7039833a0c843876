import math

import cv2
import numpy as np
import pytest
import torch

from unsuperpoint.geometry import HomographyParams
from unsuperpoint.model import ModelConfig
from unsuperpoint.siamese import PhotometricParams
from unsuperpoint.synthetic import random_image, write_corpus
from unsuperpoint.training import (Trainer, TrainConfig, TrainingError, boundary_mass, collect_diagnostics,
                                   emit_diagnostics, fit_to_resolution, histogram, list_images, load_image,
                                   normalize_image, read_loss_log)

RES = (48, 64)


def small_images(n, seed=0, size=RES):
    rng = np.random.default_rng(seed)
    return [random_image(rng, size) for _ in range(n)]


def tiny_trainer(tiny_model_config, images, **kw):
    cfg = TrainConfig(resolution=RES, batch_size=kw.pop("batch_size", 2), **kw)
    return Trainer(cfg, tiny_model_config, images=images)


def test_normalize_examples():
    assert np.all(normalize_image(np.full((2, 2, 3), 0.5)) == 0)
    assert normalize_image(np.ones((1, 1, 3)))[0, 0, 0] == pytest.approx(0.1125)
    assert normalize_image(np.zeros((1, 1, 3)))[0, 0, 0] == pytest.approx(-0.1125)
    assert normalize_image(np.ones((1, 1, 3)), "divide")[0, 0, 0] == pytest.approx(0.5 / 0.225)
    with pytest.raises(ValueError):
        normalize_image(np.ones((1, 1, 3)), "other")


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.resolution, cfg.lr, cfg.betas) == (10, 5, (240, 320), 1e-3, (0.9, 0.999))
    with pytest.raises(ValueError):
        TrainConfig(resolution=(100, 160))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_corpus_discovery_and_loading(tmp_path):
    write_corpus(tmp_path / "a", 3, size=(60, 90))
    (tmp_path / "a" / "nested").mkdir()
    cv2.imwrite(str(tmp_path / "a" / "nested" / "x.jpg"), np.zeros((30, 30, 3), np.uint8))
    (tmp_path / "a" / "notes.txt").write_text("skip me")
    paths = list_images(tmp_path / "a")
    assert len(paths) == 4 and all(p.suffix != ".txt" for p in paths)
    img = load_image(paths[0], (48, 64))
    assert img.shape == (48, 64, 3) and img.dtype == np.float32 and 0 <= img.min() and img.max() <= 1
    with pytest.raises(OSError):
        load_image(tmp_path / "a" / "notes.txt")


def test_fit_to_resolution_crops_center():
    img = np.zeros((100, 200, 3), np.float32)
    img[:, 50:150] = 1
    out = fit_to_resolution(img, (100, 100))
    assert out.shape == (100, 100, 3) and np.all(out == 1)


def test_epoch_shuffles_differ(tiny_model_config):
    t = tiny_trainer(tiny_model_config, small_images(10))
    perms = [t.epoch_permutation(e) for e in range(3)]
    assert sorted(perms[0].tolist()) == list(range(10))
    assert not np.array_equal(perms[0], perms[1]) and not np.array_equal(perms[1], perms[2])
    np.testing.assert_array_equal(perms[0], t.epoch_permutation(0))
    seen = np.concatenate([t.batch_indices(s) for s in range(t.steps_per_epoch)])
    assert sorted(seen.tolist()) == list(range(10))


def test_step_changes_weights(tiny_model_config):
    t = tiny_trainer(tiny_model_config, small_images(2))
    before = [p.detach().clone() for p in t.model.parameters()]
    bd = t.train_step()
    assert t.step == 1 and math.isfinite(bd.as_dict()["total"])
    changed = [not torch.equal(b, p) for b, p in zip(before, t.model.parameters())]
    assert all(changed)


def test_zero_loss_leaves_weights(tiny_model_config):
    from unsuperpoint.losses import LossWeights

    zero = LossWeights(alpha_usp=0, alpha_uni_xy=0, alpha_desc=0, alpha_decorr=0)
    t = Trainer(TrainConfig(resolution=RES, batch_size=2), tiny_model_config, zero, images=small_images(2))
    before = [p.detach().clone() for p in t.model.parameters()]
    t.train_step()
    assert all(torch.equal(b, p) for b, p in zip(before, t.model.parameters()))


def test_identity_pipeline_self_matches(tiny_model_config):
    t = tiny_trainer(tiny_model_config, small_images(2), homography=HomographyParams.identity(),
                     photometric=PhotometricParams.none())
    bd = t.train_step()
    assert bd.as_dict()["position_term"] == 0
    assert bd.num_pairs == 2 * (RES[0] // 8) * (RES[1] // 8)


def test_short_overfit(tiny_model_config):
    t = tiny_trainer(tiny_model_config, small_images(10), batch_size=5, max_steps=200)
    hist = t.fit()
    first = np.mean([r["total"] for r in hist[:10]])
    assert hist[-1]["total"] < first


def test_non_finite_loss_aborts(tiny_model_config):
    t = tiny_trainer(tiny_model_config, small_images(2))
    with torch.no_grad():
        t.model.score_head[-1].bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="step 0"):
        t.train_step()


def test_empty_corpus(tiny_model_config):
    with pytest.raises(TrainingError):
        tiny_trainer(tiny_model_config, []).fit()


def test_fit_writes_artifacts(tmp_path, tiny_model_config):
    t = tiny_trainer(tiny_model_config, small_images(4), max_steps=4, checkpoint_every=2)
    t.fit(tmp_path)
    log = read_loss_log(tmp_path / "loss_log.jsonl")
    assert [r["step"] for r in log] == [1, 2, 3, 4]
    assert {"total", "usp", "uni_xy", "desc", "decorr", "num_pairs"} <= set(log[0])
    assert (tmp_path / "ckpt_2.pt").exists() and (tmp_path / "ckpt_4.pt").exists()
    for name in ("distances", "scores", "relative_x", "relative_y"):
        assert (tmp_path / "diagnostics" / f"{name}_hist.txt").exists()
        assert (tmp_path / "diagnostics" / f"{name}_hist.png").exists()


def test_resume_matches_uninterrupted(tmp_path, tiny_model_config):
    imgs = small_images(4)
    full = tiny_trainer(tiny_model_config, imgs, max_steps=6).fit()
    first = tiny_trainer(tiny_model_config, imgs, max_steps=6)
    first.fit(steps=3)
    first.save(tmp_path / "mid.pt")
    resumed = tiny_trainer(tiny_model_config, imgs, max_steps=6)
    resumed.load(tmp_path / "mid.pt")
    rest = resumed.fit()
    assert [r["step"] for r in rest] == [4, 5, 6]
    for a, b in zip(full[3:], rest):
        assert abs(a["total"] - b["total"]) <= 1e-5 * max(1.0, abs(a["total"]))


def test_histogram_counts_and_boundary_mass(tmp_path):
    values = np.random.default_rng(0).uniform(0, 1, 1000)
    counts, edges = histogram(values)
    assert counts.sum() == 1000 and len(counts) == 20
    assert boundary_mass(np.array([0.0, 0.01, 0.5, 0.99])) == 0.75
    assert boundary_mass(np.full(10, 0.5)) == 0
    files = emit_diagnostics({"relative_x": values}, tmp_path)
    rows = [ln.split() for ln in (tmp_path / "relative_x_hist.txt").read_text().splitlines() if not ln.startswith("#")]
    assert sum(int(r[2]) for r in rows) == 1000
    assert cv2.imread(str(tmp_path / "relative_x_hist.png")) is not None and len(files) == 2


def test_collect_diagnostics_shapes(tiny_model_config):
    from unsuperpoint.model import UnsuperPoint

    model = UnsuperPoint(tiny_model_config)
    imgs = small_images(3)
    s = collect_diagnostics(model, imgs, HomographyParams(), PhotometricParams(), [[1, i] for i in range(3)])
    m = (RES[0] // 8) * (RES[1] // 8)
    assert s["relative_x"].size == 3 * 2 * m and s["scores"].size == 3 * 2 * m
    assert model.training
