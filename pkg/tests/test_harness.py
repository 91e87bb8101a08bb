import json
import os

import numpy as np
import pytest
import torch

import bifit.harness as harness
from bifit.checkpoint import load_checkpoint
from bifit.data import (expression_text, generate_clip, make_scene,
                        read_dataset, write_ppm)
from bifit.errors import CheckpointError, DatasetIOError, NumericError
from bifit.harness import (ClipStore, LOSS_CSV_HEADER, aggregate_clip_metrics,
                           bench, clip_training_loss, ensure_dataset, evaluate,
                           infer, newest_checkpoint, train, upsample_logits)
from bifit.model import build_model

from conftest import tiny_config


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clips")
    cfg = tiny_config()
    cfg.paths.data_root = str(root)
    return cfg, ensure_dataset(cfg)


def test_ensure_dataset_builds_both_splits(dataset):
    cfg, (train_dir, val_dir) = dataset
    assert len(read_dataset(train_dir)) == cfg.data.train_clips
    assert len(read_dataset(val_dir)) == cfg.data.val_clips


def test_ensure_dataset_reuses_existing(dataset):
    cfg, (train_dir, val_dir) = dataset
    manifest = os.path.join(train_dir, "manifest.jsonl")
    before = os.path.getmtime(manifest)
    assert ensure_dataset(cfg) == (train_dir, val_dir)
    assert os.path.getmtime(manifest) == before


def test_upsample_logits_shape_and_constant_field():
    x = torch.full((2, 3, 4, 4), 1.5)
    up = upsample_logits(x, (16, 16))
    assert up.shape == (2, 3, 16, 16)
    assert torch.allclose(up, torch.full_like(up, 1.5))


def test_train_writes_artifacts(dataset, tmp_path):
    cfg, (train_dir, _) = dataset
    cfg = cfg.copy()
    cfg.optim.steps = 4
    out = str(tmp_path / "run")
    result = train(cfg, train_dir, out)
    assert os.path.isfile(result["checkpoint"])
    assert result["checkpoint"].endswith("checkpoint_4.bin")
    lines = open(os.path.join(out, "loss.csv")).read().splitlines()
    assert lines[0] == LOSS_CSV_HEADER
    assert len(lines) == 1 + 4
    first = lines[1].split(",")
    assert first[0] == "1"
    assert len(first) == len(LOSS_CSV_HEADER.split(","))
    assert np.isfinite(float(first[2]))
    assert len(result["history"]) == 4


def test_loss_decreases_when_overfitting(dataset, tmp_path):
    cfg, (train_dir, _) = dataset
    cfg = cfg.copy()
    cfg.optim.steps = 400
    cfg.optim.lr = 1e-3
    result = train(cfg, train_dir, str(tmp_path / "overfit"))
    losses = [float(r.split(",")[2]) for r in result["history"]]
    early = np.mean(losses[:20])
    late = np.mean(losses[-20:])
    assert late < 0.6 * early, f"no progress: first20 {early:.3f} last20 {late:.3f}"


def test_resume_reproduces_uninterrupted_run(dataset, tmp_path):
    cfg, (train_dir, _) = dataset
    cfg = cfg.copy()
    cfg.optim.steps = 12
    cfg.run.checkpoint_every = 6
    full = train(cfg, train_dir, str(tmp_path / "full"))
    resumed = train(cfg, train_dir, str(tmp_path / "resumed"),
                    resume=str(tmp_path / "full" / "checkpoint_6.bin"))
    assert [r.split(",")[0] for r in resumed["history"]][0] == "7"
    _, _, tensors_a, _ = load_checkpoint(full["checkpoint"])
    _, _, tensors_b, _ = load_checkpoint(resumed["checkpoint"])
    assert set(tensors_a) == set(tensors_b)
    for name in tensors_a:
        assert torch.equal(tensors_a[name], tensors_b[name]), name
    rows = open(os.path.join(str(tmp_path / "resumed"), "loss.csv")).read().splitlines()
    assert rows[1:] == full["history"][6:]


def test_train_rejects_empty_dataset(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "manifest.jsonl").write_text("")
    cfg = tiny_config()
    with pytest.raises(DatasetIOError, match="no clips"):
        train(cfg, str(empty), str(tmp_path / "out"))


def test_train_aborts_on_nonfinite_loss(dataset, tmp_path, monkeypatch):
    cfg, (train_dir, _) = dataset
    cfg = cfg.copy()
    cfg.optim.steps = 3

    def bad_loss(*args, **kwargs):
        return torch.tensor(float("nan"), requires_grad=True), {}

    monkeypatch.setattr(harness, "training_loss", bad_loss)
    with pytest.raises(NumericError, match="non-finite loss at step 1"):
        train(cfg, train_dir, str(tmp_path / "nan"))


def test_aux_losses_sum_over_layers(dataset):
    cfg, (train_dir, _) = dataset
    store = ClipStore(read_dataset(train_dir), torch.float32)
    model = build_model(cfg, seed=0)
    with_aux, _ = clip_training_loss(model, store, 0, cfg)
    cfg2 = cfg.copy()
    cfg2.loss.aux_losses = False
    final_only, _ = clip_training_loss(model, store, 0, cfg2)
    assert float(with_aux.detach()) > float(final_only.detach()) > 0


def test_perfect_predictions_score_one(dataset):
    cfg, (train_dir, _) = dataset
    store = ClipStore(read_dataset(train_dir), torch.float32)
    pairs = [(np.stack(store.masks[i]).astype(bool), store.masks[i])
             for i in range(len(store))]
    report = aggregate_clip_metrics(pairs)
    assert report.j == 1.0
    assert report.f == 1.0
    assert report.jf == 1.0


def test_evaluate_writes_reports(dataset, tmp_path):
    cfg, (train_dir, val_dir) = dataset
    cfg = cfg.copy()
    cfg.optim.steps = 2
    result = train(cfg, train_dir, str(tmp_path / "run"))
    out = str(tmp_path / "eval")
    report = evaluate(result["checkpoint"], val_dir, out)
    assert 0.0 <= report.jf <= 1.0
    blob = json.load(open(os.path.join(out, "metrics.json")))
    assert blob["J&F"] == pytest.approx(report.jf)
    lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert len(lines) == 2
    assert len(lines[0].split(",")) == len(lines[1].split(","))


def test_infer_writes_masks_and_result(dataset, tmp_path):
    cfg, (train_dir, _) = dataset
    cfg = cfg.copy()
    cfg.optim.steps = 2
    result = train(cfg, train_dir, str(tmp_path / "run"))

    scene = make_scene(41, cfg.data)
    video, *_ = generate_clip(scene, cfg.data.frames, cfg.data.height, cfg.data.width)
    clip_dir = tmp_path / "clip"
    clip_dir.mkdir()
    for t in range(video.shape[0]):
        write_ppm(str(clip_dir / f"frame_{t:03d}.ppm"), video[t])

    out = str(tmp_path / "pred")
    phrase = expression_text(scene)
    record = infer(result["checkpoint"], str(clip_dir), phrase, out)
    assert record["frames"] == cfg.data.frames
    assert 0.0 <= record["score"] <= 1.0
    for t in range(cfg.data.frames):
        assert os.path.isfile(os.path.join(out, f"mask_{t:03d}.pbm"))
    saved = json.load(open(os.path.join(out, "result.json")))
    assert saved["expression"] == phrase
    assert all(0.0 <= v <= 1.0 for box in saved["boxes"] for v in box)


def test_infer_requires_frames(dataset, tmp_path):
    cfg, (train_dir, _) = dataset
    cfg = cfg.copy()
    cfg.optim.steps = 1
    result = train(cfg, train_dir, str(tmp_path / "run"))
    empty = tmp_path / "noframes"
    empty.mkdir()
    with pytest.raises(Exception, match="frame_"):
        infer(result["checkpoint"], str(empty), "the red square", str(tmp_path / "o"))


def test_newest_checkpoint_orders_numerically(tmp_path):
    for step in (2, 10, 9):
        (tmp_path / f"checkpoint_{step}.bin").write_bytes(b"")
    assert newest_checkpoint(str(tmp_path)).endswith("checkpoint_10.bin")
    with pytest.raises(CheckpointError, match="no checkpoint"):
        newest_checkpoint(str(tmp_path / "nowhere"))


def test_bench_fit_recovers_two_term_model(tmp_path):
    cfg = tiny_config()
    out = str(tmp_path / "bench")
    result = bench(cfg, out, frame_range=(2, 4, 8), channel_range=(16, 32),
                   queries=3, repeats=1)
    assert result["a"] == pytest.approx(12.0, rel=1e-6)
    assert result["b"] == pytest.approx(2.0, rel=1e-6)
    assert result["max_rel_err"] < 1e-9
    lines = open(os.path.join(out, "bench.csv")).read().splitlines()
    assert lines[0] == "frames,queries,channels,flops,seconds,fitted_flops"
    assert len(lines) == 1 + 3 * 2
    fit = json.load(open(os.path.join(out, "bench_fit.json")))
    assert fit["a"] == pytest.approx(12.0, rel=1e-6)
