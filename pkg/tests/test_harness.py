import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from pmcr.core import Episode, Rng, read_tensor, write_tensor
from pmcr.errors import EmptyScan, InvalidSpec
from pmcr.harness.archive import load_model, save_model
from pmcr.harness.cli import main
from pmcr.harness.config import ABLATIONS, Flags, TrainConfig
from pmcr.harness.evaluate import (
    chunk_bounds,
    chunk_middle,
    dice_score,
    evaluate_model,
    evaluate_volume,
    miou,
    oracle_predictor,
)
from pmcr.harness.model import PMCRModel, run_episode
from pmcr.harness.synthetic import ClassSpec, Dataset, SyntheticTaskSpec, default_task, generate_dataset
from pmcr.harness.train import learning_rate, metrics_csv, sample_episode, train


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(default_task(), Rng(0))


@pytest.fixture(scope="module")
def model():
    return PMCRModel(TrainConfig().hyperparams, [1, 2, 3], seed=0)


# generator

def test_generator_deterministic(tmp_path):
    a = generate_dataset(default_task(), Rng(5), tmp_path / "a")
    generate_dataset(default_task(), Rng(5), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    back = Dataset.load(tmp_path / "a")
    assert [s.name for s in back.scans] == [s.name for s in a.scans]
    np.testing.assert_array_equal(back.scans[0].masks, a.scans[0].masks)


def test_generator_shapes_and_splits(dataset):
    spec = dataset.spec
    assert len(dataset.split("train")) == spec.n_train_scans
    assert len(dataset.split("test")) == spec.n_test_scans
    s = dataset.scans[0]
    assert s.images.shape == (spec.depth, 64, 64, 3) and s.masks.shape == (spec.depth, 64, 64)
    assert set(np.unique(s.masks)) <= {0, 1, 2, 3}
    np.testing.assert_array_equal(s.images[..., 0], s.images[..., 2])


def test_degenerate_spec_translates_fixed_shape():
    spec = SyntheticTaskSpec(
        classes=[ClassSpec(1, "ellipse", scale_range=(0.15, 0.15), aspect_range=(1.0, 1.0), deformation=0.0,
                           rotation_range=(0.0, 0.0), intensity_range=(0.8, 0.8), drift=0.2)],
        base_classes=[1], novel_classes=[], noise=0.0, size_variation=0.0, n_train_scans=1, n_test_scans=0)
    scan = generate_dataset(spec, Rng(1)).scans[0]
    areas = scan.masks.reshape(spec.depth, -1).sum(1)
    assert areas.max() - areas.min() <= 0.03 * areas.mean()
    ys, xs = zip(*(np.argwhere(m).mean(0) for m in scan.masks))
    steps = np.hypot(np.diff(ys), np.diff(xs))
    assert np.all(steps > 0) and steps.max() - steps.min() < 0.5


def test_foreground_fraction_within_scale_range():
    lo, hi = 0.10, 0.16
    spec = SyntheticTaskSpec(
        classes=[ClassSpec(1, "ellipse", scale_range=(lo, hi), deformation=0.0)],
        base_classes=[1], novel_classes=[], depth=1, n_train_scans=100, n_test_scans=0)
    ds = generate_dataset(spec, Rng(2))
    frac = np.array([s.masks[0].mean() for s in ds.scans])
    # ellipse area pi*r^2 regardless of aspect; one-pixel raster slack
    assert np.all(frac >= math.pi * lo ** 2 * 0.9) and np.all(frac <= math.pi * hi ** 2 * 1.1)


def test_invalid_spec():
    with pytest.raises(InvalidSpec):
        SyntheticTaskSpec(classes=[ClassSpec(1)], base_classes=[1], novel_classes=[1]).validate()
    with pytest.raises(InvalidSpec):
        SyntheticTaskSpec(classes=[ClassSpec(1, "square")], base_classes=[1]).validate()


# episodes

def test_sample_episode_different_scans(dataset):
    rng = Rng(3)
    for _ in range(20):
        e = sample_episode(dataset, rng, [1, 2])
        assert e.meta["query"][0] != e.meta["support"][0][0]
        assert e.class_id in (1, 2)
        assert len(e.support_images) == 1


def test_query_equal_support_beats_permuted_control(dataset, model):
    rng = Rng(4)
    flags = Flags()
    wins = 0
    for _ in range(20):
        e = sample_episode(dataset, rng, [1, 2])
        same = Episode([e.query_image], [e.query_mask], e.query_image, e.query_mask, e.class_id)
        perm = np.asarray(e.query_mask).reshape(-1)[rng.permutation(64 * 64)].reshape(64, 64)
        ctrl = Episode([e.query_image], [perm], e.query_image, e.query_mask, e.class_id)
        gt = (np.asarray(e.query_mask) == e.class_id)
        with torch.no_grad():
            d_same = dice_score(run_episode(same, model, flags).pred, gt)
            d_ctrl = dice_score(run_episode(ctrl, model, flags).pred, gt)
        wins += d_same > d_ctrl
    assert wins == 20


def test_losses_finite_on_random_episodes(dataset, model):
    rng = Rng(5)
    for i in range(100):
        e = sample_episode(dataset, rng, [1, 2])
        with torch.no_grad():
            res = run_episode(e, model, ABLATIONS["full"])
        assert all(math.isfinite(float(v)) for v in res.losses.values())
        np.testing.assert_allclose(res.probs.sum(-1), 1.0, atol=1e-9)


def test_baseline_flags_reduce_to_encoder_and_classifier(dataset, model):
    e = sample_episode(dataset, Rng(6), [1, 2])
    with torch.no_grad():
        res = run_episode(e, model, ABLATIONS["baseline"])
    assert float(res.losses["be"]) == 0.0
    assert "transport" not in res.diagnostics and "n_nodes" not in res.diagnostics
    assert float(res.losses["all"]) == pytest.approx(float(res.losses["se"]), rel=1e-15)


def test_full_flags_populate_diagnostics(dataset, model):
    e = sample_episode(dataset, Rng(7), [1, 2])
    with torch.no_grad():
        res = run_episode(e, model, ABLATIONS["full"])
    assert float(res.losses["be"]) > 0.0
    assert res.diagnostics["n_nodes"] >= 1 + model.hp.n_query_descriptors


# training

def test_learning_rate_schedule():
    assert learning_rate(0.001, 2500) == pytest.approx(0.0009025, rel=1e-12)
    assert learning_rate(0.001, 999) == 0.001


def test_zero_steps_archive_equals_init(tmp_path, dataset):
    cfg = TrainConfig(iterations=1, seed=3, output_dir=str(tmp_path / "run"))
    res = train(cfg, dataset=dataset, steps=0)
    fresh = PMCRModel(cfg.hyperparams, [1, 2, 3], seed=3)
    loaded, _, manifest = load_model(tmp_path / "run" / "model")
    assert manifest["iteration"] == 0
    for (k, a), (_, b) in zip(fresh.state_dict().items(), loaded.state_dict().items()):
        np.testing.assert_array_equal(b.numpy(), a.numpy().astype(np.float32).astype(np.float64), err_msg=k)
    for (k, a), (_, b) in zip(fresh.state_dict().items(), res.model.state_dict().items()):
        assert torch.equal(a, b), k


def test_archive_roundtrip_memory(tmp_path, dataset):
    res = train(TrainConfig(iterations=5, seed=1), dataset=dataset)
    save_model(res.model, tmp_path / "m", Flags(True, False, True), iteration=5)
    m, flags, _ = load_model(tmp_path / "m")
    assert flags == Flags(True, False, True)
    assert m.seen_classes == res.model.seen_classes
    for c, buf in res.model.memory.buffers.items():
        assert len(m.memory.buffers[c]) == len(buf)


def test_training_loss_decreases(dataset):
    first, late = [], []
    for seed in range(3):
        rows = train(TrainConfig(iterations=500, seed=seed), dataset=dataset).rows
        first.append(np.mean([r["loss_all"] for r in rows[:20]]))
        late.append(np.mean([r["loss_all"] for r in rows[480:500]]))
    assert np.mean(late) < np.mean(first)


def test_metrics_csv_format():
    row = {"episode": 0, "class_id": 1, "dice": 0.5, "miou": 0.25, "loss_se": 0.1, "loss_be": 0.0,
           "loss_dc": 0.5, "loss_all": 0.6, "iteration": 0, "wall_clock_ms": 0.0}
    text = metrics_csv([row])
    assert text.startswith("episode,class_id,dice,miou,loss_se,loss_be,loss_dc,loss_all,iteration,wall_clock_ms\r\n")
    assert text.endswith("0,1,0.5,0.25,0.1,0.0,0.5,0.6,0,0.0\r\n")


# evaluation protocol

def test_chunks_nine_slices():
    b = chunk_bounds(9, 3)
    assert b == [(0, 3), (3, 6), (6, 9)]
    assert [chunk_middle(x) for x in b] == [1, 4, 7]


def test_chunk_remainder_to_leading_chunks():
    assert [s - a for a, s in chunk_bounds(10, 3)] == [4, 3, 3]
    assert [s - a for a, s in chunk_bounds(11, 3)] == [4, 4, 3]
    with pytest.raises(EmptyScan):
        chunk_bounds(0, 3)


def test_oracle_predictor_dice_one(dataset):
    q, s = dataset.split("test")[1], dataset.split("test")[0]
    r = evaluate_volume(oracle_predictor, q.images, q.masks, s.images, s.masks, 3, 3)
    assert r.dice[3] == 1.0
    assert r.support_slices == [1, 4, 7]


def test_dice_formula_and_symmetry():
    a = np.zeros((2, 2, 2), int)
    b = np.zeros((2, 2, 2), int)
    a[0] = 1
    b[0, 0] = 1
    b[1, 0] = 1
    assert dice_score(a, b) == 0.5 == dice_score(b, a)


def test_miou_cases():
    g = np.array([[1, 1], [0, 0]])
    assert miou(g, g, 2) == 1.0
    assert miou(np.array([[0, 0], [1, 1]]), g, 2) == 0.0
    p = np.array([[1, 0], [0, 0]])
    g1 = np.array([[1, 1], [1, 0]])
    iou1 = 1 / 3
    assert miou(p, g1, 2) == pytest.approx((iou1 + 1 / 3) / 2)
    assert miou(1 - p, 1 - g1, 2) == pytest.approx(miou(p, g1, 2))


def test_iou_one_third_single_class():
    p = np.array([[1, 1], [0, 0]])
    g = np.array([[1, 0], [1, 0]])
    inter = np.logical_and(p == 1, g == 1).sum()
    union = np.logical_or(p == 1, g == 1).sum()
    assert inter / union == pytest.approx(1 / 3)


def test_single_chunk_equals_whole_scan_with_middle_support(dataset, model):
    q, s = dataset.split("test")[1], dataset.split("test")[0]
    calls = []

    def predict(e):
        calls.append(e)
        return (np.asarray(e.query_image)[..., 0] > 0.5).astype(np.uint8)

    r = evaluate_volume(predict, q.images, q.masks, s.images, s.masks, 3, 1)
    mid = (s.depth - 1) // 2
    assert r.support_slices == [mid]
    assert all(np.array_equal(c.support_images[0], s.images[mid]) for c in calls)
    pred = np.stack([predict(Episode([s.images[mid]], [s.masks[mid]], q.images[t], None, 3)) for t in range(q.depth)])
    assert r.dice[3] == dice_score(pred, q.masks == 3)


def test_evaluate_model_report(dataset, model):
    rep = evaluate_model(model, dataset, Flags(), 3)
    assert set(rep["classes"]) == {"3"}
    assert 0.0 <= rep["mean_dice"] <= 1.0


# CLI

def _small_config(path, iterations=3, seed=0, **flags):
    cfg = TrainConfig(iterations=iterations, seed=seed, flags=Flags(**flags) if flags else Flags())
    cfg.task = replace(cfg.task, n_train_scans=3, n_test_scans=2)
    cfg.save(path)
    return cfg


def test_cli_init_config_defaults(tmp_path, capsys):
    assert main(["init-config", "--out", str(tmp_path / "c.json")]) == 0
    hp = json.loads((tmp_path / "c.json").read_text())["hyperparams"]
    assert (hp["n_prototypes"], hp["mu"], hp["lambda1"], hp["lambda2"]) == (16, 0.1, 0.5, 1.0)
    assert (hp["memory_size"], hp["superpixel_size"], hp["max_superpixels"], hp["n_heads"], hp["n_chunks"]) == \
        (5, 80, 10, 1, 3)


def test_cli_gen_train_eval(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "data"), "--seed", "1"]) == 0
    _small_config(tmp_path / "c.json")
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "run"),
                 "--data", str(tmp_path / "data")]) == 0
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert main(["eval", "--model", str(tmp_path / "run"), "--data", str(tmp_path / "data"), "--chunks", "3",
                 "--report", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["chunks"] == 3 and "3" in rep["classes"]


def test_cli_train_deterministic(tmp_path):
    _small_config(tmp_path / "c.json", iterations=4)
    for name in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / name)]) == 0
    for f in ("metrics.csv", "model/manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_cli_ablate_small(tmp_path, capsys):
    _small_config(tmp_path / "c.json", iterations=2)
    assert main(["ablate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "abl"), "--seeds", "0"]) == 0
    summary = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    assert set(summary) == set(ABLATIONS)


def test_cli_demo_sinkhorn(tmp_path, capsys):
    write_tensor(np.zeros((2, 2)), tmp_path / "cost.pmt")
    write_tensor(np.array([0.5, 0.5]), tmp_path / "u.pmt")
    write_tensor(np.array([0.5, 0.5]), tmp_path / "v.pmt")
    assert main(["demo", "sinkhorn", "--cost", str(tmp_path / "cost.pmt"), "--u", str(tmp_path / "u.pmt"),
                 "--v", str(tmp_path / "v.pmt"), "--out", str(tmp_path / "plan.pmt")]) == 0
    out = json.loads(capsys.readouterr().out)
    np.testing.assert_allclose(out["plan"], 0.25, atol=1e-12)
    np.testing.assert_allclose(read_tensor(tmp_path / "plan.pmt"), 0.25)


def test_cli_demo_slic(tmp_path, capsys):
    write_tensor(np.array([[0.0, 0.1, 5.0, 5.1]]), tmp_path / "f.pmt")
    assert main(["demo", "slic", "--features", str(tmp_path / "f.pmt"), "--seeds", "2"]) == 0
    cents = np.array(json.loads(capsys.readouterr().out)["centroids"])
    np.testing.assert_allclose(cents, [[0.05, 5.05]], atol=1e-6)


def test_cli_reports_errors(tmp_path, capsys):
    (tmp_path / "bad.pmt").write_bytes(b"NOPE")
    assert main(["demo", "slic", "--features", str(tmp_path / "bad.pmt"), "--seeds", "1"]) == 2
    assert "MalformedHeader" in capsys.readouterr().err
