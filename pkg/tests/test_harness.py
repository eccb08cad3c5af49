import json
import os

import numpy as np
import pytest

from opensd.classifiers import default_vocabulary
from opensd.harness.cli import main, sweep_table
from opensd.harness.coco import (
    DatasetError,
    export_dataset,
    id_to_rgb,
    ingest_coco_panoptic,
    load_dataset,
    rgb_to_id,
)
from opensd.harness.config import RunConfig
from opensd.harness.scenes import generate_dataset, generate_scene, tight_bbox
from opensd.harness.train import TrainingDiverged, build_datasets, build_model, train
from opensd.tensor import load_checkpoint

VOCAB = default_vocabulary()

TINY = dict(image_size=16, patch_size=4, embed_dim=8, conv_layers=1, decoder_layers=2, heads=2,
            thing_queries=3, stuff_queries=2, deform_heads=2, deform_points=2, d_text=8,
            n_train=4, n_eval=2, steps=3, batch_size=2)


def tiny_cfg(**kw):
    return RunConfig().replace(**{**TINY, **kw})


def tiny_flags(**kw):
    return [f"--{k.replace('_', '-')}={v}" for k, v in {**TINY, **kw}.items()]


# -- scenes ---------------------------------------------------------------------
def test_scene_without_things():
    scene = generate_scene(VOCAB, np.random.default_rng(0), size=32, n_things=0)
    assert scene.instances(VOCAB) == []
    assert scene.segments and np.all(scene.panoptic > 0)


def test_scene_is_deterministic():
    a = generate_scene(VOCAB, np.random.default_rng(5), size=32)
    b = generate_scene(VOCAB, np.random.default_rng(5), size=32)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.panoptic.tobytes() == b.panoptic.tobytes() and a.segments == b.segments


def test_scene_invariants():
    for scene in generate_dataset(VOCAB, 20, seed=1, size=32):
        assert scene.pixels.shape == (32, 32, 3)
        assert scene.pixels.min() >= 0 and scene.pixels.max() <= 1
        things = scene.instances(VOCAB)
        assert 1 <= len(things) <= 4
        assert 1 <= len(scene.segments) - len(things) <= 2
        for s in scene.segments:
            mask = scene.mask(s.id)
            assert mask.any() and s.area == mask.sum()
            assert tuple(s.bbox) == tuple(tight_bbox(mask))
        sem = scene.semantic_map()
        for s in scene.segments:
            assert np.all(sem[scene.mask(s.id)] == s.category_id)


def test_training_scenes_use_seen_categories_only():
    train_scenes, held = build_datasets(tiny_cfg(n_train=12, n_eval=12), VOCAB)
    seen = set(VOCAB.train_ids)
    assert all(set(s.category_ids()) <= seen for s in train_scenes)
    assert any(set(s.category_ids()) - seen for s in held)


# -- COCO-style datasets ------------------------------------------------------------
def test_rgb_id_round_trip():
    ids = np.array([[0, 1, 255], [256, 65535, 70000]])
    assert np.array_equal(rgb_to_id(id_to_rgb(ids)), ids)


def test_export_ingest_round_trip(tmp_path):
    scenes = generate_dataset(VOCAB, 5, seed=2, size=32)
    export_dataset(scenes, VOCAB, tmp_path)
    back, vocab = load_dataset(tmp_path)
    assert vocab.to_json() == VOCAB.to_json()
    for a, b in zip(scenes, back):
        assert np.array_equal(a.panoptic, b.panoptic)
        assert a.segments == b.segments
        assert a.image_id == b.image_id
        assert np.array_equal(a.pixels, b.pixels)


@pytest.fixture
def dataset(tmp_path):
    export_dataset(generate_dataset(VOCAB, 2, seed=3, size=16), VOCAB, tmp_path)
    return tmp_path


def _edit(root, fn):
    path = root / "annotations.json"
    data = json.loads(path.read_text())
    fn(data)
    path.write_text(json.dumps(data))


def _ingest(root):
    return ingest_coco_panoptic(root / "images", root / "annotations.json", VOCAB)


def test_empty_annotation_list(dataset):
    _edit(dataset, lambda d: d.update(annotations=[]))
    assert _ingest(dataset) == []


@pytest.mark.parametrize("edit, message", [
    (lambda d: d["annotations"][0]["segments_info"].pop(), "not in segments_info"),
    (lambda d: d["annotations"][0]["segments_info"][0].update(category_id=99), "unknown category"),
    (lambda d: d["annotations"][0]["segments_info"][0].update(id=0), "reserved"),
    (lambda d: d["annotations"][0]["segments_info"].append(
        dict(d["annotations"][0]["segments_info"][0])), "duplicate segment"),
    (lambda d: d["annotations"][0]["segments_info"].append(
        {"id": 4242, "category_id": 1, "bbox": [0, 0, 1, 1], "area": 1}), "empty masks"),
    (lambda d: d["images"].append(dict(d["images"][0])), "duplicate image"),
    (lambda d: d["annotations"].append(dict(d["annotations"][0])), "annotated twice"),
    (lambda d: d["annotations"][0].update(image_id=77), "unknown image"),
    (lambda d: d["annotations"][0].pop("segments_info"), "missing field"),
    (lambda d: d["images"][0].update(file_name="nope.ppm"), "missing file"),
])
def test_ingest_errors(dataset, edit, message):
    _edit(dataset, edit)
    with pytest.raises(DatasetError, match=message):
        _ingest(dataset)


def test_ingest_malformed_json(dataset):
    (dataset / "annotations.json").write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        _ingest(dataset)
    with pytest.raises(DatasetError, match="missing file"):
        ingest_coco_panoptic(dataset / "images", dataset / "absent.json", VOCAB)


# -- config -------------------------------------------------------------------------
def test_config_text_round_trip(tmp_path):
    cfg = RunConfig().replace(seed=3, lr=0.01, variant="shared")
    cfg.save(tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg


def test_config_parsing():
    cfg = RunConfig.loads("# comment\nsteps = 10\n\nalpha=0.5  # inline\n")
    assert cfg.steps == 10 and cfg.alpha == 0.5
    with pytest.raises(ValueError, match="unknown config key"):
        RunConfig.loads("nonsense = 1")
    with pytest.raises(ValueError, match="expected"):
        RunConfig.loads("steps 10")


def test_lr_schedule():
    cfg = RunConfig().replace(steps=100, lr=1.0)
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(89) == 1.0
    assert abs(cfg.lr_at(90) - 0.1) < 1e-15 and abs(cfg.lr_at(99) - 0.01) < 1e-15


# -- training -------------------------------------------------------------------------
def test_zero_learning_rate_keeps_parameters():
    cfg = tiny_cfg(lr=0.0)
    scenes, _ = build_datasets(cfg, VOCAB)
    before = build_model(cfg, VOCAB).state_dict()
    after = train(cfg, scenes, VOCAB).model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_step_zero_loss_matches_initial_checkpoint(tmp_path):
    cfg = tiny_cfg(batch_size=1)
    scenes, _ = build_datasets(cfg, VOCAB)
    result = train(cfg, scenes, VOCAB, run_dir=tmp_path)
    model = build_model(cfg, VOCAB)
    model.load_state_dict(load_checkpoint(tmp_path / "initial.osd"))
    first = int(np.random.default_rng([cfg.seed, 1]).permutation(len(scenes))[0])
    assert model.loss(scenes[first]).item() == result.losses[0]
    curve = json.loads((tmp_path / "loss_curve.json").read_text())
    assert curve["loss"] == result.losses and all(np.isfinite(curve["loss"]))
    for name in ("config.txt", "vocab.json", "checkpoint.osd"):
        assert (tmp_path / name).is_file()


def test_huge_learning_rate_aborts():
    cfg = tiny_cfg(lr=1e3, steps=50)
    scenes, _ = build_datasets(cfg, VOCAB)
    with pytest.raises(TrainingDiverged, match="diverged|non-finite"):
        train(cfg, scenes, VOCAB)


def test_training_reduces_loss():
    cfg = tiny_cfg(steps=40, lr=3e-3)
    scenes, _ = build_datasets(cfg, VOCAB)
    losses = train(cfg, scenes, VOCAB).losses
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


# -- CLI --------------------------------------------------------------------------------
def test_cli_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_cli_runtime_error_exits_1(tmp_path, capsys):
    assert main(["eval", "--run-dir", str(tmp_path / "missing")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_oracle_eval(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["eval", "--oracle", "--split", "eval", "--out", str(out)] + tiny_flags()) == 0
    rep = json.loads(out.read_text())
    assert rep["pq"] == rep["miou"] == rep["map_box"] == rep["map_mask"] == 1.0


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "data")] + tiny_flags()) == 0
    assert main(["train", "--run-dir", str(root / "run"), "--data", str(root / "data")]
                + tiny_flags()) == 0
    return root


def test_cli_train_outputs(run_dir):
    for name in ("config.txt", "checkpoint.osd", "loss_curve.json", "train_report.json"):
        assert (run_dir / "run" / name).is_file()
    assert (run_dir / "data" / "eval" / "annotations.json").is_file()


def test_cli_sweep_1x1_equals_eval(run_dir):
    ev, sw = run_dir / "ev.json", run_dir / "sw.json"
    common = ["--run-dir", str(run_dir / "run"), "--data", str(run_dir / "data")]
    assert main(["eval", *common, "--out", str(ev), "--alpha", "0.3", "--beta", "0.6"]) == 0
    assert main(["sweep", *common, "--out", str(sw), "--alphas", "0.3", "--betas", "0.6"]) == 0
    single = json.loads(ev.read_text())
    cell = json.loads(sw.read_text())["results"][0]
    for k, v in cell.items():
        if k not in ("alpha", "beta"):
            assert single[k] == v, k


def test_cli_infer_writes_task_outputs(run_dir):
    out = run_dir / "pred"
    assert main(["infer", "--run-dir", str(run_dir / "run"), "--out", str(out),
                 str(run_dir / "data" / "eval" / "images")]) == 0
    names = sorted(os.listdir(out))
    assert any(n.endswith("_panoptic.pgm") for n in names)
    assert any(n.endswith("_detections.json") for n in names)


def test_cli_eval_reproducible(run_dir):
    a, b = run_dir / "a.json", run_dir / "b.json"
    common = ["eval", "--run-dir", str(run_dir / "run"), "--data", str(run_dir / "data")]
    assert main(common + ["--out", str(a)]) == 0
    assert main(common + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_sweep_table_layout():
    grid = {(a, b): {"pq": a + b} for a in (0.0, 1.0) for b in (0.0, 0.5)}
    lines = sweep_table(grid, [0.0, 1.0], [0.0, 0.5]).splitlines()
    assert len(lines) == 4 and lines[3].split() == ["1.00", "1.0000", "1.5000"]
