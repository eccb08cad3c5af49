import numpy as np
import pytest

from opensd.classifiers import default_vocabulary
from opensd.harness.scenes import generate_dataset
from opensd.inference import PanopticSegment, TaskOutputs
from opensd.metrics import (
    Evaluator,
    average_precision,
    interpolated_ap,
    mean_iou,
    panoptic_quality,
    pq_stats,
)

VOCAB = default_vocabulary()


def row(*ids):
    return np.array([ids])


def test_pq_identical_maps():
    m = row(1, 1, 2, 2, 0)
    assert panoptic_quality(m, [(1, 3), (2, 6)], m, [(1, 3), (2, 6)]) == 1.0


def test_pq_single_match_iou_06():
    gt = row(1, 1, 1, 1, 3, 3)
    pred = row(0, 2, 2, 2, 2, 0)  # intersection 3, union 5
    stats = pq_stats(pred, [(2, 1)], gt, [(1, 1), (3, 6)])
    assert abs(stats[1].pq() - 0.6) < 1e-12
    # a lone ground truth with the extra predicted pixel outside it
    assert abs(panoptic_quality(row(0, 2, 2, 2, 2), [(2, 1)], row(1, 1, 1, 1, 3), [(1, 1)])
               - 0.6) < 1e-12


def test_pq_false_negative_only():
    gt = row(1, 1, 0)
    stats = pq_stats(np.zeros_like(gt), [], gt, [(1, 4)])
    assert stats[4].fn == 1 and panoptic_quality(np.zeros_like(gt), [], gt, [(1, 4)]) == 0.0


def test_pq_false_positive_halves():
    gt = row(1, 1, 1, 0, 0, 0)
    pred = row(5, 5, 5, 0, 7, 7)
    # the second prediction lands on void and is ignored; move it onto a stuff region
    gt2 = row(1, 1, 1, 2, 2, 2)
    pred2 = row(5, 5, 5, 0, 7, 0)
    assert panoptic_quality(pred, [(5, 1), (7, 1)], gt, [(1, 1)]) == 1.0
    stats = pq_stats(pred2, [(5, 1), (7, 1)], gt2, [(1, 1), (2, 6)])
    assert stats[1].tp == 1 and stats[1].fp == 1 and abs(stats[1].pq() - 2 / 3) < 1e-12
    assert stats[6].fn == 1


def test_pq_category_mismatch_is_fp_and_fn():
    m = row(1, 1)
    stats = pq_stats(m, [(1, 2)], m, [(1, 3)])
    assert stats[2].fp == 1 and stats[3].fn == 1


def test_pq_relabel_invariance():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, size=(6, 6))
    pred = gt.copy()
    pred[rng.random((6, 6)) < 0.2] = 3
    gts = [(1, 1), (2, 6), (3, 7)]
    preds = [(1, 1), (2, 6), (3, 7)]
    base = panoptic_quality(pred, preds, gt, gts)
    perm = {0: 0, 1: 40, 2: 17, 3: 9}
    relabel = np.vectorize(perm.get)(pred)
    assert panoptic_quality(relabel, [(perm[i], c) for i, c in reversed(preds)], gt, gts) == base


def test_pq_size_mismatch():
    with pytest.raises(ValueError):
        panoptic_quality(np.zeros((2, 2)), [], np.zeros((3, 2)), [])


def test_miou_examples():
    gt = row(1, 1, 1, 1, 2, 2, 2, 2)
    assert mean_iou(gt, gt) == 1.0
    half = row(1, 1, -1, -1, 2, 2, -1, -1)
    assert mean_iou(half, gt) == 0.5
    assert mean_iou(row(3, 3, 3, 3, 4, 4, 4, 4), gt) == 0.0
    with pytest.raises(ValueError):
        mean_iou(row(1), gt)


def test_miou_ignores_void_gt_and_counts_fp_categories():
    gt = row(1, 1, -1, -1)
    assert mean_iou(row(1, 1, 2, 2), gt) == 1.0
    assert mean_iou(row(1, 2, 1, 1), gt) == 0.25  # cat 1: 1/2, cat 2: 0/1


def box(x, y, w=2, h=2):
    return [x, y, w, h]


def test_ap_single_perfect():
    res = average_precision([[(1, 0.9, box(0, 0))]], [[(1, box(0, 0))]])
    assert res["map"] == 1.0 and all(v == 1.0 for v in res["per_threshold"].values())


def test_ap_duplicate_is_fp_but_ap_one():
    res = average_precision([[(1, 0.9, box(0, 0)), (1, 0.8, box(0, 0))]], [[(1, box(0, 0))]])
    assert res["map"] == 1.0


def test_ap_zero_predictions():
    assert average_precision([[]], [[(1, box(0, 0))]])["map"] == 0.0


def test_ap_hand_computed_dip():
    # TP, FP, TP over two ground truths: interpolated precision 1 up to recall 0.5, 2/3 after
    preds = [[(1, 0.9, box(0, 0)), (1, 0.8, box(10, 10)), (1, 0.7, box(5, 5))]]
    gts = [[(1, box(0, 0)), (1, box(5, 5))]]
    res = average_precision(preds, gts, iou_thresholds=[0.5])
    assert abs(res["map"] - 253 / 303) < 1e-12
    assert abs(interpolated_ap(np.array([True, False, True]), 2) - 253 / 303) < 1e-12


def test_ap_two_categories_average():
    preds = [[(1, 0.9, box(0, 0)), (2, 0.5, box(9, 9))]]
    gts = [[(1, box(0, 0)), (2, box(0, 5))]]
    assert average_precision(preds, gts)["map"] == 0.5


def test_ap_masks_and_threshold_sensitivity():
    g = np.zeros((4, 4), bool)
    g[:2, :] = True
    p = np.zeros((4, 4), bool)
    p[:3, :] = True  # IoU 2/3
    res = average_precision([[(1, 0.9, p)]], [[(1, g)]], kind="mask")
    per = res["per_threshold"]
    assert per[0.5] == 1.0 and per[0.65] == 1.0 and per[0.7] == 0.0
    assert abs(res["map"] - 0.4) < 1e-12


def test_ap_order_invariance():
    preds = [(1, 0.9, box(0, 0)), (1, 0.7, box(3, 3)), (1, 0.5, box(7, 7)), (2, 0.6, box(1, 1))]
    gts = [[(1, box(3, 3)), (1, box(7, 7)), (2, box(1, 1))]]
    base = average_precision([preds], gts)["map"]
    rng = np.random.default_rng(5)
    for _ in range(10):
        shuffled = [preds[i] for i in rng.permutation(len(preds))]
        assert average_precision([shuffled], gts)["map"] == base


def test_ap_ties_broken_by_insertion_order():
    tp, fp = (1, 0.5, box(3, 3)), (1, 0.5, box(0, 0))
    gts = [[(1, box(3, 3))]]
    assert average_precision([[tp, fp]], gts)["map"] == 1.0
    assert average_precision([[fp, tp]], gts, iou_thresholds=[0.5])["map"] == 0.5


def noisy_outputs(scene, rng):
    things = scene.instances(VOCAB)
    pan = scene.panoptic.copy()
    pan[rng.random(pan.shape) < 0.05] = 0
    segs = [PanopticSegment(s.id, s.category_id, VOCAB[s.category_id].isthing, 0.9,
                            int((pan == s.id).sum())) for s in scene.segments]
    sem = scene.semantic_map()
    sem[rng.random(sem.shape) < 0.05] = 1
    inst = [(s.category_id, float(rng.random()), pan == s.id) for s in things]
    det = [(s.category_id, float(rng.random()), [v + rng.integers(0, 3) for v in s.bbox])
           for s in things]
    return TaskOutputs(pan, segs, sem, inst, det)


def test_evaluator_merge_associative_and_order_free():
    scenes = generate_dataset(VOCAB, 6, seed=1, size=32)
    rng = np.random.default_rng(2)
    outs = [noisy_outputs(s, rng) for s in scenes]

    def ev(idx):
        e = Evaluator(VOCAB)
        for i in idx:
            e.add(outs[i], scenes[i])
        return e

    whole = ev(range(6)).report()
    left = ev([0, 1]).merge(ev([2, 3])).merge(ev([4, 5])).report()
    right = ev([0, 1]).merge(ev([2, 3]).merge(ev([4, 5]))).report()
    assert whole.pq == left.pq == right.pq
    assert whole.miou == left.miou == right.miou
    assert whole.map_mask == left.map_mask == right.map_mask
    assert whole.map_box == left.map_box == right.map_box
    for k, v in whole.headline().items():
        assert 0.0 <= v <= 1.0, k


def test_report_json_and_table():
    scenes = generate_dataset(VOCAB, 2, seed=3, size=32)
    rng = np.random.default_rng(4)
    e = Evaluator(VOCAB)
    for s in scenes:
        e.add(noisy_outputs(s, rng), s)
    rep = e.report()
    assert '"pq"' in rep.dumps()
    table = rep.to_table()
    assert table.splitlines()[0].startswith("metric") and "map_box_50" in table


def test_self_eval_is_perfect():
    from opensd.metrics import evaluate, ground_truth_outputs

    scenes = generate_dataset(VOCAB, 4, seed=6, size=32)
    rep = evaluate([ground_truth_outputs(s, VOCAB) for s in scenes], scenes, VOCAB)
    assert all(v == 1.0 for v in rep.headline().values())
