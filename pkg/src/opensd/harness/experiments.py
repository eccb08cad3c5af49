"""Synthetic experiments: unseen-category recognition and paired decoder ablations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..classifiers import STUFF, THING
from ..inference import IN_VOCAB_ONLY, EnsembleParams, predict_branches
from ..matching import hungarian, panoptic_ground_truth, split_ground_truth
from ..metrics import mask_iou
from .train import build_datasets, build_vocabulary, evaluate_model, train


@dataclass
class RecognitionResult:
    correct: int = 0
    total: int = 0
    chance: float = 0.0  # expected accuracy of a uniform guess over the same segments
    per_category: dict = field(default_factory=dict)  # id -> [correct, total]

    @property
    def accuracy(self):
        return self.correct / self.total if self.total else float("nan")


def _branch_targets(scene, vocab, branch):
    things, stuff = split_ground_truth(scene, vocab)
    if branch == THING:
        return things, True
    if branch == STUFF:
        return stuff, False
    return panoptic_ground_truth(scene, vocab), None


def unseen_recognition(model, scenes, params, iou_threshold=0.5, mask_threshold=0.5):
    """Top-1 accuracy on ground-truth segments of unseen categories.

    Each branch's binary masks are matched one-to-one to that branch's targets by
    maximum IoU; an unseen segment counts when its match reaches ``iou_threshold``
    and is scored over every category the branch knows. Thing segments are judged
    on the thing branch, stuff segments on the stuff branch.
    """
    vocab = model.vocab
    use_out = params.alpha > 0 or params.beta > 0
    res = RecognitionResult()
    for scene in scenes:
        preds = predict_branches(model, scene.pixels, params, use_out)
        for branch, pred in preds.items():
            gt, want_thing = _branch_targets(scene, vocab, branch)
            if not len(gt):
                continue
            ious = mask_iou(pred.mask_probs > mask_threshold, gt.masks())
            for q, g in hungarian(-ious).pairs:
                cat = gt.entries[g].category_id
                if vocab.is_seen(cat) or ious[q, g] < iou_threshold:
                    continue
                if want_thing is not None and vocab[cat].isthing != want_thing:
                    continue
                hit = pred.cat_ids[int(np.argmax(pred.scores[q]))] == cat
                res.correct += int(hit)
                res.total += 1
                res.chance += 1.0 / len(pred.cat_ids)
                tally = res.per_category.setdefault(cat, [0, 0])
                tally[0] += int(hit)
                tally[1] += 1
    if res.total:
        res.chance /= res.total
    return res


def open_vocab_check(model, scenes, alpha=0.2):
    """Recognition of unseen categories with the out-of-vocabulary term on (beta=1) and off."""
    return {
        "out_vocab": unseen_recognition(model, scenes, EnsembleParams(alpha, 1.0)),
        "in_vocab": unseen_recognition(model, scenes, IN_VOCAB_ONLY),
    }


def paired_ablation(cfg, seeds=(0, 1, 2), variants=("decoupled", "shared")):
    """Train every variant on the same data and budget per seed; training-split reports."""
    vocab = build_vocabulary(cfg)
    out = {}
    for seed in seeds:
        for variant in variants:
            run = cfg.replace(seed=seed, variant=variant)
            scenes, _ = build_datasets(run, vocab)
            result = train(run, scenes, vocab)
            report = evaluate_model(result.model, scenes, IN_VOCAB_ONLY,
                                    score_threshold=run.score_threshold,
                                    overlap_threshold=run.overlap_threshold,
                                    categories=vocab.train_ids)
            out[(seed, variant)] = report
    return out
