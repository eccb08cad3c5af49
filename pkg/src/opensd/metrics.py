"""Panoptic quality, mean IoU and COCO-style average precision."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


# -- panoptic quality ---------------------------------------------------------
@dataclass
class PQStat:
    iou: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other):
        self.iou += other.iou
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def pq(self):
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou / denom if denom else 0.0

    def sq(self):
        return self.iou / self.tp if self.tp else 0.0

    def rq(self):
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0


def pq_stats(pred_map, pred_segments, gt_map, gt_segments, void=0):
    """Per-category PQ statistics for one image.

    Segments are ``(id, category_id)`` pairs (or objects with those
    attributes). A prediction and a ground truth of the same category match
    when IoU > 0.5. Predictions lying mostly (> 50%) on void ground truth are
    neither TP nor FP, as in the COCO panoptic evaluator.
    """
    pred_map = np.asarray(pred_map)
    gt_map = np.asarray(gt_map)
    if pred_map.shape != gt_map.shape:
        raise ValueError(f"panoptic maps differ in size: {pred_map.shape} vs {gt_map.shape}")
    pred_cat = dict(_pairs(pred_segments))
    gt_cat = dict(_pairs(gt_segments))
    pred_area = {i: int((pred_map == i).sum()) for i in pred_cat}
    gt_area = {i: int((gt_map == i).sum()) for i in gt_cat}
    joint = defaultdict(int)
    ids, counts = np.unique(np.stack([gt_map.ravel(), pred_map.ravel()], 1), axis=0,
                            return_counts=True)
    for (g, p), n in zip(ids.tolist(), counts.tolist()):
        joint[(g, p)] = n

    stats = defaultdict(PQStat)
    gt_matched, pred_matched = set(), set()
    for (g, p), inter in joint.items():
        if g not in gt_cat or p not in pred_cat or gt_cat[g] != pred_cat[p]:
            continue
        union = pred_area[p] + gt_area[g] - inter - joint.get((void, p), 0)
        iou = inter / union
        if iou > 0.5:
            if g in gt_matched or p in pred_matched:
                raise AssertionError("IoU > 0.5 matching produced a non-unique match")
            stats[gt_cat[g]].tp += 1
            stats[gt_cat[g]].iou += iou
            gt_matched.add(g)
            pred_matched.add(p)
    for g, c in gt_cat.items():
        if g not in gt_matched and gt_area[g] > 0:
            stats[c].fn += 1
    for p, c in pred_cat.items():
        if p in pred_matched or pred_area[p] == 0:
            continue
        if joint.get((void, p), 0) / pred_area[p] > 0.5:
            continue
        stats[c].fp += 1
    return dict(stats)


def _pairs(segments):
    for s in segments:
        if isinstance(s, tuple):
            yield int(s[0]), int(s[1])
        else:
            yield int(s.id), int(s.category_id)


def pq_summary(stats, isthing):
    """Average PQ over categories with any TP/FP/FN; ``isthing`` maps category -> bool."""
    def avg(cats):
        vals = [(stats[c].pq(), stats[c].sq(), stats[c].rq()) for c in cats]
        if not vals:
            return 0.0, 0.0, 0.0
        return tuple(float(np.mean(v)) for v in zip(*vals))

    present = [c for c, s in stats.items() if s.tp + s.fp + s.fn > 0]
    return {
        "all": avg(present),
        "things": avg([c for c in present if isthing(c)]),
        "stuff": avg([c for c in present if not isthing(c)]),
    }


def panoptic_quality(pred_map, pred_segments, gt_map, gt_segments, void=0):
    """PQ of a single image averaged over the categories it involves."""
    stats = pq_stats(pred_map, pred_segments, gt_map, gt_segments, void)
    present = [s for s in stats.values() if s.tp + s.fp + s.fn > 0]
    return float(np.mean([s.pq() for s in present])) if present else 0.0


# -- mean IoU -------------------------------------------------------------------
def iou_counts(pred, gt, void=-1):
    """Per-category (intersection, union) pixel counts, ignoring void ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"semantic maps differ in size: {pred.shape} vs {gt.shape}")
    valid = gt != void
    p, g = pred[valid], gt[valid]
    out = {}
    for c in np.union1d(np.unique(p), np.unique(g)).tolist():
        if c == void:
            continue
        inter = int(((p == c) & (g == c)).sum())
        union = int(((p == c) | (g == c)).sum())
        out[c] = (inter, union)
    return out


def mean_iou(pred, gt, ncat=None, void=-1):
    """Mean IoU over categories present in prediction or ground truth.

    ``ncat``, when given, restricts evaluation to category ids below it.
    """
    counts = iou_counts(pred, gt, void)
    if ncat is not None:
        counts = {c: v for c, v in counts.items() if 0 <= c < ncat}
    return _miou(counts)


def _miou(counts):
    ious = [i / u for i, u in counts.values() if u > 0]
    return float(np.mean(ious)) if ious else 0.0


# -- average precision ----------------------------------------------------------
def box_iou(a, b):
    """IoU matrix between COCO ``[x, y, w, h]`` boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(a[:, None, 0], b[None, :, 0]),
                 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(a[:, None, 1], b[None, :, 1]),
                 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool).reshape(len(a), -1).astype(np.float64)
    b = np.asarray(b, dtype=bool).reshape(len(b), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _match_image(ious, thresholds):
    """Greedy matching of score-sorted predictions: ``tp[t, p]`` booleans."""
    n_pred, n_gt = ious.shape
    tp = np.zeros((len(thresholds), n_pred), dtype=bool)
    for ti, t in enumerate(thresholds):
        taken = np.zeros(n_gt, dtype=bool)
        for p in range(n_pred):
            best, best_iou = -1, min(t, 1 - 1e-10)
            for g in range(n_gt):
                if taken[g] or ious[p, g] < best_iou:
                    continue
                best, best_iou = g, ious[p, g]
            if best >= 0:
                taken[best] = True
                tp[ti, p] = True
    return tp


def interpolated_ap(tp, n_gt):
    """101-point interpolated AP from score-ordered TP flags."""
    if n_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    ok = idx < len(precision)
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def average_precision(preds, gts, iou_thresholds=IOU_THRESHOLDS, kind="box"):
    """COCO-style mAP.

    ``preds`` and ``gts`` are per-image lists; each prediction is
    ``(category_id, score, region)`` and each ground truth ``(category_id, region)``
    where a region is a ``[x, y, w, h]`` box or a boolean mask. Returns
    ``{"map": ..., "per_threshold": {t: ...}, "per_category": {c: ...}}`` averaged
    over categories that have at least one ground truth.
    """
    iou_fn = box_iou if kind == "box" else mask_iou
    thresholds = np.atleast_1d(np.asarray(iou_thresholds, dtype=np.float64))
    cats = sorted({c for img in gts for c, _ in img})
    per_cat = {}
    per_thr = np.zeros((len(cats), len(thresholds)))
    for ci, cat in enumerate(cats):
        scores, flags = [], []
        n_gt = 0
        for img_preds, img_gts in zip(preds, gts):
            g_regions = [r for c, r in img_gts if c == cat]
            p_items = [(s, r) for c, s, r in img_preds if c == cat]
            order = sorted(range(len(p_items)), key=lambda i: -p_items[i][0])
            p_items = [p_items[i] for i in order]
            n_gt += len(g_regions)
            if not p_items:
                continue
            if g_regions:
                ious = iou_fn([r for _, r in p_items], g_regions)
                tp = _match_image(ious, thresholds)
            else:
                tp = np.zeros((len(thresholds), len(p_items)), dtype=bool)
            scores.extend(s for s, _ in p_items)
            flags.append(tp)
        if flags:
            all_tp = np.concatenate(flags, axis=1)
            order = np.argsort(-np.asarray(scores), kind="mergesort")
            all_tp = all_tp[:, order]
        else:
            all_tp = np.zeros((len(thresholds), 0), dtype=bool)
        for ti in range(len(thresholds)):
            per_thr[ci, ti] = interpolated_ap(all_tp[ti], n_gt)
        per_cat[cat] = float(per_thr[ci].mean())
    if not cats:
        return {"map": 0.0, "per_threshold": {float(t): 0.0 for t in thresholds},
                "per_category": {}}
    return {
        "map": float(per_thr.mean()),
        "per_threshold": {float(t): float(per_thr[:, i].mean()) for i, t in enumerate(thresholds)},
        "per_category": per_cat,
    }


# -- report -------------------------------------------------------------------
@dataclass
class EvalReport:
    pq: float = 0.0
    pq_things: float = 0.0
    pq_stuff: float = 0.0
    sq: float = 0.0
    rq: float = 0.0
    miou: float = 0.0
    map_box: float = 0.0
    map_box_50: float = 0.0
    map_mask: float = 0.0
    map_mask_50: float = 0.0
    per_category: dict = field(default_factory=dict)

    def headline(self):
        return {k: getattr(self, k) for k in
                ("pq", "pq_things", "pq_stuff", "sq", "rq", "miou", "map_box", "map_box_50",
                 "map_mask", "map_mask_50")}

    def to_json(self):
        out = self.headline()
        out["per_category"] = {str(k): v for k, v in sorted(self.per_category.items())}
        return out

    def dumps(self):
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def to_table(self):
        rows = [("metric", "value")] + [(k, f"{v:.4f}") for k, v in self.headline().items()]
        width = max(len(r[0]) for r in rows)
        lines = [f"{a:<{width}}  {b:>8}" for a, b in rows]
        if self.per_category:
            lines.append("")
            cols = ("category", "pq", "iou", "ap_box", "ap_mask")
            lines.append("  ".join(f"{c:>8}" for c in cols))
            for cat, vals in sorted(self.per_category.items()):
                cells = [f"{cat:>8}"] + [f"{vals.get(c, float('nan')):>8.4f}" for c in cols[1:]]
                lines.append("  ".join(cells))
        return "\n".join(lines)


class Evaluator:
    """Accumulates per-image statistics; ``merge`` combines evaluators associatively."""

    def __init__(self, vocab):
        self.vocab = vocab
        self.pq = defaultdict(PQStat)
        self.iou = defaultdict(lambda: [0, 0])
        self.box_preds, self.box_gts = [], []
        self.mask_preds, self.mask_gts = [], []

    def add(self, outputs, scene):
        for c, s in pq_stats(outputs.panoptic, outputs.segments, scene.panoptic,
                             scene.segments).items():
            self.pq[c] += s
        for c, (i, u) in iou_counts(outputs.semantic, scene.semantic_map()).items():
            self.iou[c][0] += i
            self.iou[c][1] += u
        things = scene.instances(self.vocab)
        self.box_gts.append([(s.category_id, list(s.bbox)) for s in things])
        self.mask_gts.append([(s.category_id, scene.panoptic == s.id) for s in things])
        self.box_preds.append(list(outputs.detections))
        self.mask_preds.append(list(outputs.instances))
        return self

    def merge(self, other):
        for c, s in other.pq.items():
            self.pq[c] += s
        for c, (i, u) in other.iou.items():
            self.iou[c][0] += i
            self.iou[c][1] += u
        self.box_preds += other.box_preds
        self.box_gts += other.box_gts
        self.mask_preds += other.mask_preds
        self.mask_gts += other.mask_gts
        return self

    def report(self):
        def isthing(c):
            return c in self.vocab and self.vocab[c].isthing

        summary = pq_summary(self.pq, isthing)
        box = average_precision(self.box_preds, self.box_gts, kind="box")
        mask = average_precision(self.mask_preds, self.mask_gts, kind="mask")
        per_cat = {}
        for c in sorted(set(self.pq) | set(self.iou)):
            entry = {}
            if c in self.pq:
                entry["pq"] = self.pq[c].pq()
            if c in self.iou and self.iou[c][1]:
                entry["iou"] = self.iou[c][0] / self.iou[c][1]
            if c in box["per_category"]:
                entry["ap_box"] = box["per_category"][c]
            if c in mask["per_category"]:
                entry["ap_mask"] = mask["per_category"][c]
            per_cat[int(c)] = entry
        return EvalReport(
            pq=summary["all"][0], pq_things=summary["things"][0], pq_stuff=summary["stuff"][0],
            sq=summary["all"][1], rq=summary["all"][2],
            miou=_miou({c: tuple(v) for c, v in self.iou.items()}),
            map_box=box["map"], map_box_50=box["per_threshold"][0.5],
            map_mask=mask["map"], map_mask_50=mask["per_threshold"][0.5],
            per_category=per_cat,
        )


def evaluate(outputs, scenes, vocab):
    ev = Evaluator(vocab)
    for out, scene in zip(outputs, scenes):
        ev.add(out, scene)
    return ev.report()


def ground_truth_outputs(scene, vocab):
    """Task outputs that reproduce the annotation exactly (self-evaluation mode)."""
    from .inference import PanopticSegment, TaskOutputs

    segs = [PanopticSegment(s.id, s.category_id, vocab[s.category_id].isthing, 1.0, s.area)
            for s in scene.segments]
    things = scene.instances(vocab)
    return TaskOutputs(
        panoptic=scene.panoptic.copy(),
        segments=segs,
        semantic=scene.semantic_map(),
        instances=[(s.category_id, 1.0, scene.panoptic == s.id) for s in things],
        detections=[(s.category_id, 1.0, list(s.bbox)) for s in things],
    )
