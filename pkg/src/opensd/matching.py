"""Ground-truth splitting, Hungarian assignment and the set-prediction loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    abs as tabs,
    bce_with_logits,
    maximum,
    minimum,
    reshape,
    sigmoid,
    tsum,
)

THING = "thing"
STUFF = "stuff"


@dataclass
class GroundTruthEntry:
    category_id: int
    mask: np.ndarray
    box: np.ndarray | None = None  # normalised (cx, cy, w, h)
    is_crowd: bool = False


@dataclass
class GroundTruthSet:
    kind: str
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def category_ids(self):
        return [e.category_id for e in self.entries]

    def masks(self):
        if not self.entries:
            return np.zeros((0, 0, 0), dtype=bool)
        return np.stack([e.mask for e in self.entries])

    def boxes(self):
        return np.stack([e.box for e in self.entries]) if self.entries else np.zeros((0, 4))


@dataclass
class Assignment:
    pairs: list
    unmatched: list

    @property
    def query_indices(self):
        return [q for q, _ in self.pairs]

    @property
    def gt_indices(self):
        return [g for _, g in self.pairs]

    def cost(self, matrix):
        return float(sum(matrix[q][g] for q, g in self.pairs))


def bbox_to_cxcywh(bbox, height, width):
    """COCO ``[x, y, w, h]`` pixel box to normalised (cx, cy, w, h)."""
    x, y, bw, bh = bbox
    return np.array([(x + bw / 2) / width, (y + bh / 2) / height, bw / width, bh / height])


def split_ground_truth(scene, vocab):
    """Thing instances (T-GTs) and per-category merged regions over all categories (S-GTs)."""
    height, width = scene.panoptic.shape
    things = GroundTruthSet(THING)
    merged = {}
    for seg in scene.segments:
        if seg.category_id not in vocab:
            raise KeyError(f"category {seg.category_id} has no thing/stuff flag in the vocabulary")
        mask = scene.panoptic == seg.id
        cat = vocab[seg.category_id]
        if cat.isthing:
            things.entries.append(GroundTruthEntry(
                seg.category_id, mask, bbox_to_cxcywh(seg.bbox, height, width)))
        if seg.category_id in merged:
            merged[seg.category_id] = merged[seg.category_id] | mask
        else:
            merged[seg.category_id] = mask
    stuff = GroundTruthSet(STUFF, [GroundTruthEntry(c, m) for c, m in sorted(merged.items())])
    return things, stuff


def panoptic_ground_truth(scene, vocab):
    """Thing instances plus stuff-category regions, the target of the shared-decoder baseline."""
    things, merged = split_ground_truth(scene, vocab)
    stuff = [e for e in merged.entries if not vocab[e.category_id].isthing]
    return GroundTruthSet("panoptic", list(things.entries) + stuff)


# -- Hungarian ------------------------------------------------------------
def hungarian(cost):
    """Minimum-cost one-to-one assignment for a ``[q, g]`` cost matrix.

    Shortest augmenting paths with row/column potentials, O(n^2 m). Rows are
    inserted in index order and every scan keeps the first (lowest-index)
    column among equal reduced costs, so results are deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    q, g = cost.shape
    if q == 0 or g == 0:
        return Assignment([], list(range(q)))
    transposed = q > g
    c = cost.T if transposed else cost
    row_of_col = _solve_rows(c)
    pairs = [(row_of_col[j], j) for j in range(c.shape[1]) if row_of_col[j] >= 0]
    if transposed:
        pairs = [(j, i) for i, j in pairs]
    pairs.sort()
    matched = {p for p, _ in pairs}
    return Assignment(pairs, [i for i in range(q) if i not in matched])


def _solve_rows(c):
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return [int(p[j]) - 1 for j in range(1, m + 1)]


# -- costs ----------------------------------------------------------------
@dataclass
class LossWeights:
    cls: float = 2.0
    mask_bce: float = 5.0
    mask_dice: float = 5.0
    box_l1: float = 5.0
    box_giou: float = 2.0


def downsample_masks(masks, shape):
    """Area-average boolean masks ``[n, H, W]`` down to ``shape`` (integer factor)."""
    masks = np.asarray(masks, dtype=np.float64)
    n, H, W = masks.shape
    h, w = shape
    if H == h and W == w:
        return masks
    if H % h or W % w:
        raise ValueError(f"cannot downsample {H}x{W} to {h}x{w}")
    return masks.reshape(n, h, H // h, w, W // w).mean(axis=(2, 4))


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pairwise_mask_bce(logits, targets):
    """Mean per-pixel BCE between every prediction and every target: ``[q, g]``."""
    x = logits.reshape(logits.shape[0], -1)
    t = targets.reshape(targets.shape[0], -1)
    pos = np.logaddexp(0.0, -x)  # -log p
    neg = np.logaddexp(0.0, x)   # -log(1-p)
    return (pos @ t.T + neg @ (1.0 - t).T) / x.shape[1]


def pairwise_dice(logits, targets):
    p = _np_sigmoid(logits.reshape(logits.shape[0], -1))
    t = targets.reshape(targets.shape[0], -1)
    num = 2.0 * p @ t.T + 1.0
    den = p.sum(1)[:, None] + t.sum(1)[None, :] + 1.0
    return 1.0 - num / den


def box_cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def pairwise_giou(a, b):
    """Generalised IoU between every (cx, cy, w, h) box in ``a`` and in ``b``."""
    a, b = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    lt_c = np.minimum(a[:, None, :2], b[None, :, :2])
    rb_c = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh_c = np.clip(rb_c - lt_c, 0, None)
    enclose = wh_c[..., 0] * wh_c[..., 1]
    return inter / union - (enclose - union) / enclose


def _box_columns(gt, pred, use_boxes):
    """Ground-truth indices that receive box terms: entries carrying a box, never stuff sets."""
    if use_boxes is False or pred.boxes is None or gt.kind == STUFF:
        return []
    return [j for j, e in enumerate(gt.entries) if e.box is not None]


def match_cost(pred, gt, columns, weights=None, use_boxes=None):
    """Cost matrix ``[q, len(gt)]`` combining class, mask and box terms.

    ``columns[j]`` is the column of ``pred.class_logits`` holding the score of
    ground truth ``j``'s category. Box terms apply only to entries with a box,
    so stuff sets carry zero box weight.
    """
    weights = weights or LossWeights()
    q = pred.masks.shape[0]
    if len(gt) == 0:
        return np.zeros((q, 0))
    probs = _np_sigmoid(pred.class_logits.data)
    cost = -weights.cls * probs[:, columns]
    logits = pred.masks.data
    targets = downsample_masks(gt.masks(), logits.shape[1:])
    cost = cost + weights.mask_bce * pairwise_mask_bce(logits, targets)
    cost = cost + weights.mask_dice * pairwise_dice(logits, targets)
    box_cols = _box_columns(gt, pred, use_boxes)
    if box_cols:
        boxes = pred.boxes.data
        gboxes = np.stack([gt.entries[j].box for j in box_cols])
        l1 = np.abs(boxes[:, None, :] - gboxes[None, :, :]).sum(-1)
        cost[:, box_cols] += weights.box_l1 * l1 - weights.box_giou * pairwise_giou(boxes, gboxes)
    return cost


# -- losses ---------------------------------------------------------------
def classification_loss(class_logits, positives):
    """Binary cross-entropy over every (query, category) pair.

    ``positives`` is a list of (query, column) pairs labelled 1; everything
    else is a negative. Returns the summed loss.
    """
    targets = np.zeros(class_logits.shape)
    for qi, col in positives:
        targets[qi, col] = 1.0
    return tsum(bce_with_logits(class_logits, targets))


def dice_loss(logits, targets):
    """Per-row ``1 - (2 sum(p t) + 1) / (sum p + sum t + 1)`` on flattened masks."""
    p = sigmoid(logits)
    num = tsum(p * targets, axis=1) * 2.0 + 1.0
    den = tsum(p, axis=1) + targets.sum(1) + 1.0
    return 1.0 - num / den


def giou_loss(pred, target):
    """``1 - GIoU`` per row for (cx, cy, w, h) boxes; ``pred`` is a Tensor."""
    def corners(b):
        cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
        return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5

    px0, py0, px1, py1 = corners(pred)
    t = Tensor(target)
    tx0, ty0, tx1, ty1 = corners(t)
    area_p = (px1 - px0) * (py1 - py0)
    area_t = (tx1 - tx0) * (ty1 - ty0)
    iw = maximum(minimum(px1, tx1) - maximum(px0, tx0), 0.0)
    ih = maximum(minimum(py1, ty1) - maximum(py0, ty0), 0.0)
    inter = iw * ih
    union = area_p + area_t - inter
    ew = maximum(px1, tx1) - minimum(px0, tx0)
    eh = maximum(py1, ty1) - minimum(py0, ty0)
    enclose = ew * eh
    giou = inter / union - (enclose - union) / enclose
    return 1.0 - giou


@dataclass
class LossTerms:
    cls: Tensor
    mask_bce: Tensor | None
    mask_dice: Tensor | None
    box_l1: Tensor | None
    box_giou: Tensor | None

    def total(self, weights):
        total = self.cls * weights.cls
        for name in ("mask_bce", "mask_dice", "box_l1", "box_giou"):
            term = getattr(self, name)
            if term is not None:
                total = total + term * getattr(weights, name)
        return total


def set_loss_terms(pred, gt, assignment, columns, use_boxes=None):
    """Unweighted loss terms for one layer's predictions against one GT set.

    Classification is summed over all (query, category) pairs; mask and box
    terms are summed over matched pairs. Everything is divided by the number
    of ground truths (at least one).
    """
    norm = 1.0 / max(len(gt), 1)
    positives = [(qi, columns[gi]) for qi, gi in assignment.pairs]
    cls = classification_loss(pred.class_logits, positives) * norm
    if not assignment.pairs:
        return LossTerms(cls, None, None, None, None)
    qidx = np.array(assignment.query_indices)
    gidx = np.array(assignment.gt_indices)
    q, h, w = pred.masks.shape
    logits = reshape(pred.masks, (q, h * w))[qidx]
    targets = downsample_masks(gt.masks()[gidx], (h, w)).reshape(len(gidx), h * w)
    mask_bce = tsum(bce_with_logits(logits, targets)) * (norm / (h * w))
    mask_dice = tsum(dice_loss(logits, targets)) * norm
    box_l1 = box_giou = None
    with_box = set(_box_columns(gt, pred, use_boxes))
    box_pairs = [(qi, gi) for qi, gi in assignment.pairs if gi in with_box]
    if box_pairs:
        boxes = pred.boxes[np.array([qi for qi, _ in box_pairs])]
        gboxes = np.stack([gt.entries[gi].box for _, gi in box_pairs])
        box_l1 = tsum(tabs(boxes - gboxes)) * norm
        box_giou = tsum(giou_loss(boxes, gboxes)) * norm
    return LossTerms(cls, mask_bce, mask_dice, box_l1, box_giou)


def set_loss(pred, gt, assignment, columns, weights=None, use_boxes=None):
    """Weighted set-prediction loss for one layer (see :func:`set_loss_terms`)."""
    weights = weights or LossWeights()
    return set_loss_terms(pred, gt, assignment, columns, use_boxes).total(weights)


def branch_loss(outputs, gt, columns, weights=None, use_boxes=None):
    """Sum of :func:`set_loss` over every decoder layer, re-matching at each layer.

    Returns ``(loss, final_assignment)``.
    """
    weights = weights or LossWeights()
    total = None
    assignment = None
    for layer_out in outputs.layers():
        cost = match_cost(layer_out, gt, columns, weights, use_boxes)
        assignment = hungarian(cost)
        loss = set_loss(layer_out, gt, assignment, columns, weights, use_boxes)
        total = loss if total is None else total + loss
    return total, assignment


__all__ = [
    "Assignment",
    "GroundTruthEntry",
    "GroundTruthSet",
    "LossTerms",
    "LossWeights",
    "branch_loss",
    "classification_loss",
    "dice_loss",
    "downsample_masks",
    "giou_loss",
    "hungarian",
    "match_cost",
    "panoptic_ground_truth",
    "set_loss",
    "set_loss_terms",
    "split_ground_truth",
]
