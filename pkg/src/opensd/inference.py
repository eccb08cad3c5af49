"""Score ensembling and assembly of panoptic, semantic, instance and detection outputs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .classifiers import STUFF, THING, mask_pool_many, out_vocab_probs

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EnsembleParams:
    alpha: float = 0.2
    beta: float = 0.7

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


IN_VOCAB_ONLY = EnsembleParams(0.0, 0.0)


def ensemble(p_in, p_out, cat_id, vocab, params=EnsembleParams()):
    """Geometric blend of the two classifiers; exponent ``alpha`` for seen categories, ``beta`` otherwise."""
    w = params.alpha if vocab.is_seen(cat_id) else params.beta
    return max(p_in, PROB_FLOOR) ** (1.0 - w) * max(p_out, PROB_FLOOR) ** w


def ensemble_scores(p_in, p_out, cat_ids, vocab, params=EnsembleParams()):
    """Vectorised :func:`ensemble` over a ``[q, n]`` score matrix with columns ``cat_ids``."""
    p_in = np.asarray(p_in, dtype=np.float64)
    if p_out is None:
        return p_in.copy()
    w = np.array([params.alpha if vocab.is_seen(c) else params.beta for c in cat_ids])
    return np.maximum(p_in, PROB_FLOOR) ** (1.0 - w) * np.maximum(p_out, PROB_FLOOR) ** w


# -- per-branch predictions -------------------------------------------------
def _interp_matrix(n_out, n_in):
    """Rows of linear-interpolation weights mapping ``n_in`` samples to ``n_out`` (pixel-centre aligned)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample(maps, shape):
    """Bilinear resize of ``[n, h, w]`` maps to ``shape``."""
    maps = np.asarray(maps, dtype=np.float64)
    H, W = shape
    if maps.shape[1:] == (H, W):
        return maps.copy()
    uy = _interp_matrix(H, maps.shape[1])
    ux = _interp_matrix(W, maps.shape[2])
    return np.einsum("yh,nhw,xw->nyx", uy, maps, ux)


@dataclass
class BranchPrediction:
    """Numeric predictions of one query set at image resolution.

    scores: ensembled probabilities ``[q, n]`` over ``cat_ids``.
    mask_logits: ``[q, H, W]``.
    boxes: normalised (cx, cy, w, h) ``[q, 4]`` or None.
    """

    cat_ids: list
    scores: np.ndarray
    mask_logits: np.ndarray
    boxes: np.ndarray | None = None
    p_in: np.ndarray | None = None
    p_out: np.ndarray | None = None

    @property
    def mask_probs(self):
        return 0.5 * (1.0 + np.tanh(0.5 * self.mask_logits))


def predict_branches(model, image, params=EnsembleParams(), use_out=True, categories=None):
    """Run the model on one image and ensemble both classifiers per branch.

    Returns ``{branch: BranchPrediction}`` with branches ``thing``/``stuff`` for
    the decoupled decoder and ``shared`` for the baseline. ``categories``
    restricts the label space (e.g. the training vocabulary for closed-set tests).
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    outputs = model.forward(image, categories)
    visual = model.clip.encode_image(image) if use_out else None
    preds = {}
    for branch, (out, ids) in outputs.items():
        logits = upsample(out.masks.data, (H, W))
        p_in = 0.5 * (1.0 + np.tanh(0.5 * out.class_logits.data))
        p_out = None
        if use_out:
            pooled = mask_pool_many(visual, logits)
            text = model.text_embeddings(branch, ids)
            p_out = out_vocab_probs(pooled, text.data, model.config.temperature)
        scores = ensemble_scores(p_in, p_out, ids, model.vocab, params)
        boxes = None if out.boxes is None else out.boxes.data.copy()
        preds[branch] = BranchPrediction(list(ids), scores, logits, boxes, p_in, p_out)
    return preds


# -- assembly ---------------------------------------------------------------
@dataclass
class Candidate:
    query: int
    category_id: int
    score: float
    mask: np.ndarray
    isthing: bool
    box: np.ndarray | None = None


@dataclass
class PanopticSegment:
    id: int
    category_id: int
    isthing: bool
    score: float
    area: int

    def to_json(self):
        return {"id": int(self.id), "category_id": int(self.category_id),
                "isthing": bool(self.isthing), "score": float(self.score), "area": int(self.area)}


@dataclass
class TaskOutputs:
    panoptic: np.ndarray
    segments: list = field(default_factory=list)
    semantic: np.ndarray | None = None
    instances: list = field(default_factory=list)  # (category_id, score, mask)
    detections: list = field(default_factory=list)  # (category_id, score, [x, y, w, h])


def _best_candidates(pred, vocab, want_thing, score_threshold, mask_threshold=0.5):
    """Per query: top category; kept when of the wanted kind and scoring at least the threshold."""
    out = []
    if pred.scores.size == 0:
        return out
    probs = pred.mask_probs
    best = np.argmax(pred.scores, axis=1)
    for q, col in enumerate(best):
        cat = pred.cat_ids[col]
        score = float(pred.scores[q, col])
        if vocab[cat].isthing != want_thing or score < score_threshold:
            continue
        box = None if pred.boxes is None else pred.boxes[q]
        out.append(Candidate(q, cat, score, probs[q] > mask_threshold, want_thing, box))
    return out


def _sorted(cands):
    # stable: equal scores keep query order
    return sorted(cands, key=lambda c: -c.score)


def filter_duplicates(candidates, score_threshold=0.5, overlap_threshold=0.8, shape=None):
    """Drop low scorers, then claim pixels greedily by score.

    A candidate survives when at least ``overlap_threshold`` of its mask is still
    unclaimed. Returns ``[(candidate, claimed_mask)]`` in claiming order.
    """
    kept = _sorted([c for c in candidates if c.score >= score_threshold])
    if not kept:
        return []
    claimed = np.zeros(shape if shape is not None else kept[0].mask.shape, dtype=bool)
    survivors = []
    for c in kept:
        area = int(c.mask.sum())
        if area == 0:
            continue
        free = c.mask & ~claimed
        if free.sum() / area < overlap_threshold:
            continue
        claimed |= free
        survivors.append((c, free))
    return survivors


def semantic_map(pred):
    """Per-pixel argmax over categories of ``sum_q score_q(c) * mask_prob_q``."""
    acc = np.einsum("qc,qhw->chw", pred.scores, pred.mask_probs)
    return np.asarray(pred.cat_ids)[np.argmax(acc, axis=0)]


def assemble(thing_pred, stuff_pred, vocab, score_threshold=0.5, overlap_threshold=0.8,
             mask_threshold=0.5):
    """Build all four task outputs for one image.

    Instances and detections come from ``thing_pred``, the semantic map from
    ``stuff_pred``, and the panoptic map from thing-category candidates of the
    former plus stuff-category candidates of the latter. Passing the same
    prediction twice assembles a shared-decoder model.
    """
    H, W = thing_pred.mask_logits.shape[1:]
    things = _sorted(_best_candidates(thing_pred, vocab, True, score_threshold, mask_threshold))
    stuff = _best_candidates(stuff_pred, vocab, False, score_threshold, mask_threshold)

    instances = [(c.category_id, c.score, c.mask) for c in things if c.mask.any()]
    detections = []
    if thing_pred.boxes is not None:
        scale = np.array([W, H, W, H], dtype=np.float64)
        for c in things:
            cx, cy, bw, bh = c.box * scale
            detections.append((c.category_id, c.score, [cx - bw / 2, cy - bh / 2, bw, bh]))

    panoptic = np.zeros((H, W), dtype=np.int32)
    segments = []
    stuff_ids = {}
    for cand, free in filter_duplicates(things + stuff, score_threshold, overlap_threshold,
                                        (H, W)):
        if not cand.isthing and cand.category_id in stuff_ids:
            seg = stuff_ids[cand.category_id]
            panoptic[free] = seg.id
            seg.area += int(free.sum())
            continue
        seg = PanopticSegment(len(segments) + 1, cand.category_id, cand.isthing, cand.score,
                              int(free.sum()))
        panoptic[free] = seg.id
        segments.append(seg)
        if not cand.isthing:
            stuff_ids[cand.category_id] = seg
    return TaskOutputs(panoptic, segments, semantic_map(stuff_pred), instances, detections)


def assemble_predictions(preds, vocab, score_threshold=0.5, overlap_threshold=0.8):
    if "shared" in preds:
        return assemble(preds["shared"], preds["shared"], vocab, score_threshold, overlap_threshold)
    return assemble(preds[THING], preds[STUFF], vocab, score_threshold, overlap_threshold)


def infer(model, image, params=EnsembleParams(), use_out=True, score_threshold=0.5,
          overlap_threshold=0.8, categories=None):
    preds = predict_branches(model, image, params, use_out, categories)
    return assemble_predictions(preds, model.vocab, score_threshold, overlap_threshold)


# -- serialisation ------------------------------------------------------------
def write_pgm16(path, grid):
    """Binary PGM with 16-bit big-endian samples."""
    grid = np.asarray(grid)
    if grid.min() < 0 or grid.max() > 65535:
        raise ValueError("segment ids must fit in 16 bits")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(grid.astype(">u2").tobytes())


def read_pgm16(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 65535:
        raise ValueError("expected a 16-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=">u2", count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.int32)


def encode_rle(mask):
    """Uncompressed COCO RLE (column-major run lengths starting with a zero run)."""
    flat = np.asarray(mask, dtype=bool).flatten(order="F")
    counts = []
    prev, run = False, 0
    for v in flat:
        if v != prev:
            counts.append(run)
            prev, run = v, 0
        run += 1
    counts.append(run)
    return {"size": list(mask.shape), "counts": counts}


def decode_rle(rle):
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for n in rle["counts"]:
        flat[pos:pos + n] = val
        pos += n
        val = not val
    return flat.reshape((w, h)).T


def write_task_outputs(outputs, out_dir, image_id, stem=None):
    """Panoptic id grid (16-bit PGM) plus JSON segment table, and COCO-style result lists."""
    import os

    stem = stem or f"{image_id:06d}"
    os.makedirs(out_dir, exist_ok=True)
    write_pgm16(os.path.join(out_dir, f"{stem}_panoptic.pgm"), outputs.panoptic)
    write_pgm16(os.path.join(out_dir, f"{stem}_semantic.pgm"), outputs.semantic)
    with open(os.path.join(out_dir, f"{stem}_segments.json"), "w") as fh:
        json.dump({"image_id": int(image_id),
                   "segments_info": [s.to_json() for s in outputs.segments]}, fh, indent=1)
    inst = [{"image_id": int(image_id), "category_id": int(c), "score": float(s),
             "segmentation": encode_rle(m)} for c, s, m in outputs.instances]
    det = [{"image_id": int(image_id), "category_id": int(c), "score": float(s),
            "bbox": [float(v) for v in b]} for c, s, b in outputs.detections]
    with open(os.path.join(out_dir, f"{stem}_instances.json"), "w") as fh:
        json.dump(inst, fh)
    with open(os.path.join(out_dir, f"{stem}_detections.json"), "w") as fh:
        json.dump(det, fh)
