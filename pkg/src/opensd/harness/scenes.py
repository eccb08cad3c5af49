"""Synthetic scenes: stuff regions with geometric thing instances painted in signature colours."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

from ..classifiers import signature_palette

VOID = 0


@dataclass
class Segment:
    id: int
    category_id: int
    bbox: tuple  # COCO [x, y, w, h] in pixels, tight around the mask
    area: int
    iscrowd: int = 0

    def to_json(self):
        return {"id": int(self.id), "category_id": int(self.category_id),
                "bbox": [int(v) for v in self.bbox], "area": int(self.area),
                "iscrowd": int(self.iscrowd)}


@dataclass
class Scene:
    """An image plus its panoptic annotation.

    ``panoptic`` holds a segment id per pixel (0 = void); ``segments`` describes
    each id. Pixel values are multiples of 1/255 so the 8-bit export is lossless.
    """

    pixels: np.ndarray
    panoptic: np.ndarray
    segments: list = field(default_factory=list)
    image_id: int = 0
    file_name: str = ""

    @property
    def shape(self):
        return self.panoptic.shape

    def segment(self, seg_id):
        for s in self.segments:
            if s.id == seg_id:
                return s
        raise KeyError(seg_id)

    def mask(self, seg_id):
        return self.panoptic == seg_id

    def semantic_map(self, void=-1):
        out = np.full(self.panoptic.shape, void, dtype=np.int64)
        for s in self.segments:
            out[self.panoptic == s.id] = s.category_id
        return out

    def instances(self, vocab):
        return [s for s in self.segments if vocab[s.category_id].isthing]

    def category_ids(self):
        return sorted({s.category_id for s in self.segments})


def tight_bbox(mask):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("cannot box an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def _shape_mask(kind, size, cx, cy, w, h):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "rect":
        return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
    if kind == "ellipse":
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    # isoceles triangle, apex up
    top = cy - h / 2
    rel = (yy - top) / h
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * w / 2)


def _stuff_layout(rng, size, n_regions):
    """Region index per pixel for 1 or 2 stuff regions split by a slanted line."""
    if n_regions == 1:
        return np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    pos = rng.uniform(0.3, 0.7) * size
    slope = rng.uniform(-0.4, 0.4)
    if rng.random() < 0.5:
        region = yy > pos + slope * (xx - size / 2)
    else:
        region = xx > pos + slope * (yy - size / 2)
    return region.astype(np.int64)


def generate_scene(vocab, rng, size=64, n_things=None, categories=None, noise=0.1,
                   palette=None, min_size=None, max_size=None, image_id=0):
    """Random scene with 1-2 stuff regions and ``n_things`` (default 1-4) thing instances.

    ``categories`` restricts which category ids may appear (default: all).
    Later instances occlude earlier ones; same-category instances never touch.
    Shape extents default to 12/64 and 28/64 of the image side.
    """
    min_size = size * 12 / 64 if min_size is None else min_size
    max_size = size * 28 / 64 if max_size is None else max_size
    allowed = set(vocab.ids if categories is None else categories)
    thing_ids = [c.id for c in vocab if c.isthing and c.id in allowed]
    stuff_ids = [c.id for c in vocab if not c.isthing and c.id in allowed]
    if not stuff_ids:
        raise ValueError("a scene needs at least one stuff category")
    if palette is None:
        palette = signature_palette(len(vocab))
    if n_things is None:
        n_things = int(rng.integers(1, 5))
    if n_things and not thing_ids:
        raise ValueError("no thing categories available")

    n_regions = int(rng.integers(1, 3)) if len(stuff_ids) > 1 else 1
    stuff_cats = [int(c) for c in rng.choice(stuff_ids, size=n_regions, replace=False)]
    layout = _stuff_layout(rng, size, n_regions)
    category = np.array(stuff_cats)[layout]
    owner = -np.ones((size, size), dtype=np.int64)  # thing instance index per pixel

    placed = []
    for k in range(n_things):
        cat = int(rng.choice(thing_ids))
        for _ in range(50):
            kind = ("rect", "ellipse", "triangle")[int(rng.integers(0, 3))]
            w, h = rng.uniform(min_size, max_size, size=2)
            cx = rng.uniform(w / 2, size - w / 2)
            cy = rng.uniform(h / 2, size - h / 2)
            m = _shape_mask(kind, size, cx, cy, w, h)
            if m.sum() < min_size * min_size / 3:
                continue
            grown = _dilate(m, 2)
            if any(pc == cat and (grown & pm).any() for pc, pm in placed):
                continue
            # earlier instances must keep most of their area once this one is drawn on top
            if any((pm & ~m & (owner == i)).sum() < 0.5 * pm.sum()
                   for i, (_, pm) in enumerate(placed)):
                continue
            placed.append((cat, m))
            owner[m] = k
            break
    segments = []
    panoptic = np.zeros((size, size), dtype=np.int32)
    next_id = 1
    for cat in stuff_cats:
        m = (category == cat) & (owner < 0)
        if m.any():
            panoptic[m] = next_id
            segments.append(Segment(next_id, cat, tight_bbox(m), int(m.sum())))
            next_id += 1
    for k, (cat, _) in enumerate(placed):
        m = owner == k
        if not m.any():
            continue
        panoptic[m] = next_id
        category[m] = cat
        segments.append(Segment(next_id, cat, tight_bbox(m), int(m.sum())))
        next_id += 1

    index_of = {c.id: i for i, c in enumerate(vocab)}
    colors = palette[np.vectorize(index_of.__getitem__)(category)]
    pixels = np.clip(colors + rng.normal(0.0, noise, colors.shape), 0.0, 1.0)
    pixels = np.round(pixels * 255.0) / 255.0
    return Scene(pixels, panoptic, segments, image_id=image_id,
                 file_name=f"{image_id:06d}")


def _dilate(mask, r):
    return binary_dilation(mask, iterations=r)


def generate_dataset(vocab, n, seed, size=64, categories=None, noise=0.1, palette=None,
                     start_id=0):
    """``n`` scenes from independent child streams of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [generate_scene(vocab, np.random.default_rng(c), size=size, categories=categories,
                           noise=noise, palette=palette, image_id=start_id + i)
            for i, c in enumerate(children)]
