"""COCO-panoptic style dataset directories.

Layout::

    images/<name>.ppm       8-bit RGB pixels
    panoptic/<name>.png     segment ids packed as R + 256 G + 256^2 B
    annotations.json        images / annotations (segments_info) / categories
    vocab.json              vocabulary with seen flags
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from ..classifiers import Vocabulary
from .scenes import Scene, Segment

ANNOTATIONS = "annotations.json"
VOCAB = "vocab.json"
IMAGES = "images"
PANOPTIC = "panoptic"


class DatasetError(ValueError):
    pass


def rgb_to_id(rgb):
    rgb = np.asarray(rgb, dtype=np.int64)
    return (rgb[..., 0] + 256 * rgb[..., 1] + 256 * 256 * rgb[..., 2]).astype(np.int32)


def id_to_rgb(ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= 256 ** 3:
        raise DatasetError("segment ids must fit in 24 bits")
    return np.stack([ids % 256, ids // 256 % 256, ids // 65536], axis=-1).astype(np.uint8)


def _to_uint8(pixels):
    q = np.round(np.asarray(pixels, dtype=np.float64) * 255.0)
    return np.clip(q, 0, 255).astype(np.uint8)


def export_dataset(scenes, vocab, root):
    """Write ``scenes`` and ``vocab`` under ``root``; returns the annotations path."""
    os.makedirs(os.path.join(root, IMAGES), exist_ok=True)
    os.makedirs(os.path.join(root, PANOPTIC), exist_ok=True)
    images, annotations = [], []
    for scene in scenes:
        name = scene.file_name or f"{scene.image_id:06d}"
        h, w = scene.shape
        Image.fromarray(_to_uint8(scene.pixels), "RGB").save(
            os.path.join(root, IMAGES, name + ".ppm"))
        Image.fromarray(id_to_rgb(scene.panoptic), "RGB").save(
            os.path.join(root, PANOPTIC, name + ".png"))
        images.append({"id": int(scene.image_id), "file_name": name + ".ppm",
                       "height": int(h), "width": int(w)})
        annotations.append({"image_id": int(scene.image_id), "file_name": name + ".png",
                            "segments_info": [s.to_json() for s in scene.segments]})
    categories = [{"id": c.id, "name": c.name, "isthing": int(c.isthing)} for c in vocab]
    path = os.path.join(root, ANNOTATIONS)
    with open(path, "w") as fh:
        json.dump({"images": images, "annotations": annotations, "categories": categories},
                  fh, indent=1)
    vocab.save(os.path.join(root, VOCAB))
    return path


def _read_json(path):
    if not os.path.isfile(path):
        raise DatasetError(f"missing file {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from None


def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(f"{where}: missing field {key!r}")
    return obj[key]


def _read_image(path):
    if not os.path.isfile(path):
        raise DatasetError(f"missing file {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def ingest_coco_panoptic(images_dir, json_path, vocab, panoptic_dir=None):
    """Scenes described by a COCO-panoptic annotation file.

    ``panoptic_dir`` defaults to ``panoptic/`` next to the annotation file.
    """
    data = _read_json(json_path)
    if panoptic_dir is None:
        panoptic_dir = os.path.join(os.path.dirname(os.path.abspath(json_path)), PANOPTIC)
    annotations = _field(data, "annotations", json_path)
    if not isinstance(annotations, list):
        raise DatasetError(f"{json_path}: 'annotations' must be a list")
    if not annotations:
        return []
    images = {}
    for img in _field(data, "images", json_path):
        image_id = _field(img, "id", "image entry")
        if image_id in images:
            raise DatasetError(f"duplicate image id {image_id}")
        images[image_id] = img

    scenes, seen_ids = [], set()
    for ann in annotations:
        image_id = _field(ann, "image_id", "annotation")
        if image_id in seen_ids:
            raise DatasetError(f"image {image_id} annotated twice")
        seen_ids.add(image_id)
        if image_id not in images:
            raise DatasetError(f"annotation refers to unknown image {image_id}")
        img = images[image_id]
        pixels = _read_image(os.path.join(images_dir, _field(img, "file_name", "image entry")))
        id_map = rgb_to_id(_read_image(os.path.join(panoptic_dir,
                                                    _field(ann, "file_name", "annotation"))))
        if pixels.shape[:2] != id_map.shape:
            raise DatasetError(f"image {image_id}: pixel and id map sizes differ")

        segments = []
        for info in _field(ann, "segments_info", "annotation"):
            seg = Segment(int(_field(info, "id", "segment")),
                          int(_field(info, "category_id", "segment")),
                          tuple(int(v) for v in _field(info, "bbox", "segment")),
                          int(_field(info, "area", "segment")), int(info.get("iscrowd", 0)))
            if seg.id == 0:
                raise DatasetError(f"image {image_id}: segment id 0 is reserved for void")
            if any(s.id == seg.id for s in segments):
                raise DatasetError(f"image {image_id}: duplicate segment id {seg.id}")
            if seg.category_id not in vocab:
                raise DatasetError(f"image {image_id}: unknown category {seg.category_id}")
            segments.append(seg)
        listed = {s.id for s in segments}
        present = set(np.unique(id_map).tolist()) - {0}
        if present - listed:
            raise DatasetError(f"image {image_id}: segment ids {sorted(present - listed)} "
                               "appear in the id map but not in segments_info")
        if listed - present:
            raise DatasetError(f"image {image_id}: segments {sorted(listed - present)} "
                               "have empty masks")
        name = os.path.splitext(img["file_name"])[0]
        scenes.append(Scene(pixels.astype(np.float64) / 255.0, id_map, segments,
                            image_id=int(image_id), file_name=name))
    return scenes


def load_dataset(root, vocab=None):
    """``(scenes, vocab)`` from a dataset directory written by :func:`export_dataset`."""
    if vocab is None:
        vocab = Vocabulary.load(os.path.join(root, VOCAB)) \
            if os.path.isfile(os.path.join(root, VOCAB)) else None
    if vocab is None:
        data = _read_json(os.path.join(root, ANNOTATIONS))
        vocab = Vocabulary.from_json(_field(data, "categories", ANNOTATIONS))
    scenes = ingest_coco_panoptic(os.path.join(root, IMAGES), os.path.join(root, ANNOTATIONS),
                                  vocab)
    return scenes, vocab
