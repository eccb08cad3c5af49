"""Input checks shared by the estimator facade and the CLI."""

from __future__ import annotations

import numpy as np

from .harness.scenes import Scene


def check_image(image, patch=None):
    """Float64 ``[h, w, 3]`` array with finite values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an [h, w, 3] image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    if patch and (arr.shape[0] % patch or arr.shape[1] % patch):
        raise ValueError(f"image size {arr.shape[:2]} is not divisible by the patch size {patch}")
    return arr


def check_images(images, patch=None):
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    if isinstance(images, Scene):
        images = [images]
    out = [check_image(im.pixels if isinstance(im, Scene) else im, patch) for im in images]
    if not out:
        raise ValueError("no images given")
    return out


def check_scenes(scenes, vocab, patch=None):
    """List of annotated scenes whose categories all belong to ``vocab``."""
    if isinstance(scenes, Scene):
        scenes = [scenes]
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes given")
    for s in scenes:
        if not isinstance(s, Scene):
            raise TypeError(f"expected Scene objects, got {type(s).__name__}")
        check_image(s.pixels, patch)
        if s.panoptic.shape != s.pixels.shape[:2]:
            raise ValueError(f"scene {s.image_id}: annotation and image sizes differ")
        for seg in s.segments:
            if seg.category_id not in vocab:
                raise ValueError(f"scene {s.image_id}: unknown category {seg.category_id}")
    return scenes
