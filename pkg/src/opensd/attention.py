"""Self-attention, mask-restricted cross-attention and deformable cross-attention.

Feature maps are ``Tensor[h, w, d]``; queries are ``Tensor[q, d]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Linear,
    Module,
    Tensor,
    bilinear_sample,
    concat,
    masked_softmax,
    matmul,
    reshape,
    sigmoid,
    transpose,
)
from .tensor import tsum as tensor_sum


def _split_heads(x, heads):
    n, d = x.shape
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x):
    heads, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, heads * dh))


def _check_heads(d, heads):
    if d % heads:
        raise ValueError(f"embedding dim {d} is not divisible by {heads} heads")


def fallback_mask(mask):
    """Rows that mask out every pixel are replaced by all-true rows."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.reshape(mask.shape[0], -1)
    empty = ~flat.any(axis=1)
    if empty.any():
        flat = flat.copy()
        flat[empty] = True
    return flat.reshape(mask.shape)


class SelfAttention(Module):
    def __init__(self, d, heads, rng):
        _check_heads(d, heads)
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, queries, pos=None, return_weights=False):
        qk_in = queries if pos is None else queries + pos
        q = _split_heads(self.q_proj(qk_in), self.heads)
        k = _split_heads(self.k_proj(qk_in), self.heads)
        v = _split_heads(self.v_proj(queries), self.heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        weights = masked_softmax(matmul(q, transpose(k, (0, 2, 1))) * scale, None, axis=-1)
        out = self.out_proj(_merge_heads(matmul(weights, v)))
        return (out, weights) if return_weights else out


class MaskedCrossAttention(Module):
    """Cross-attention from queries to every pixel, optionally restricted per query.

    ``mask`` is boolean ``[q, h, w]`` with True meaning "attend". A query whose
    mask is entirely False falls back to attending everywhere.
    """

    def __init__(self, d, heads, rng):
        _check_heads(d, heads)
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, queries, feat, mask=None, key_pos=None, return_weights=False):
        h, w, d = feat.shape
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (queries.shape[0], h, w):
                raise ValueError(f"attention mask shape {mask.shape} does not match "
                                 f"{(queries.shape[0], h, w)}")
            mask = fallback_mask(mask).reshape(queries.shape[0], h * w)
        flat = reshape(feat, (h * w, d))
        keys_in = flat if key_pos is None else flat + reshape(key_pos, (h * w, d))
        q = _split_heads(self.q_proj(queries), self.heads)
        k = _split_heads(self.k_proj(keys_in), self.heads)
        v = _split_heads(self.v_proj(flat), self.heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        logits = matmul(q, transpose(k, (0, 2, 1))) * scale
        weights = masked_softmax(logits, None if mask is None else mask[None], axis=-1)
        out = self.out_proj(_merge_heads(matmul(weights, v)))
        return (out, weights) if return_weights else out


@dataclass
class SamplingSpec:
    """Where and how strongly each query samples the feature map.

    reference: normalised (x, y) per query, ``[q, 2]`` in [0, 1].
    offsets: pixel displacements ``Tensor[q, heads, points, 2]``.
    weights: softmax-normalised ``Tensor[q, heads, points]``.
    """

    reference: Tensor
    offsets: Tensor
    weights: Tensor

    @property
    def heads(self):
        return self.offsets.shape[1]

    @property
    def points_per_head(self):
        return self.offsets.shape[2]


def sampling_locations(spec, height, width):
    """Pixel-space (x, y) sample positions, pixel centres at integer coordinates."""
    ref = spec.reference
    scale = np.array([width, height], dtype=np.float64)
    ref_px = ref * scale - 0.5
    q = ref.shape[0]
    return reshape(ref_px, (q, 1, 1, 2)) + spec.offsets


def deformable_sample(value, spec):
    """Weighted bilinear samples per head: ``value`` [h,w,d] -> ``Tensor[q, d]``.

    Head ``i`` reads channels ``i*d/heads:(i+1)*d/heads``.
    """
    h, w, d = value.shape
    heads = spec.heads
    _check_heads(d, heads)
    dh = d // heads
    locs = sampling_locations(spec, h, w)
    outs = []
    for i in range(heads):
        head_value = value[:, :, i * dh:(i + 1) * dh]
        samples = bilinear_sample(head_value, locs[:, i])  # [q, points, dh]
        wts = reshape(spec.weights[:, i], (spec.weights.shape[0], spec.weights.shape[2], 1))
        outs.append(tensor_sum(samples * wts, axis=1))
    return concat(outs, axis=1)


class DeformableCrossAttention(Module):
    def __init__(self, d, heads, points, rng):
        _check_heads(d, heads)
        self.heads = heads
        self.points = points
        self.offset_proj = Linear(d, heads * points * 2, rng)
        self.weight_proj = Linear(d, heads * points, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self._init_sampling()

    def _init_sampling(self):
        # zero weights; bias spreads each head's points along a ray, heads at evenly spaced angles
        self.offset_proj.weight.data[:] = 0.0
        angles = np.arange(self.heads) * (2.0 * np.pi / self.heads)
        grid = np.stack([np.cos(angles), np.sin(angles)], -1)
        grid = grid / np.abs(grid).max(-1, keepdims=True)
        bias = grid[:, None, :] * np.arange(1, self.points + 1)[None, :, None]
        self.offset_proj.bias.data[:] = bias.reshape(-1)
        self.weight_proj.weight.data[:] = 0.0
        self.weight_proj.bias.data[:] = 0.0

    def sampling_spec(self, queries, reference):
        q = queries.shape[0]
        offsets = reshape(self.offset_proj(queries), (q, self.heads, self.points, 2))
        logits = reshape(self.weight_proj(queries), (q, self.heads, self.points))
        return SamplingSpec(reference, offsets, masked_softmax(logits, None, axis=-1))

    def __call__(self, queries, feat, reference, return_spec=False):
        ref = np.asarray(reference.data if isinstance(reference, Tensor) else reference)
        if ref.min() < 0.0 or ref.max() > 1.0:
            raise ValueError("reference points must lie in [0, 1]^2")
        spec = self.sampling_spec(queries, reference)
        h, w, d = feat.shape
        value = reshape(self.v_proj(reshape(feat, (h * w, d))), (h, w, d))
        out = self.out_proj(deformable_sample(value, spec))
        return (out, spec) if return_spec else out


class ReferenceHead(Module):
    """Normalised reference point per query: ``sigmoid(linear(query))``."""

    def __init__(self, d, rng):
        self.proj = Linear(d, 2, rng)

    def __call__(self, queries):
        return sigmoid(self.proj(queries))
