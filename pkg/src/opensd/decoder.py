"""Backbone, decoupled thing/stuff decoder and prediction heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    DeformableCrossAttention,
    MaskedCrossAttention,
    ReferenceHead,
    SelfAttention,
)
from .tensor import (
    MLP,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    im2col3x3,
    matmul,
    param,
    relu,
    reshape,
    sigmoid,
    transpose,
)

MASK_THRESHOLD = 0.5


@dataclass
class BackboneConfig:
    patch_size: int = 4
    embed_dim: int = 32
    conv_layers: int = 2


class Backbone(Module):
    """Patch embedding followed by residual 3x3 conv layers."""

    def __init__(self, config, rng, in_channels=3):
        self.config = config
        p, d = config.patch_size, config.embed_dim
        self.patch = Linear(p * p * in_channels, d, rng)
        self.convs = [Linear(9 * d, d, rng) for _ in range(config.conv_layers)]

    def __call__(self, image):
        image = np.asarray(image, dtype=np.float64)
        H, W, C = image.shape
        p = self.config.patch_size
        if H % p or W % p:
            raise ValueError(f"image size {H}x{W} is not divisible by patch size {p}")
        h, w = H // p, W // p
        patches = image.reshape(h, p, w, p, C).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * C)
        x = reshape(self.patch(Tensor(patches)), (h, w, -1))
        for conv in self.convs:
            x = x + reshape(relu(conv(im2col3x3(x))), (h, w, -1))
        return x


def sine_position_encoding(h, w, d):
    """Fixed 2D sinusoidal encoding ``[h, w, d]``; half the channels for y, half for x."""
    quarter = d // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    ey = np.concatenate([np.sin(ys[:, None] * freqs), np.cos(ys[:, None] * freqs)], -1)
    ex = np.concatenate([np.sin(xs[:, None] * freqs), np.cos(xs[:, None] * freqs)], -1)
    pe = np.zeros((h, w, d))
    pe[:, :, :2 * quarter] = ey[:, None, :]
    pe[:, :, 2 * quarter:4 * quarter] = ex[None, :, :]
    return pe


@dataclass
class QuerySet(Module):
    kind: str
    embeddings: Tensor

    @property
    def count(self):
        return self.embeddings.shape[0]

    @classmethod
    def create(cls, kind, count, d, rng):
        return cls(kind, param(rng.normal(0.0, 1.0, (count, d))))


@dataclass
class DecoderOutputs:
    """Predictions of one query set.

    query_emb: final query features ``[q, d]``.
    class_emb: query embeddings in text space, compared against text embeddings.
    masks: mask logits ``[q, h, w]`` at feature resolution.
    boxes: ``[q, 4]`` normalised (cx, cy, w, h), or None for branches without a box head.
    class_logits: ``[q, n_categories]`` filled in by the classifier.
    aux: outputs after every earlier layer, oldest first.
    """

    query_emb: Tensor
    class_emb: Tensor
    masks: Tensor
    boxes: Tensor | None = None
    class_logits: Tensor | None = None
    aux: list = field(default_factory=list)

    def layers(self):
        return [*self.aux, self]


class PredictionHeads(Module):
    """Class embedding, mask and box heads; one set of weights applied after every layer."""

    def __init__(self, d, d_text, rng, with_box=True):
        self.norm = LayerNorm(d)
        self.class_embed = Linear(d, d_text, rng)
        self.mask_embed = MLP([d, d, d, d], rng)
        self.box_head = MLP([d, d, d, 4], rng) if with_box else None

    def __call__(self, queries, mask_features):
        h, w, d = mask_features.shape
        x = self.norm(queries)
        emb = self.mask_embed(x)
        masks = mask_head(mask_features, emb)
        boxes = sigmoid(self.box_head(x)) if self.box_head is not None else None
        return DecoderOutputs(query_emb=x, class_emb=self.class_embed(x), masks=masks, boxes=boxes)


def mask_head(mask_features, embeddings):
    """Per-pixel dot product: ``masks[i, y, x] = mask_features[y, x] . embeddings[i]``."""
    h, w, d = mask_features.shape
    flat = reshape(mask_features, (h * w, d))
    return reshape(transpose(matmul(flat, transpose(embeddings))), (embeddings.shape[0], h, w))


class _Block(Module):
    def __init__(self, d, heads, rng, ffn_mult=2):
        self.cross_norm = LayerNorm(d)
        self.self_attn = SelfAttention(d, heads, rng)
        self.self_norm = LayerNorm(d)
        self.ffn = MLP([d, ffn_mult * d, d], rng)
        self.ffn_norm = LayerNorm(d)

    def _finish(self, x):
        x = self.self_norm(x + self.self_attn(x))
        return self.ffn_norm(x + self.ffn(x))


class StuffLayer(_Block):
    def __init__(self, d, heads, rng):
        super().__init__(d, heads, rng)
        self.cross = MaskedCrossAttention(d, heads, rng)

    def __call__(self, x, feat, mask, key_pos):
        x = self.cross_norm(x + self.cross(x, feat, mask, key_pos=key_pos))
        return self._finish(x)


class ThingLayer(_Block):
    def __init__(self, d, heads, rng, deform_heads=2, points=4):
        super().__init__(d, heads, rng)
        self.reference = ReferenceHead(d, rng)
        self.cross = DeformableCrossAttention(d, deform_heads, points, rng)

    def __call__(self, x, feat):
        x = self.cross_norm(x + self.cross(x, feat, self.reference(x)))
        return self._finish(x)


def attention_mask_from(mask_logits):
    """Boolean attend-mask from predicted mask logits: ``sigmoid > 0.5``."""
    return np.asarray(mask_logits.data) > 0.0


class _Branch(Module):
    def __init__(self, kind, n_queries, d, d_text, layers, heads, rng, with_box):
        self.queries = QuerySet.create(kind, n_queries, d, rng)
        self.heads = PredictionHeads(d, d_text, rng, with_box=with_box)
        self.n_layers = layers

    def _run(self, step, mask_features):
        x = self.queries.embeddings
        outs = []
        prev_mask = None
        for layer in self.layers:
            x = step(layer, x, prev_mask)
            out = self.heads(x, mask_features)
            prev_mask = attention_mask_from(out.masks)
            outs.append(out)
        final = outs[-1]
        final.aux = outs[:-1]
        return final


class ThingBranch(_Branch):
    def __init__(self, n_queries, d, d_text, layers, heads, rng, deform_heads=2, points=4):
        super().__init__("thing", n_queries, d, d_text, layers, heads, rng, with_box=True)
        self.layers = [ThingLayer(d, heads, rng, deform_heads, points) for _ in range(layers)]

    def __call__(self, feat, mask_features, key_pos=None):
        return self._run(lambda layer, x, _: layer(x, feat), mask_features)


class StuffBranch(_Branch):
    """Masked cross-attention branch. The first layer attends everywhere."""

    def __init__(self, n_queries, d, d_text, layers, heads, rng, with_box=False, kind="stuff"):
        super().__init__(kind, n_queries, d, d_text, layers, heads, rng, with_box=with_box)
        self.layers = [StuffLayer(d, heads, rng) for _ in range(layers)]

    def __call__(self, feat, mask_features, key_pos=None):
        return self._run(lambda layer, x, m: layer(x, feat, m, key_pos), mask_features)


@dataclass
class DecoderConfig:
    d: int = 32
    d_text: int = 16
    layers: int = 3
    heads: int = 4
    thing_queries: int = 12
    stuff_queries: int = 4
    deform_heads: int = 2
    deform_points: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)


class _Decoder(Module):
    def _features(self, image):
        feat = self.backbone(image)
        h, w, d = feat.shape
        mask_features = reshape(self.mask_proj(reshape(feat, (h * w, d))), (h, w, d))
        return feat, mask_features, sine_position_encoding(h, w, d)


class DecoupledDecoder(_Decoder):
    """Thing queries with deformable cross-attention, stuff queries with masked cross-attention."""

    def __init__(self, config, rng):
        self.config = config
        d = config.d
        self.backbone = Backbone(config.backbone, rng)
        self.mask_proj = Linear(d, d, rng)
        self.thing = ThingBranch(config.thing_queries, d, config.d_text, config.layers,
                                 config.heads, rng, config.deform_heads, config.deform_points)
        self.stuff = StuffBranch(config.stuff_queries, d, config.d_text, config.layers,
                                 config.heads, rng)

    def encode(self, image):
        return self.backbone(image)

    def __call__(self, image):
        feat, mask_features, pos = self._features(image)
        return self.decode(feat, mask_features, pos)

    def decode(self, feat, mask_features, pos=None):
        if pos is None:
            pos = sine_position_encoding(*feat.shape)
        return self.thing(feat, mask_features), self.stuff(feat, mask_features, pos)

    def query_groups(self):
        return [self.thing.queries, self.stuff.queries]


class SharedDecoder(_Decoder):
    """Single query set with masked cross-attention only (the undecoupled baseline)."""

    def __init__(self, config, rng):
        self.config = config
        d = config.d
        self.backbone = Backbone(config.backbone, rng)
        self.mask_proj = Linear(d, d, rng)
        self.shared = StuffBranch(config.thing_queries + config.stuff_queries, d, config.d_text,
                                  config.layers, config.heads, rng, with_box=True, kind="shared")

    def encode(self, image):
        return self.backbone(image)

    def __call__(self, image):
        feat, mask_features, pos = self._features(image)
        return self.shared(feat, mask_features, pos)

    def query_groups(self):
        return [self.shared.queries]
