"""Region-aware dual classifiers.

The in-vocabulary score compares a decoder query embedding with a text
embedding, the out-of-vocabulary score compares a mask-pooled visual embedding
with the same text embedding. Text embeddings come from a frozen synthetic text
encoder fed with learnable decoupled prompts around a category anchor token.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from itertools import product

import numpy as np

from .tensor import (
    Module,
    Tensor,
    concat,
    cosine_matrix,
    matmul,
    param,
    relu,
    reshape,
    sigmoid,
    tsum,
)

THING = "thing"
STUFF = "stuff"
DEFAULT_TEMPERATURE = 0.07
POOL_EPS = 1e-6


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    isthing: bool
    seen: bool = True

    @property
    def kind(self):
        return THING if self.isthing else STUFF


class Vocabulary:
    def __init__(self, categories):
        self.categories = list(categories)
        ids = [c.id for c in self.categories]
        if len(set(ids)) != len(ids):
            raise ValueError("category ids must be unique")
        self._by_id = {c.id: c for c in self.categories}
        self._index = {c.id: i for i, c in enumerate(self.categories)}

    def __len__(self):
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    def __contains__(self, cat_id):
        return cat_id in self._by_id

    def __getitem__(self, cat_id):
        try:
            return self._by_id[cat_id]
        except KeyError:
            raise KeyError(f"unknown category id {cat_id}") from None

    def index(self, cat_id):
        """Position of a category in vocabulary order (used for anchors and palette)."""
        return self._index[cat_id]

    @property
    def ids(self):
        return [c.id for c in self.categories]

    @property
    def train_ids(self):
        return [c.id for c in self.categories if c.seen]

    def select(self, kind=None, seen=None):
        out = self.categories
        if kind is not None:
            out = [c for c in out if c.kind == kind]
        if seen is not None:
            out = [c for c in out if c.seen == seen]
        return list(out)

    def is_seen(self, cat_id):
        return self[cat_id].seen

    def to_json(self):
        return [{"id": c.id, "name": c.name, "isthing": int(c.isthing), "seen": bool(c.seen)}
                for c in self.categories]

    @classmethod
    def from_json(cls, items):
        cats = []
        for item in items:
            if "isthing" not in item:
                raise ValueError(f"category {item.get('id')} lacks the isthing flag")
            cats.append(Category(int(item["id"]), str(item["name"]), bool(item["isthing"]),
                                 bool(item.get("seen", True))))
        return cls(cats)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.categories == other.categories

    def __repr__(self):
        return f"Vocabulary({[asdict(c) for c in self.categories]})"


def default_vocabulary(n_unseen=2):
    """Five thing and three stuff categories; the last thing and last stuff are held out."""
    names = [("car", True), ("person", True), ("dog", True), ("boat", True), ("kite", True),
             ("sky", False), ("grass", False), ("road", False)]
    held = set()
    if n_unseen >= 1:
        held.add("kite")
    if n_unseen >= 2:
        held.add("road")
    return Vocabulary(Category(i + 1, n, t, n not in held) for i, (n, t) in enumerate(names))


# -- synthetic CLIP stand-in ----------------------------------------------
def signature_palette(n):
    """Distinct RGB signature colours: cube corners first, then a finer lattice."""
    colors = [np.array(c, dtype=np.float64) for c in product((0.0, 1.0), repeat=3)]
    order = [0, 7, 4, 2, 1, 6, 5, 3]  # black, white, red, green, blue, yellow, magenta, cyan
    colors = [colors[i] for i in order]
    if n > len(colors):
        extra = [np.array(c) for c in product((0.0, 0.5, 1.0), repeat=3)]
        colors += [c for c in extra if not any(np.allclose(c, k) for k in colors)]
    if n > len(colors):
        raise ValueError(f"palette supports at most {len(colors)} categories")
    return np.stack(colors[:n])


class SyntheticClip:
    """Frozen text anchors and a frozen visual encoder with planted signatures.

    Category ``k`` (vocabulary order) owns the unit anchor ``e_k`` (rows of a
    seeded orthonormal basis) and the signature colour ``palette[k]``. The
    visual encoder softly assigns each pixel colour to the palette and returns
    the matching mixture of anchors, so pixels of category ``k`` land near
    ``e_k`` whatever the category's seen/unseen status.
    """

    def __init__(self, vocab, d_clip=16, seed=0, bandwidth=0.3):
        if len(vocab) > d_clip:
            raise ValueError("need d_clip >= number of categories for orthogonal anchors")
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((d_clip, d_clip)))
        self.vocab = vocab
        self.d_clip = d_clip
        self.anchors = basis.T[:len(vocab)].copy()
        self.palette = signature_palette(len(vocab))
        self.bandwidth = bandwidth

    def anchor(self, cat_id):
        return self.anchors[self.vocab.index(cat_id)]

    def color(self, cat_id):
        return self.palette[self.vocab.index(cat_id)]

    def encode_image(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        d2 = ((pixels[..., None, :] - self.palette) ** 2).sum(-1)
        logits = -d2 / (2.0 * self.bandwidth ** 2)
        logits -= logits.max(-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(-1, keepdims=True)
        return w @ self.anchors


# -- prompts and text encoder ---------------------------------------------
class PromptBank(Module):
    """Learnable shared, thing-specific and stuff-specific prompt vectors.

    Templates are ``[specific..., shared(prefix)..., c, shared(suffix)...]``;
    the shared vectors are split with the larger half before the category token.
    """

    def __init__(self, d_tok=16, n_shared=2, n_thing=4, n_stuff=4, rng=None, init_std=0.02):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.shared = param(rng.normal(0.0, init_std, (n_shared, d_tok)))
        self.thing_specific = param(rng.normal(0.0, init_std, (n_thing, d_tok)))
        self.stuff_specific = param(rng.normal(0.0, init_std, (n_stuff, d_tok)))

    @property
    def d_tok(self):
        return self.shared.shape[1]

    def specific(self, kind):
        if kind == THING:
            return self.thing_specific
        if kind == STUFF:
            return self.stuff_specific
        raise ValueError(f"kind must be 'thing' or 'stuff', got {kind!r}")

    def template(self, anchors, kind):
        """Token sequences ``[n, L, d_tok]`` for ``n`` category anchors."""
        anchors = anchors if isinstance(anchors, Tensor) else Tensor(anchors)
        n = anchors.shape[0]
        n_shared = self.shared.shape[0]
        split = n_shared - n_shared // 2
        pieces = [self.specific(kind), self.shared[:split]]
        ones = np.ones((n, 1, 1))
        tokens = [p * ones if p.shape[0] else None for p in pieces]
        tokens = [t for t in tokens if t is not None]
        tokens.append(reshape(anchors, (n, 1, self.d_tok)))
        if n_shared // 2:
            tokens.append(self.shared[split:] * ones)
        return concat(tokens, axis=1)


class TextEncoder:
    """Frozen two-layer token-mixing network followed by a mean pool.

    Each layer is ``X + relu(M @ X @ W) * gain``: ``M`` mixes tokens, ``W``
    mixes channels. Weights are seeded and never trained.
    """

    def __init__(self, d_tok=16, seed=0, gain=0.5, layers=2):
        self.d_tok = d_tok
        self.seed = seed
        self.gain = gain
        self.layers = layers
        self._cache = {}

    def _weights(self, length):
        if length not in self._cache:
            rng = np.random.default_rng([self.seed, length])
            mats = []
            for _ in range(self.layers):
                m = Tensor(rng.normal(0.0, 1.0 / np.sqrt(length), (length, length)))
                w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.d_tok), (self.d_tok, self.d_tok)))
                mats.append((m, w))
            self._cache[length] = mats
        return self._cache[length]

    def __call__(self, tokens):
        x = tokens
        for m, w in self._weights(tokens.shape[1]):
            x = x + relu(matmul(matmul(m, x), w)) * self.gain
        return tsum(x, axis=1) * (1.0 / tokens.shape[1])


def encode_text(bank, encoder, clip, cat_ids, kind):
    """Text embeddings ``Tensor[n, d_tok]`` for categories under the ``kind`` template."""
    if isinstance(cat_ids, (int, np.integer)):
        cat_ids = [int(cat_ids)]
    anchors = np.stack([clip.anchor(c) for c in cat_ids])
    return encoder(bank.template(anchors, kind))


# -- scores ---------------------------------------------------------------
def _check_temperature(T):
    if not T > 0:
        raise ValueError("temperature must be positive")


def in_vocab_logits(query_emb, text_emb, T=DEFAULT_TEMPERATURE):
    """``cosine / T`` for every (query, category) pair: ``[q, d] x [n, d] -> [q, n]``."""
    _check_temperature(T)
    return cosine_matrix(query_emb, text_emb) * (1.0 / T)


def score_in(query_emb, text_emb, T=DEFAULT_TEMPERATURE):
    """In-vocabulary probability ``sigmoid(cos(text, query) / T)`` for one pair."""
    q = query_emb if isinstance(query_emb, Tensor) else Tensor(query_emb)
    t = text_emb if isinstance(text_emb, Tensor) else Tensor(text_emb)
    logits = in_vocab_logits(reshape(q, (1, -1)), reshape(t, (1, -1)), T)
    return float(sigmoid(logits).data[0, 0])


def mask_pool(visual, mask_logits, eps=POOL_EPS):
    """Average of ``visual`` [h,w,d] weighted by ``sigmoid(mask_logits)`` [h,w].

    Falls back to the plain spatial mean when the weights sum below ``eps``.
    """
    visual = np.asarray(visual.data if isinstance(visual, Tensor) else visual, dtype=np.float64)
    logits = np.asarray(mask_logits.data if isinstance(mask_logits, Tensor) else mask_logits,
                        dtype=np.float64)
    if visual.shape[:2] != logits.shape:
        raise ValueError(f"mask shape {logits.shape} does not match features {visual.shape[:2]}")
    w = _np_sigmoid(logits)
    total = w.sum()
    if total < eps:
        return visual.reshape(-1, visual.shape[-1]).mean(0)
    return np.tensordot(w, visual, axes=([0, 1], [0, 1])) / total


def mask_pool_many(visual, mask_logits, eps=POOL_EPS):
    """Batched :func:`mask_pool` over ``mask_logits`` [q,h,w] -> ``[q, d]``."""
    visual = np.asarray(visual, dtype=np.float64)
    logits = np.asarray(mask_logits, dtype=np.float64)
    w = _np_sigmoid(logits).reshape(logits.shape[0], -1)
    feats = visual.reshape(-1, visual.shape[-1])
    total = w.sum(1, keepdims=True)
    pooled = (w @ feats) / np.maximum(total, eps)
    small = total[:, 0] < eps
    if small.any():
        pooled[small] = feats.mean(0)
    return pooled


def out_vocab_probs(clip_emb, text_emb, T=DEFAULT_TEMPERATURE):
    """``sigmoid(cos(text, pooled visual) / T)`` as a plain array ``[q, n]``."""
    _check_temperature(T)
    a = np.atleast_2d(np.asarray(clip_emb, dtype=np.float64))
    b = np.atleast_2d(np.asarray(text_emb.data if isinstance(text_emb, Tensor) else text_emb,
                                 dtype=np.float64))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cannot take the cosine of a zero-norm vector")
    return _np_sigmoid(((a / na) @ (b / nb).T) / T)


def score_out(clip_emb, text_emb, T=DEFAULT_TEMPERATURE):
    return float(out_vocab_probs(clip_emb, text_emb, T)[0, 0])


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))
