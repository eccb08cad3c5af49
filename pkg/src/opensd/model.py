"""The full segmenter: decoder, prompt bank and the two classifiers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifiers import (
    DEFAULT_TEMPERATURE,
    STUFF,
    THING,
    PromptBank,
    SyntheticClip,
    TextEncoder,
    encode_text,
    in_vocab_logits,
)
from .decoder import DecoderConfig, DecoupledDecoder, SharedDecoder
from .matching import LossWeights, branch_loss, panoptic_ground_truth, split_ground_truth
from .tensor import Module, concat

DECOUPLED = "decoupled"
SHARED = "shared"


@dataclass
class ModelConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    variant: str = DECOUPLED
    n_shared_prompts: int = 2
    n_specific_prompts: int = 4
    temperature: float = DEFAULT_TEMPERATURE
    clip_seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)


class OpenSDModel(Module):
    def __init__(self, config, vocab, seed=0):
        if config.variant not in (DECOUPLED, SHARED):
            raise ValueError(f"unknown decoder variant {config.variant!r}")
        rng = np.random.default_rng(seed)
        self.config = config
        self.vocab = vocab
        dec = config.decoder
        self.decoder = (DecoupledDecoder if config.variant == DECOUPLED else SharedDecoder)(dec, rng)
        self.prompts = PromptBank(dec.d_text, config.n_shared_prompts, config.n_specific_prompts,
                                  config.n_specific_prompts, rng)
        self.text_encoder = TextEncoder(dec.d_text, seed=config.clip_seed)
        self.clip = SyntheticClip(vocab, dec.d_text, seed=config.clip_seed)

    @property
    def decoupled(self):
        return self.config.variant == DECOUPLED

    # -- categories per branch --------------------------------------------
    def branch_categories(self, branch, categories=None):
        """Category ids a branch classifies over, in column order, optionally restricted."""
        if branch == THING:
            cats = self.vocab.select(kind=THING)
        else:
            cats = list(self.vocab)
        if categories is not None:
            allowed = set(categories)
            cats = [c for c in cats if c.id in allowed]
        return [c.id for c in cats]

    def text_embeddings(self, branch, cat_ids):
        """Text embeddings for a branch: thing/stuff templates, or per-category kind when shared."""
        if not cat_ids:
            raise ValueError("no categories to embed")
        if branch in (THING, STUFF):
            return encode_text(self.prompts, self.text_encoder, self.clip, cat_ids, branch)
        # shared decoder: template chosen by each category's own kind, order preserved
        parts = [encode_text(self.prompts, self.text_encoder, self.clip, [c], self.vocab[c].kind)
                 for c in cat_ids]
        return concat(parts, axis=0)

    # -- forward ------------------------------------------------------------
    def _classify(self, outputs, text):
        for out in outputs.layers():
            out.class_logits = in_vocab_logits(out.class_emb, text, self.config.temperature)
        return outputs

    def forward(self, image, categories=None):
        """Decoder outputs with class logits filled in, keyed by branch name.

        ``categories`` limits the classifier columns (default: whole vocabulary).
        """
        if self.decoupled:
            thing, stuff = self.decoder(image)
            thing_ids = self.branch_categories(THING, categories)
            stuff_ids = self.branch_categories(STUFF, categories)
            self._classify(thing, self.text_embeddings(THING, thing_ids))
            self._classify(stuff, self.text_embeddings(STUFF, stuff_ids))
            return {THING: (thing, thing_ids), STUFF: (stuff, stuff_ids)}
        shared = self.decoder(image)
        ids = self.branch_categories(SHARED, categories)
        self._classify(shared, self.text_embeddings(SHARED, ids))
        return {SHARED: (shared, ids)}

    def loss(self, scene):
        """Training loss for one scene over seen categories, summed over branches and layers."""
        outputs = self.forward(scene.pixels, categories=self.vocab.train_ids)
        weights = self.config.loss_weights
        if self.decoupled:
            tgts, sgts = split_ground_truth(scene, self.vocab)
            targets = {THING: tgts, STUFF: sgts}
        else:
            targets = {SHARED: panoptic_ground_truth(scene, self.vocab)}
        total = None
        for branch, (out, ids) in outputs.items():
            gt = targets[branch]
            gt.entries = [e for e in gt.entries if self.vocab[e.category_id].seen]
            columns = [ids.index(e.category_id) for e in gt.entries]
            loss, _ = branch_loss(out, gt, columns, weights)
            total = loss if total is None else total + loss
        return total

    def trainable_parameters(self):
        return self.parameters()
