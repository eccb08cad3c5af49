"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from ..classifiers import DEFAULT_TEMPERATURE
from ..decoder import BackboneConfig, DecoderConfig
from ..inference import EnsembleParams
from ..model import DECOUPLED, ModelConfig


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = DECOUPLED
    # model
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    conv_layers: int = 2
    decoder_layers: int = 3
    heads: int = 4
    thing_queries: int = 12
    stuff_queries: int = 4
    deform_heads: int = 2
    deform_points: int = 4
    d_text: int = 16
    n_shared_prompts: int = 2
    n_specific_prompts: int = 4
    temperature: float = DEFAULT_TEMPERATURE
    clip_seed: int = 0
    # inference
    alpha: float = 0.2
    beta: float = 0.7
    score_threshold: float = 0.5
    overlap_threshold: float = 0.8
    # optimisation
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    lr_drops: str = "0.9,0.95"
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    diverge_factor: float = 1e3  # abort once a loss exceeds this multiple of the first
    eval_every: int = 0
    # data
    n_unseen: int = 2
    n_train: int = 48
    n_eval: int = 16
    noise: float = 0.1
    dataset_seed: int = 0

    def model_config(self):
        backbone = BackboneConfig(self.patch_size, self.embed_dim, self.conv_layers)
        decoder = DecoderConfig(d=self.embed_dim, d_text=self.d_text, layers=self.decoder_layers,
                                heads=self.heads, thing_queries=self.thing_queries,
                                stuff_queries=self.stuff_queries, deform_heads=self.deform_heads,
                                deform_points=self.deform_points, backbone=backbone)
        return ModelConfig(decoder=decoder, variant=self.variant,
                           n_shared_prompts=self.n_shared_prompts,
                           n_specific_prompts=self.n_specific_prompts,
                           temperature=self.temperature, clip_seed=self.clip_seed)

    def lr_at(self, step):
        """Learning rate with a x0.1 drop at each fraction of training listed in ``lr_drops``."""
        drops = [float(x) for x in self.lr_drops.split(",") if x.strip()]
        return self.lr * 0.1 ** sum(step >= f * self.steps for f in drops)

    def ensemble_params(self):
        return EnsembleParams(self.alpha, self.beta)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- text form ---------------------------------------------------------
    def dumps(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text, base=None):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return (base or cls()).override(values)

    @classmethod
    def load(cls, path, base=None):
        with open(path) as fh:
            return cls.loads(fh.read(), base)

    def override(self, values):
        """Copy with string (or typed) values coerced to each field's type."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            changes[key] = _coerce(value, types[key])
        return dataclasses.replace(self, **changes)


def _coerce(value, typ):
    if not isinstance(value, str):
        return value
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "bool":
        return value.lower() in ("1", "true", "yes", "on")
    return value
