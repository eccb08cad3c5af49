"""Training loop, evaluation helpers and run-directory persistence."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ..classifiers import Vocabulary, default_vocabulary
from ..inference import IN_VOCAB_ONLY, infer
from ..metrics import Evaluator
from ..model import OpenSDModel
from ..tensor import Adam, NonFiniteError, dump_checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .scenes import generate_dataset

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def build_vocabulary(cfg, path=None):
    return Vocabulary.load(path) if path else default_vocabulary(cfg.n_unseen)


def build_datasets(cfg, vocab):
    """Train scenes use seen categories only; eval scenes may contain every category."""
    train = generate_dataset(vocab, cfg.n_train, [cfg.dataset_seed, 0], size=cfg.image_size,
                             categories=vocab.train_ids, noise=cfg.noise)
    held = generate_dataset(vocab, cfg.n_eval, [cfg.dataset_seed, 1], size=cfg.image_size,
                            noise=cfg.noise, start_id=cfg.n_train)
    return train, held


def build_model(cfg, vocab):
    return OpenSDModel(cfg.model_config(), vocab, seed=cfg.seed)


def evaluate_model(model, scenes, params=IN_VOCAB_ONLY, use_out=None, score_threshold=0.5,
                   overlap_threshold=0.8, categories=None):
    """EvalReport of ``model`` on ``scenes``; the out-of-vocabulary branch runs only when needed."""
    if use_out is None:
        use_out = params.alpha > 0 or params.beta > 0
    ev = Evaluator(model.vocab)
    for scene in scenes:
        ev.add(infer(model, scene.pixels, params, use_out, score_threshold, overlap_threshold,
                     categories), scene)
    return ev.report()


@dataclass
class TrainResult:
    model: OpenSDModel
    losses: list
    reports: list = field(default_factory=list)
    seconds: float = 0.0

    def checkpoint_bytes(self):
        return dump_checkpoint(self.model.state_dict())


def train(cfg, train_scenes, vocab, eval_scenes=None, run_dir=None, model=None):
    """Adam over shuffled scenes, ``batch_size`` scenes per step.

    Raises :class:`TrainingDiverged` as soon as the loss or any intermediate
    value stops being finite, or the loss grows past ``diverge_factor`` times
    its first value (finite but runaway).
    """
    model = model or build_model(cfg, vocab)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
               grad_clip=cfg.grad_clip or None)
    order_rng = np.random.default_rng([cfg.seed, 1])
    order = []
    losses, reports = [], []
    start = time.perf_counter()
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        cfg.save(os.path.join(run_dir, "config.txt"))
        vocab.save(os.path.join(run_dir, "vocab.json"))
        save_checkpoint(os.path.join(run_dir, "initial.osd"), model.state_dict())
    for step in range(cfg.steps):
        opt.lr = cfg.lr_at(step)
        opt.zero_grad()
        value = 0.0
        for _ in range(cfg.batch_size):
            if not order:
                order = list(order_rng.permutation(len(train_scenes)))
            scene = train_scenes[order.pop(0)]
            try:
                loss = model.loss(scene) * (1.0 / cfg.batch_size)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
            except NonFiniteError as exc:
                last = losses[-1] if losses else None
                raise TrainingDiverged(
                    f"non-finite value at step {step} (scene {scene.image_id}): {exc}; "
                    f"last finite loss {last}") from exc
            value += loss.item()
        if losses and cfg.diverge_factor and value > cfg.diverge_factor * max(losses[0], 1.0):
            raise TrainingDiverged(
                f"loss diverged at step {step}: {value:.4g} exceeds "
                f"{cfg.diverge_factor:g} x first loss {losses[0]:.4g}")
        opt.step()
        losses.append(value)
        if cfg.eval_every and eval_scenes and (step + 1) % cfg.eval_every == 0:
            report = evaluate_model(model, eval_scenes, cfg.ensemble_params(),
                                    score_threshold=cfg.score_threshold,
                                    overlap_threshold=cfg.overlap_threshold)
            reports.append({"step": step + 1, **report.headline()})
            log.info("step %d loss %.4f pq %.4f", step + 1, value, report.pq)
    result = TrainResult(model, losses, reports, time.perf_counter() - start)
    if run_dir:
        save_checkpoint(os.path.join(run_dir, "checkpoint.osd"), model.state_dict())
        with open(os.path.join(run_dir, "loss_curve.json"), "w") as fh:
            json.dump({"loss": losses, "evals": reports}, fh)
    return result


def load_model(cfg, vocab, checkpoint_path):
    model = build_model(cfg, vocab)
    model.load_state_dict(load_checkpoint(checkpoint_path))
    return model


def load_run(run_dir):
    cfg = RunConfig.load(os.path.join(run_dir, "config.txt"))
    vocab = Vocabulary.load(os.path.join(run_dir, "vocab.json"))
    return cfg, vocab, load_model(cfg, vocab, os.path.join(run_dir, "checkpoint.osd"))
