"""scikit-learn style facade over the training harness."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .classifiers import default_vocabulary
from .harness.config import RunConfig
from .harness.train import build_model, train
from .inference import EnsembleParams, infer
from .metrics import Evaluator
from .validation import check_images, check_scenes


class OpenSDSegmenter(BaseEstimator):
    """Open-vocabulary panoptic segmenter trained on annotated scenes.

    ``fit`` takes a list of :class:`~opensd.harness.scenes.Scene`; ``predict``
    takes images (or scenes) and returns one ``TaskOutputs`` per image;
    ``score`` is panoptic quality.
    """

    def __init__(self, vocab=None, variant="decoupled", steps=2000, batch_size=4, lr=1e-3,
                 embed_dim=32, decoder_layers=3, thing_queries=12, stuff_queries=4,
                 alpha=0.2, beta=0.7, score_threshold=0.5, overlap_threshold=0.8, seed=0):
        self.vocab = vocab
        self.variant = variant
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.embed_dim = embed_dim
        self.decoder_layers = decoder_layers
        self.thing_queries = thing_queries
        self.stuff_queries = stuff_queries
        self.alpha = alpha
        self.beta = beta
        self.score_threshold = score_threshold
        self.overlap_threshold = overlap_threshold
        self.seed = seed

    def _config(self):
        params = self.get_params()
        params.pop("vocab")
        return RunConfig().replace(**params)

    def fit(self, X, y=None):
        cfg = self._config()
        vocab = self.vocab if self.vocab is not None else default_vocabulary(cfg.n_unseen)
        scenes = check_scenes(X, vocab, cfg.patch_size)
        result = train(cfg, scenes, vocab, model=build_model(cfg, vocab))
        self.vocab_ = vocab
        self.model_ = result.model
        self.loss_curve_ = result.losses
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        params = EnsembleParams(self.alpha, self.beta)
        use_out = self.alpha > 0 or self.beta > 0
        return [infer(self.model_, im, params, use_out, self.score_threshold,
                      self.overlap_threshold)
                for im in check_images(X, self._config().patch_size)]

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        scenes = check_scenes(X, self.vocab_)
        ev = Evaluator(self.vocab_)
        for out, scene in zip(self.predict(scenes), scenes):
            ev.add(out, scene)
        return ev.report().pq
