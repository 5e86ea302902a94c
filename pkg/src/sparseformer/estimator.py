"""scikit-learn style wrapper: ``fit`` trains, ``predict`` completes depth."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import compute_metrics
from .model import ModelConfig
from .scenes import SceneConfig
from .training import TrainConfig, predict_depth, train_scenes
from .validation import check_scenes

__all__ = ["SparseFormerRegressor"]


class SparseFormerRegressor(RegressorMixin, BaseEstimator):
    """Dense depth from an image plus sparse landmarks.

    ``X`` is a list of :class:`~sparseformer.scenes.Scene`. ``fit`` uses each
    scene's dense ground truth and resamples landmark sets on the fly;
    ``predict`` uses the landmarks stored on the scenes.
    """

    def __init__(self, n_iter=20000, batch_size=8, learning_rate=1e-3, decay_interval=7000,
                 decay_factor=0.2, landmarks_min=2, landmarks_max=64, outlier_min=0.0,
                 outlier_max=0.2, encoder_channels=(16, 32, 64, 128),
                 decoder_channels=(64, 32, 16, 16), stem_channels=16, pe_bands=6,
                 attention_width=32, refine=True, refine_layers=2, refine_heads=2,
                 head_skip=True, d_min=1.0, d_max=10.0, sampling_bias=0.5, val_fraction=0.0,
                 random_state=0):
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay_interval = decay_interval
        self.decay_factor = decay_factor
        self.landmarks_min = landmarks_min
        self.landmarks_max = landmarks_max
        self.outlier_min = outlier_min
        self.outlier_max = outlier_max
        self.encoder_channels = encoder_channels
        self.decoder_channels = decoder_channels
        self.stem_channels = stem_channels
        self.pe_bands = pe_bands
        self.attention_width = attention_width
        self.refine = refine
        self.refine_layers = refine_layers
        self.refine_heads = refine_heads
        self.head_skip = head_skip
        self.d_min = d_min
        self.d_max = d_max
        self.sampling_bias = sampling_bias
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _configs(self, height, width):
        mc = ModelConfig(tuple(self.encoder_channels), tuple(self.decoder_channels),
                         self.stem_channels, self.pe_bands, self.attention_width, self.refine,
                         self.refine_layers, self.refine_heads, self.d_max, self.head_skip)
        tc = TrainConfig(iterations=self.n_iter, batch_size=self.batch_size, lr=self.learning_rate,
                         decay_interval=self.decay_interval, decay_factor=self.decay_factor,
                         landmarks_min=self.landmarks_min, landmarks_max=self.landmarks_max,
                         outlier_min=self.outlier_min, outlier_max=self.outlier_max,
                         val_fraction=self.val_fraction, val_every=max(1, self.n_iter),
                         checkpoint_every=max(1, self.n_iter), init_seed=self.random_state)
        sc = SceneConfig(height=height, width=width, d_min=self.d_min, d_max=self.d_max,
                         sampling_bias=self.sampling_bias, n_fixed=self.landmarks_max,
                         landmark_density=max(1.0, self.landmarks_min) / (height * width))
        return mc, tc, sc

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        H, W = scenes[0].gt_depth.shape
        mc, tc, sc = self._configs(H, W)
        state, rows = train_scenes(scenes, sc, tc, mc, seed=self.random_state)
        self.params_ = state.params
        self.model_config_ = mc
        self.training_log_ = rows
        self.n_iter_ = state.iteration
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        scenes = check_scenes(X, require_depth=False)
        return predict_depth(self.params_, self.model_config_, [s.image for s in scenes],
                             [s.landmarks for s in scenes], self.batch_size)

    def score(self, X, y=None) -> float:
        """Negative REL pooled over valid pixels (higher is better)."""
        scenes = check_scenes(X)
        pred = self.predict(scenes)
        rep = compute_metrics(pred, np.stack([s.gt_depth for s in scenes]),
                              np.stack([s.gt_valid for s in scenes]))
        return -rep.rel
