"""scikit-learn compatible wrapper around the trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .backbone import BackboneConfig, image_features
from .data import Dataset
from .model import ModelConfig
from .sci import sci_forward
from .trainer import VARIANTS, TrainConfig, fit, predict_proba
from .validation import check_images, check_labels


class CINClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained on pair batches with self- and cross-image channel interaction.

    ``variant`` picks one of the ablation presets (plain, sci, pos-sci,
    sci-cont, cin). Images are (n, s, s, 3) arrays with values in [0, 1].
    """

    def __init__(self, variant="cin", channels=(8, 16, 32), embed_dim=512, epochs=40, base_lr=0.02,
                 momentum=0.9, init_gain=2.449489742783178, clip_norm=2.0, lr_decay=0.5, lr_decay_every=20,
                 weight_decay=2e-4, alpha=2.0, beta=0.5, flip=False, random_state=0):
        self.variant = variant
        self.channels = channels
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.base_lr = base_lr
        self.momentum = momentum
        self.init_gain = init_gain
        self.clip_norm = clip_norm
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.beta = beta
        self.flip = flip
        self.random_state = random_state

    def _configs(self, size, n_classes):
        preset = VARIANTS[self.variant]
        channels = tuple(self.channels)
        mc = ModelConfig(BackboneConfig(input_size=size, channels=channels, stages=len(channels)),
                         n_classes, self.embed_dim, preset["use_sci"], preset["sci_variant"])
        tc = TrainConfig(epochs=self.epochs, base_lr=self.base_lr, lr_decay=self.lr_decay,
                         lr_decay_every=self.lr_decay_every, weight_decay=self.weight_decay,
                         momentum=self.momentum, init_gain=self.init_gain, clip_norm=self.clip_norm,
                         alpha=self.alpha, beta=self.beta, seed=self.random_state,
                         cci_enabled=preset["cci_enabled"], gates_forced_zero=preset["gates_forced_zero"],
                         flip=self.flip)
        return mc, tc

    def fit(self, X, y, eval_set=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        codes = self.label_encoder_.transform(y)
        self.model_config_, self.train_config_ = self._configs(X.shape[1], len(self.classes_))
        zeros = np.zeros(len(X), dtype=np.int64)
        train = Dataset(X, codes, zeros, len(self.classes_))
        val = None
        if eval_set is not None:
            Xv = check_images(eval_set[0], size=X.shape[1])
            yv = self.label_encoder_.transform(check_labels(eval_set[1], len(Xv)))
            val = Dataset(Xv, yv, np.zeros(len(Xv), dtype=np.int64), len(self.classes_))
        result = fit(train, val, self.model_config_, self.train_config_)
        self.params_ = result.best_params if val is not None else result.params
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, size=self.model_config_.backbone.input_size)
        return predict_proba(X, self.params_, self.model_config_)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def transform(self, X):
        """Spatially pooled features fed to the classifier, one row per image."""
        check_is_fitted(self, "params_")
        X = check_images(X, size=self.model_config_.backbone.input_size)
        fm = image_features(X, self.params_, self.model_config_.backbone)
        feats = sci_forward(fm, self.params_, self.model_config_.sci_variant).z if self.model_config_.use_sci else fm.spatial
        return T.pool_spatial_mean(feats).data
