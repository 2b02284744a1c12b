"""Scikit-learn style estimator wrapping the gaze-attention classifier.

``GazeAttentionClassifier`` exposes the training harness through the
familiar fit/predict surface so the model composes with pipelines,
`cross_val_score` and friends. Inputs are 5-D feature grids
(n_samples, T, H, W, F); optional per-sample gaze annotations
(n_samples, T, 2) supervise the latent distribution during fit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from gazelatent.gumbel import substream
from gazelatent.harness import EpsSchedule, learning_rate_at, OptimizerConfig
from gazelatent.model import (
    ModelConfig,
    init_params,
    minibatch_loss,
    precompute_priors,
    predict_batch,
)


def check_feature_grid(X) -> np.ndarray:
    """Validate a (n, T, H, W, F) float grid: 5-D, non-empty, finite."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 5:
        raise ValueError(f"expected a 5-D (n, T, H, W, F) array, got shape {X.shape}")
    if X.shape[0] == 0 or min(X.shape[1:]) < 1:
        raise ValueError(f"empty feature grid of shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature grid contains non-finite values")
    return X


def check_labels(y, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Validate labels; returns (encoded labels, sorted unique classes)."""
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels must be shaped ({n},), got {y.shape}")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least 2 classes")
    encoded = np.searchsorted(classes, y)
    return encoded.astype(np.int64), classes


def check_gaze(gaze, n: int, t: int, h: int, w: int) -> np.ndarray:
    gaze = np.asarray(gaze, dtype=np.int64)
    if gaze.shape != (n, t, 2):
        raise ValueError(f"gaze must be shaped ({n}, {t}, 2), got {gaze.shape}")
    if (gaze < 0).any() or (gaze[..., 0] >= h).any() or (gaze[..., 1] >= w).any():
        raise ValueError("gaze coordinates out of grid range")
    return gaze


class GazeAttentionClassifier(BaseEstimator, ClassifierMixin):
    """Classifier with a learned per-timestep gaze distribution and soft attention.

    Parameters mirror the training harness: the estimator mode picks how
    gradients reach the gaze network ('direct' perturb-and-map estimation,
    'gumbel-softmax' relaxation, 'gt-gaze' fixed annotations, 'none' for no
    attention). See the package README for the underlying machinery.
    """

    def __init__(self, estimator_mode="direct", trunk_width=16, gaze_hidden=16,
                 recog_hidden=32, lambda_kl=1.0, prior_blur=3, prior_floor=1e-3,
                 residual="multiplicative-residual", gaze_supervision="kl-qp",
                 learning_rate=0.05, momentum=0.9, weight_decay=4e-5,
                 iterations=2000, batch_size=32, draws=1,
                 eps_start=1000.0, eps_rate=1e-3, eps_floor=0.1, tau=2.0,
                 random_state=0):
        self.estimator_mode = estimator_mode
        self.trunk_width = trunk_width
        self.gaze_hidden = gaze_hidden
        self.recog_hidden = recog_hidden
        self.lambda_kl = lambda_kl
        self.prior_blur = prior_blur
        self.prior_floor = prior_floor
        self.residual = residual
        self.gaze_supervision = gaze_supervision
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.iterations = iterations
        self.batch_size = batch_size
        self.draws = draws
        self.eps_start = eps_start
        self.eps_rate = eps_rate
        self.eps_floor = eps_floor
        self.tau = tau
        self.random_state = random_state

    def fit(self, X, y, gaze=None):
        """Train on feature grids; ``gaze`` optionally anchors the latent prior."""
        X = check_feature_grid(X)
        n, t, h, w, f = X.shape
        y_enc, self.classes_ = check_labels(y, n)
        if gaze is not None:
            gaze = check_gaze(gaze, n, t, h, w)
        if self.estimator_mode == "gt-gaze" and gaze is None:
            raise ValueError("gt-gaze mode requires gaze annotations in fit")

        cfg = ModelConfig(
            t=t, h=h, w=w, feat=f, classes=int(self.classes_.size),
            trunk_width=self.trunk_width, gaze_hidden=self.gaze_hidden,
            recog_hidden=self.recog_hidden, lambda_kl=self.lambda_kl,
            prior_blur=self.prior_blur, prior_floor=self.prior_floor,
            residual=self.residual, gaze_supervision=self.gaze_supervision)
        opt = OptimizerConfig(lr=self.learning_rate, momentum=self.momentum,
                              weight_decay=self.weight_decay)
        eps_sched = EpsSchedule(start=self.eps_start, rate=self.eps_rate,
                                floor=self.eps_floor)

        params = init_params(cfg, self.random_state)
        velocity = params.zeros_like()
        priors = None
        if gaze is not None and self.estimator_mode in ("direct", "gumbel-softmax") \
                and self.gaze_supervision == "kl-qp":
            priors = precompute_priors(gaze, cfg)
        batch_rng = substream(self.random_state, 0xB4)
        history = []
        for it in range(self.iterations):
            idx = batch_rng.integers(0, n, size=min(self.batch_size, n))
            rng = substream(self.random_state, 0x17E, it)
            out = minibatch_loss(
                X[idx], y_enc[idx], None if gaze is None else gaze[idx],
                params, cfg, self.estimator_mode,
                eps=eps_sched.at(it) if self.estimator_mode == "direct" else None,
                tau=self.tau if self.estimator_mode == "gumbel-softmax" else None,
                rng=rng, draws=self.draws,
                priors=None if priors is None else priors[idx])
            lr = learning_rate_at(it, opt, self.iterations)
            for name, _ in params.items():
                g = out.grads[name] + opt.weight_decay * params[name]
                velocity[name] = opt.momentum * velocity[name] - lr * g
                params[name] = params[name] + velocity[name]
            history.append((it, out.loss, out.nll, out.kl))
        self.params_ = params
        self.config_ = cfg
        self.history_ = history
        return self

    def _check_fitted_grid(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise RuntimeError("estimator is not fitted; call fit first")
        X = check_feature_grid(X)
        cfg = self.config_
        if X.shape[1:] != (cfg.t, cfg.h, cfg.w, cfg.feat):
            raise ValueError(f"grid shape {X.shape[1:]} does not match the "
                             f"fitted dims {(cfg.t, cfg.h, cfg.w, cfg.feat)}")
        return X

    def predict(self, X):
        """Predicted class labels under deterministic MAP gaze."""
        X = self._check_fitted_grid(X)
        classes, _, _, _ = predict_batch(X, self.params_, self.config_,
                                         mode=self._predict_mode())
        return self.classes_[classes]

    def predict_proba(self, X):
        """Class probabilities under deterministic MAP gaze."""
        X = self._check_fitted_grid(X)
        _, _, _, logp = predict_batch(X, self.params_, self.config_,
                                      mode=self._predict_mode())
        return np.exp(logp)

    def predict_gaze(self, X):
        """Per-timestep MAP gaze cells, shaped (n, T, 2)."""
        X = self._check_fitted_grid(X)
        if self.estimator_mode in ("gt-gaze", "none"):
            raise RuntimeError(f"mode {self.estimator_mode!r} does not model gaze")
        _, gaze, _, _ = predict_batch(X, self.params_, self.config_, mode="direct")
        return gaze

    def attention_maps(self, X):
        """Soft attention maps at MAP gaze, shaped (n, T, H, W)."""
        X = self._check_fitted_grid(X)
        if self.estimator_mode in ("gt-gaze", "none"):
            raise RuntimeError(f"mode {self.estimator_mode!r} does not model gaze")
        _, _, attn, _ = predict_batch(X, self.params_, self.config_, mode="direct")
        return attn

    def _predict_mode(self) -> str:
        # gt-gaze has no test-time annotations here; none skips attention
        return "none" if self.estimator_mode in ("gt-gaze", "none") else "direct"
