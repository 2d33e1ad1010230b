"""scikit-learn style wrappers around the functional training API.

``X`` is always a batch of normalized angular-delay samples shaped
``(n, 2, n_delay, n_antennas)``.  Flattened input ``(n, 2 * n_delay *
n_antennas)`` is accepted when the estimator already knows its dims.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigError
from .models import DECODER, CompressionConfig, build_model
from .training import TrainConfig, combine_datasets, evaluate, finetune, pretrain, train_single_task


def _check_samples(X, dims=None, name="X"):
    """Validate and reshape ``X`` to float32 ``(n, 2, rows, cols)``."""
    arr = np.asarray(X)
    if arr.ndim == 2 and dims is not None:
        arr = check_array(arr, dtype=np.float32)
        if arr.shape[1] != 2 * dims[0] * dims[1]:
            raise ValueError(f"{name} has {arr.shape[1]} features, expected {2 * dims[0] * dims[1]}")
        return arr.reshape(len(arr), 2, *dims)
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise ValueError(f"{name} must be shaped (n, 2, rows, cols), got {arr.shape}")
    flat = check_array(arr.reshape(len(arr), -1), dtype=np.float32)
    out = flat.reshape(arr.shape)
    if dims is not None and out.shape[2:] != tuple(dims):
        raise ValueError(f"{name} samples are {out.shape[2:]}, estimator was fitted on {tuple(dims)}")
    return out


class CsiAutoencoder(TransformerMixin, BaseEstimator):
    """One encoder/decoder pair trained on a single scenario.

    ``transform`` returns codewords, ``inverse_transform`` decodes them and
    ``predict`` reconstructs.  ``score`` is the negative NMSE in dB, so
    higher is better as scikit-learn expects.
    """

    def __init__(self, cr="1/4", learning_rate=1e-3, batch_size=200, epochs=1000, seed=0,
                 architecture="csinet"):
        self.cr = cr
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.architecture = architecture

    def _train_config(self, **changes):
        kw = dict(learning_rate=self.learning_rate, batch_size=self.batch_size,
                  epochs=self.epochs, seed=self.seed)
        kw.update(changes)
        return TrainConfig(**kw)

    def fit(self, X, y=None):
        X = _check_samples(X)
        cfg = CompressionConfig(X.shape[2], X.shape[3], self.cr)
        result = train_single_task(cfg, X, self._train_config(), architecture=self.architecture)
        self.model_ = result.model
        self.loss_curve_ = list(result.losses)
        self.n_features_in_ = cfg.input_size
        self.codeword_length_ = cfg.codeword_length
        return self

    @property
    def _dims(self):
        return self.model_.cfg.sample_shape[1:]

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encode(_check_samples(X, self._dims), batch_size=500)

    def inverse_transform(self, S):
        check_is_fitted(self, "model_")
        S = check_array(S, dtype=np.float32)
        if S.shape[1] != self.codeword_length_:
            raise ValueError(f"codewords have length {S.shape[1]}, expected {self.codeword_length_}")
        return self.model_.decode(S, batch_size=500)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.reconstruct(_check_samples(X, self._dims), batch_size=500)

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        return -evaluate(self.model_, _check_samples(X, self._dims))[1]


class SharedEncoderFeedback(TransformerMixin, BaseEstimator):
    """Shared encoder with one fine-tuned decoder per scenario label.

    ``fit(X, y)`` pre-trains on all samples, then fine-tunes a decoder per
    distinct label of ``y`` on the first ``finetune_size`` samples of that
    label (all of them when ``None``).  ``predict(X, y)`` routes each sample
    through its label's decoder.
    """

    def __init__(self, cr="1/4", pretrain_lr=1e-3, finetune_lr=1e-4, batch_size=200,
                 pretrain_epochs=1000, finetune_epochs=500, finetune_size=None, seed=0,
                 architecture="csinet"):
        self.cr = cr
        self.pretrain_lr = pretrain_lr
        self.finetune_lr = finetune_lr
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.finetune_size = finetune_size
        self.seed = seed
        self.architecture = architecture

    def fit(self, X, y):
        X = _check_samples(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must hold one scenario label per sample, got shape {y.shape}")
        if self.finetune_epochs >= self.pretrain_epochs:
            raise ConfigError("finetune_epochs must be smaller than pretrain_epochs")
        self.classes_ = np.unique(y)
        cfg = CompressionConfig(X.shape[2], X.shape[3], self.cr)
        model = build_model(cfg, seed=self.seed, architecture=self.architecture)
        groups = [X[y == label] for label in self.classes_]
        combined = combine_datasets(groups, self.seed)
        general = pretrain(model, combined, TrainConfig(self.pretrain_lr, self.batch_size,
                                                        self.pretrain_epochs, self.seed)).model
        self.model_ = general
        self.decoders_ = {}
        for label, group in zip(self.classes_, groups):
            subset = group if self.finetune_size is None else group[: self.finetune_size]
            tuned = finetune(general, subset, TrainConfig(self.finetune_lr, self.batch_size,
                                                          self.finetune_epochs, self.seed))
            self.decoders_[label.item()] = tuned.model.subset(DECODER)
        self.n_features_in_ = cfg.input_size
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encode(_check_samples(X, self.model_.cfg.sample_shape[1:]), batch_size=500)

    def _decoder_model(self, label):
        key = label.item() if hasattr(label, "item") else label
        if key not in self.decoders_:
            raise ValueError(f"unknown scenario label {label!r}; fitted on {list(self.decoders_)}")
        return self.model_.with_params(self.decoders_[key])

    def predict(self, X, y):
        check_is_fitted(self, "model_")
        X = _check_samples(X, self.model_.cfg.sample_shape[1:])
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must hold one scenario label per sample, got shape {y.shape}")
        out = np.empty_like(X)
        for label in np.unique(y):
            mask = y == label
            out[mask] = self._decoder_model(label).reconstruct(X[mask], batch_size=500)
        return out

    def score(self, X, y):
        """Negative mean NMSE (dB) over the scenario labels present in ``y``."""
        check_is_fitted(self, "model_")
        X = _check_samples(X, self.model_.cfg.sample_shape[1:])
        y = np.asarray(y)
        scores = [evaluate(self._decoder_model(label), X[y == label])[1] for label in np.unique(y)]
        return -float(np.mean(scores))
