"""scikit-learn compatible estimators around the transformer.

Input matrices have ``max_len + 3`` columns: the left-aligned activity ids of
a prefix (PAD = 0) followed by the raw temporal features in days. Use
:class:`procformer.features.PrefixEncoder` or ``Dataset.X`` to build them.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .exceptions import EmptyDataset
from .features import FV_COLUMNS, FeatureScaler
from .model import ModelConfig, forward, load_params, save_params
from .training import ArrayDataset, TrainConfig, train, validation_split

_PREDICT_BATCH = 512


def split_X(X):
    """Separate an estimator matrix into integer ids and the fv block."""
    X = check_array(X, dtype=np.float64)
    if X.shape[1] < 4:
        raise ValueError(f"expected at least 4 columns (ids + 3 temporal), got {X.shape[1]}")
    ids_f = X[:, :-3]
    ids = ids_f.astype(np.int64)
    if np.any(ids != ids_f) or np.any(ids < 0):
        raise ValueError("activity id columns must hold non-negative integers")
    return ids, X[:, -3:]


class _ProcessTransformerBase(BaseEstimator):
    task = None

    def _model_config(self, vocab_size, max_len):
        return ModelConfig(
            vocab_size=vocab_size, max_len=max_len, task=self.task,
            embed_dim=self.embed_dim, num_heads=self.num_heads, num_blocks=self.num_blocks,
            ff_hidden=self.ff_hidden, dropout_rate=self.dropout_rate,
            dense_units=tuple(self.dense_units), seed=self.seed)

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
            validation_fraction=self.validation_fraction, seed=self.seed,
            class_weight=getattr(self, "class_weight", None))

    def _fit(self, X, y):
        ids, fv = split_X(X)
        y = np.asarray(y)
        if len(y) != len(ids):
            raise ValueError(f"X has {len(ids)} rows but y has {len(y)}")
        vocab_size = self.vocab_size or int(ids.max())
        self.n_features_in_ = X.shape[1]
        self.config_ = self._model_config(vocab_size, ids.shape[1])
        if len(ids) < 2:
            raise EmptyDataset(f"need at least 2 samples to fit, got {len(ids)}")
        fit_idx, _ = validation_split(len(ids), self.validation_fraction)
        self.fv_scaler_ = FeatureScaler(columns=FV_COLUMNS).fit(fv[fit_idx])
        fv_s = self.fv_scaler_.transform(fv)
        y_t, target_scale = self._prepare_targets(y, fit_idx)
        self.params_, self.report_ = train(ArrayDataset(ids, fv_s, y_t), self.config_,
                                           self._train_config(), target_scale)
        return self

    def _raw_outputs(self, X):
        check_is_fitted(self, "params_")
        ids, fv = split_X(X)
        fv_s = self.fv_scaler_.transform(fv)
        outs = []
        with T.no_grad():
            for s in range(0, len(ids), _PREDICT_BATCH):
                sl = slice(s, s + _PREDICT_BATCH)
                outs.append(forward(ids[sl], fv_s[sl], self.params_, self.config_).data)
        return np.concatenate(outs) if outs else np.empty((0,))

    # -- persistence ------------------------------------------------------------

    def _scaler_payload(self):
        return {"fv": self.fv_scaler_.to_dict()}

    def save(self, path, vocabulary=(), extra=None):
        check_is_fitted(self, "params_")
        meta = {"estimator": type(self).__name__, "params": _jsonable(self.get_params()),
                "n_features_in": self.n_features_in_}
        meta.update(extra or {})
        save_params(self.params_, path, self.config_, vocabulary, self._scaler_payload(), meta)

    @classmethod
    def load(cls, path, expected_vocabulary=None):
        """Rebuild a fitted estimator; returns ``(estimator, ModelFile)``."""
        mf = load_params(path, expected_vocabulary)
        kind = _ESTIMATORS[mf.extra["estimator"]]
        est = kind(**mf.extra["params"])
        est.config_ = mf.config
        est.params_ = mf.params
        est.n_features_in_ = mf.extra["n_features_in"]
        est.fv_scaler_ = FeatureScaler.from_dict(mf.scaler["fv"])
        if "target" in mf.scaler:
            est.target_scaler_ = FeatureScaler.from_dict(mf.scaler["target"])
        return est, mf


class ProcessTransformerClassifier(ClassifierMixin, _ProcessTransformerBase):
    """Next-activity prediction.

    Parameters mirror the network and training hyperparameters. ``vocab_size``
    is the number of real activities V; when None it is taken as the largest
    id seen in ``fit``. ``class_weight="balanced"`` weights the loss by inverse
    class frequency.
    """

    task = "next_activity"

    def __init__(self, *, vocab_size=None, embed_dim=36, num_heads=4, num_blocks=1,
                 ff_hidden=64, dropout_rate=0.1, dense_units=(32, 128), epochs=100,
                 learning_rate=1e-2, batch_size=128, validation_fraction=0.2,
                 class_weight=None, seed=0):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_blocks = num_blocks
        self.ff_hidden = ff_hidden
        self.dropout_rate = dropout_rate
        self.dense_units = dense_units
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.class_weight = class_weight
        self.seed = seed

    def fit(self, X, y):
        self._fit(X, np.asarray(y, dtype=np.int64))
        self.classes_ = np.arange(self.config_.num_tokens)
        return self

    def _prepare_targets(self, y, fit_idx):
        if y.min() < 1:
            raise ValueError("next-activity targets must be activity ids >= 1")
        return y, (1.0, 0.0)

    def decision_function(self, X):
        return self._raw_outputs(X)

    def predict_proba(self, X):
        """Softmax over all ids with the PAD column fixed at 0."""
        z = self._raw_outputs(X)
        z[:, 0] = -np.inf
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self._raw_outputs(X)[:, 1:].argmax(axis=1) + 1


class ProcessTransformerRegressor(RegressorMixin, _ProcessTransformerBase):
    """Next-event-time or remaining-time regression; targets and outputs in days."""

    def __init__(self, *, task="remaining_time", vocab_size=None, embed_dim=36, num_heads=4,
                 num_blocks=1, ff_hidden=64, dropout_rate=0.1, dense_units=(32, 128),
                 epochs=100, learning_rate=1e-2, batch_size=128, validation_fraction=0.2,
                 seed=0):
        self.task = task
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_blocks = num_blocks
        self.ff_hidden = ff_hidden
        self.dropout_rate = dropout_rate
        self.dense_units = dense_units
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y):
        if self.task not in ("next_time", "remaining_time"):
            raise ValueError(f"regressor task must be next_time or remaining_time, got {self.task!r}")
        return self._fit(X, np.asarray(y, dtype=np.float64))

    def _prepare_targets(self, y, fit_idx):
        self.target_scaler_ = FeatureScaler(columns=(self.task,)).fit(y[fit_idx, None])
        y_s = self.target_scaler_.transform(y[:, None])[:, 0]
        return y_s, (float(self.target_scaler_.scale_[0]), float(self.target_scaler_.mean_[0]))

    def _scaler_payload(self):
        out = super()._scaler_payload()
        out["target"] = self.target_scaler_.to_dict()
        return out

    def predict(self, X):
        z = self._raw_outputs(X)
        return self.target_scaler_.inverse_transform(z[:, None])[:, 0]


_ESTIMATORS = {c.__name__: c for c in (ProcessTransformerClassifier, ProcessTransformerRegressor)}


def make_estimator(task, **params):
    if task == "next_activity":
        return ProcessTransformerClassifier(**params)
    return ProcessTransformerRegressor(task=task, **params)


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
