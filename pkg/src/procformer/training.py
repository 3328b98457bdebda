"""Mini-batch Adam training with chronological validation and best-epoch selection."""
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import DivergedLoss, EmptyDataset, NonFiniteGradient
from .model import forward, init_params

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-2
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    validation_fraction: float = 0.2
    seed: int = 0
    shuffle_each_epoch: bool = True
    class_weight: str = None  # None or "balanced"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.class_weight not in (None, "balanced"):
            raise ValueError("class_weight must be None or 'balanced'")


class AdamState:
    def __init__(self, params):
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0


def adam_step(params, state, config):
    """One Adam update from the ``.grad`` buffers; gradients are zeroed afterwards."""
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NonFiniteGradient(name)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data = t.data - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        t.grad = None


def balanced_class_weights(targets, num_classes):
    """Inverse class frequency, normalised to mean 1 over the observed classes."""
    counts = np.bincount(targets, minlength=num_classes).astype(np.float64)
    w = np.ones(num_classes)
    seen = counts > 0
    w[seen] = 1.0 / counts[seen]
    w[seen] /= w[seen].mean()
    return w


@dataclass
class ArrayDataset:
    """Chronologically ordered training arrays (fv and regression y already scaled)."""

    ids: np.ndarray
    fv: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = None
    metric_name: str = ""
    train_indices: list = field(default_factory=list, repr=False)
    val_indices: list = field(default_factory=list, repr=False)

    @property
    def epochs_completed(self):
        return len(self.train_loss)

    def write_csv(self, stream, include_time=False):
        writer = csv.writer(stream, lineterminator="\n")
        cols = ["epoch", "train_loss", "val_loss", "val_metric"]
        writer.writerow(cols + (["seconds"] if include_time else []))
        for i in range(self.epochs_completed):
            row = [i, repr(self.train_loss[i]), repr(self.val_loss[i]), repr(self.val_metric[i])]
            writer.writerow(row + ([f"{self.seconds[i]:.3f}"] if include_time else []))

    def summary(self, include_time=False):
        d = {k: v for k, v in asdict(self).items()
             if k not in ("train_indices", "val_indices", "seconds")}
        d["epochs_completed"] = self.epochs_completed
        if include_time:
            d["seconds"] = self.seconds
        return d

    def write_json(self, stream, include_time=False):
        json.dump(self.summary(include_time), stream, indent=2, sort_keys=True)
        stream.write("\n")


def validation_split(n, fraction):
    """Indices of (fit, validation) portions: validation is the chronological tail."""
    n_val = int(math.floor(fraction * n))
    n_val = min(max(n_val, 1), n - 1)
    return np.arange(n - n_val), np.arange(n - n_val, n)


def _task_loss(out, y, config, class_weights):
    if config.task == "next_activity":
        return T.cross_entropy(out, y, class_weights)
    return T.log_cosh(out, T.Tensor(y))


def _val_metric(out_data, y, config, target_scale):
    if config.task == "next_activity":
        pred = out_data[:, 1:].argmax(axis=1) + 1
        return float(np.mean(pred == y))
    scale, shift = target_scale
    return float(np.mean(np.abs((out_data - y) * scale)))


def _batched_eval(params, model_config, ids, fv, y, class_weights, batch_size):
    outs, losses, sizes = [], [], []
    with T.no_grad():
        for start in range(0, len(ids), batch_size):
            sl = slice(start, start + batch_size)
            out = forward(ids[sl], fv[sl], params, model_config, training=False)
            outs.append(out.data)
            losses.append(_task_loss(out, y[sl], model_config, class_weights).item())
            sizes.append(len(ids[sl]))
    return np.concatenate(outs), float(np.average(losses, weights=sizes))


def train(dataset, model_config, train_config, target_scale=(1.0, 0.0), params=None):
    """Fit a model; returns (params from the best validation epoch, TrainReport).

    ``target_scale`` is the (std, mean) used to scale regression targets, so the
    validation MAE can be reported in days.
    """
    n = len(dataset)
    if n < 2:
        raise EmptyDataset(f"need at least 2 samples to train, got {n}")
    fit_idx, val_idx = validation_split(n, train_config.validation_fraction)
    params = init_params(model_config) if params is None else params
    state = AdamState(params)
    is_cls = model_config.task == "next_activity"
    class_weights = None
    if is_cls and train_config.class_weight == "balanced":
        class_weights = balanced_class_weights(dataset.y[fit_idx], model_config.num_tokens)

    report = TrainReport(metric_name="accuracy" if is_cls else "mae_days",
                         train_indices=fit_idx.tolist(), val_indices=val_idx.tolist())
    best_metric, best_snapshot = None, None
    shuffle_rng = T.make_rng(train_config.seed, 1)
    dropout_rng = T.make_rng(train_config.seed, 2)
    ids_v, fv_v, y_v = dataset.ids[val_idx], dataset.fv[val_idx], dataset.y[val_idx]

    for epoch in range(train_config.epochs):
        tic = time.perf_counter()
        order = shuffle_rng.permutation(fit_idx) if train_config.shuffle_each_epoch else fit_idx
        batch_losses, batch_sizes = [], []
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            out = forward(dataset.ids[idx], dataset.fv[idx], params, model_config,
                          training=True, rng=dropout_rng)
            loss = _task_loss(out, dataset.y[idx], model_config, class_weights)
            T.backward(loss)
            adam_step(params, state, train_config)
            batch_losses.append(loss.item())
            batch_sizes.append(len(idx))
        out_v, val_loss = _batched_eval(params, model_config, ids_v, fv_v, y_v,
                                        class_weights, train_config.batch_size)
        if not math.isfinite(val_loss):
            raise DivergedLoss(epoch, epoch - 1 if epoch else None)
        metric = _val_metric(out_v, y_v, model_config, target_scale)
        report.train_loss.append(float(np.average(batch_losses, weights=batch_sizes)))
        report.val_loss.append(val_loss)
        report.val_metric.append(metric)
        report.seconds.append(time.perf_counter() - tic)
        better = best_metric is None or (metric > best_metric if is_cls else metric < best_metric)
        if better:
            best_metric, best_snapshot = metric, params.snapshot()
            report.best_epoch = epoch
        logger.info("epoch %d: train_loss=%.5f val_loss=%.5f %s=%.5f", epoch,
                    report.train_loss[-1], val_loss, report.metric_name, metric)

    if best_snapshot is not None:
        params.restore(best_snapshot)
    return params, report
