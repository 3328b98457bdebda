"""Prefix datasets: k-prefix encodings, temporal features and task targets."""
import csv
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .eventlog import SECONDS_PER_DAY, build_vocabulary
from .exceptions import EmptyDataset, TraceTooLong, TraceTooShort

logger = logging.getLogger(__name__)

TASKS = ("next_activity", "next_time", "remaining_time")
FV_COLUMNS = ("fv_t1", "fv_t2", "fv_t3")
TARGET_COLUMNS = ("next_delta", "remaining")
SCALER_COLUMNS = FV_COLUMNS + TARGET_COLUMNS


def check_task(task):
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    return task


@dataclass(frozen=True)
class PrefixSample:
    encoded_prefix: tuple
    prefix_len: int
    fv: tuple
    target_activity: int
    target_next_delta: float
    target_remaining: float
    case_id: str
    last_timestamp: int = 0

    def target(self, task):
        if task == "next_activity":
            return self.target_activity
        if task == "next_time":
            return self.target_next_delta
        return self.target_remaining


def temporal_features(prefix):
    """(fv_t1, fv_t2, fv_t3) in days for the last event of ``prefix``.

    ``prefix`` is a Trace or a plain sequence of second timestamps.
    """
    ts = prefix.timestamps if hasattr(prefix, "timestamps") else list(prefix)
    n = len(ts)
    if n == 0:
        raise ValueError("temporal features need a non-empty prefix")
    last = ts[-1]
    fv1 = 0.0 if n == 1 else (last - ts[-2]) / SECONDS_PER_DAY
    fv2 = 0.0 if n <= 2 else (last - ts[-3]) / SECONDS_PER_DAY
    fv3 = 0.0 if n == 1 else (last - ts[0]) / SECONDS_PER_DAY
    return fv1, fv2, fv3


def generate_prefix_samples(trace, vocab, max_len):
    """One sample per k in [1, |trace|-1]."""
    n = len(trace)
    if n < 2:
        raise TraceTooShort(f"trace {trace.case_id!r} has {n} event(s); need at least 2")
    if n > max_len:
        raise TraceTooLong(f"trace {trace.case_id!r} has {n} events, max_len is {max_len}")
    ids = [vocab.encode(a) for a in trace.activities]
    ts = trace.timestamps
    samples = []
    for k in range(1, n):
        samples.append(PrefixSample(
            encoded_prefix=tuple(ids[:k]) + (0,) * (max_len - k),
            prefix_len=k,
            fv=temporal_features(ts[:k]),
            target_activity=ids[k],
            target_next_delta=(ts[k] - ts[k - 1]) / SECONDS_PER_DAY,
            target_remaining=(ts[-1] - ts[k - 1]) / SECONDS_PER_DAY,
            case_id=trace.case_id,
            last_timestamp=ts[k - 1],
        ))
    return samples


@dataclass
class Dataset:
    samples: list
    vocab_size: int
    max_len: int
    skipped_short: int = 0

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self):
        return np.array([s.encoded_prefix for s in self.samples], dtype=np.int64).reshape(
            len(self.samples), self.max_len)

    @property
    def fv(self):
        return np.array([s.fv for s in self.samples], dtype=np.float64).reshape(-1, 3)

    @property
    def prefix_len(self):
        return np.array([s.prefix_len for s in self.samples], dtype=np.int64)

    @property
    def X(self):
        """Estimator input: encoded ids followed by the raw fv columns (days)."""
        return np.hstack([self.ids.astype(np.float64), self.fv])

    def y(self, task):
        check_task(task)
        dtype = np.int64 if task == "next_activity" else np.float64
        return np.array([s.target(task) for s in self.samples], dtype=dtype)


def build_dataset(log, vocab, max_len):
    """All prefix samples of ``log``; length-1 traces are skipped and counted."""
    samples, skipped = [], 0
    for trace in log:
        if len(trace) < 2:
            skipped += 1
            continue
        samples.extend(generate_prefix_samples(trace, vocab, max_len))
    if skipped:
        logger.info("skipped %d trace(s) of length 1", skipped)
    return Dataset(samples, len(vocab), max_len, skipped)


def dump_samples(dataset, stream):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["case_id", "k", "prefix", *FV_COLUMNS,
                     "target_activity", "target_next_delta", "target_remaining"])
    for s in dataset.samples:
        writer.writerow([s.case_id, s.prefix_len, " ".join(map(str, s.encoded_prefix)),
                         *(repr(v) for v in s.fv), s.target_activity,
                         repr(s.target_next_delta), repr(s.target_remaining)])


class FeatureScaler(TransformerMixin, BaseEstimator):
    """Per-column standardisation with population std; constant columns get std 1."""

    def __init__(self, columns=None):
        self.columns = columns

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        if self.columns is not None and len(self.columns) != X.shape[1]:
            raise ValueError(f"{len(self.columns)} column names for {X.shape[1]} columns")
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        X = np.asarray(X, dtype=np.float64)
        return X * self.scale_ + self.mean_

    def subset(self, columns):
        """Scaler restricted to the named columns."""
        idx = [list(self.columns).index(c) for c in columns]
        out = FeatureScaler(columns=tuple(columns))
        out.mean_ = self.mean_[idx].copy()
        out.scale_ = self.scale_[idx].copy()
        out.n_features_in_ = len(idx)
        return out

    def to_dict(self):
        check_is_fitted(self)
        return {"columns": list(self.columns) if self.columns else None,
                "mean": self.mean_.tolist(), "scale": self.scale_.tolist()}

    @classmethod
    def from_dict(cls, d):
        out = cls(columns=tuple(d["columns"]) if d["columns"] else None)
        out.mean_ = np.array(d["mean"], dtype=np.float64)
        out.scale_ = np.array(d["scale"], dtype=np.float64)
        out.n_features_in_ = len(out.mean_)
        return out


def _sample_matrix(samples):
    return np.array([(*s.fv, s.target_next_delta, s.target_remaining) for s in samples],
                    dtype=np.float64).reshape(-1, len(SCALER_COLUMNS))


def fit_scaler(train_samples):
    if not train_samples:
        raise EmptyDataset("cannot fit a scaler on zero samples")
    return FeatureScaler(columns=SCALER_COLUMNS).fit(_sample_matrix(train_samples))


def apply_scaler(scaler, sample):
    """Scaled copy of ``sample`` (fv and both regression targets)."""
    row = scaler.transform(_sample_matrix([sample]))[0]
    return dataclasses.replace(sample, fv=tuple(row[:3]),
                               target_next_delta=row[3], target_remaining=row[4])


class PrefixEncoder(TransformerMixin, BaseEstimator):
    """Turn event logs into the estimator matrix ``[ids..., fv_t1, fv_t2, fv_t3]``.

    ``fit`` learns the activity vocabulary from the (training) log. ``max_len``
    should be the longest trace of the full log; when None the fitted log's
    maximum is used.
    """

    def __init__(self, max_len=None):
        self.max_len = max_len

    def fit(self, log, y=None):
        self.vocabulary_ = build_vocabulary(log)
        self.max_len_ = self.max_len or log.max_trace_length
        return self

    def dataset(self, log):
        check_is_fitted(self, "vocabulary_")
        return build_dataset(log, self.vocabulary_, self.max_len_)

    def transform(self, log):
        return self.dataset(log).X
