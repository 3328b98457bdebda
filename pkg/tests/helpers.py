"""Shared builders and oracles for the test-suite."""
import contextlib
import math

import numpy as np

from procformer import tensor as T
from procformer.eventlog import Event, EventLog, Trace
from procformer.features import build_dataset

DAY = 86400


def make_trace(case_id, activities, days):
    return Trace(case_id, tuple(Event(a, case_id, int(round(d * DAY)))
                                for a, d in zip(activities, days)))


def variant_log(n_main=500, n_alt=100, main="ABCD", alt="ABED", step_hours=1.0):
    """Traces started one hour apart; every k-th is the alternative variant."""
    total = n_main + n_alt
    every = total // n_alt if n_alt else total + 1
    traces, n_alt_left = [], n_alt
    for i in range(total):
        use_alt = n_alt_left > 0 and i % every == every - 1
        n_alt_left -= use_alt
        acts = alt if use_alt else main
        start = i * step_hours / 24
        traces.append(make_trace(f"case{i:04d}", acts, [start + j / 48 for j in range(len(acts))]))
    return EventLog(tuple(traces), "synthetic")


def random_log(rng, n_traces, max_len=8, activities="ABCDEFG", max_gap_days=5.0):
    traces = []
    for i in range(n_traces):
        n = int(rng.integers(1, max_len + 1))
        gaps = rng.exponential(max_gap_days / 3, size=n)
        gaps[0] = rng.uniform(0, 100)
        days = np.cumsum(gaps)
        acts = [activities[j] for j in rng.integers(0, len(activities), size=n)]
        traces.append(make_trace(f"r{i}", acts, days))
    return EventLog(tuple(traces))


def finite_difference(loss_fn, tensor, index, step=1e-5):
    """Central difference of ``loss_fn()`` w.r.t. one coordinate of ``tensor``."""
    old = tensor.data[index]
    with T.no_grad():
        tensor.data[index] = old + step
        up = loss_fn().item()
        tensor.data[index] = old - step
        down = loss_fn().item()
    tensor.data[index] = old
    return (up - down) / (2 * step)


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(loss_fn, named_tensors, rng, per_tensor=None, step=1e-5):
    """Compare autodiff with central differences.

    Returns a list of (name, index, analytic, numeric, rel_error), one per
    checked coordinate. ``per_tensor=None`` checks every coordinate.
    """
    for _, t in named_tensors:
        t.grad = None
    T.backward(loss_fn())
    rows = []
    for name, t in named_tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = list(np.ndindex(t.shape))
        if per_tensor is not None and len(coords) > per_tensor:
            pick = rng.choice(len(coords), size=per_tensor, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            num = finite_difference(loss_fn, t, idx, step)
            rows.append((name, idx, float(grad[idx]), num, relative_error(grad[idx], num)))
    return rows


@contextlib.contextmanager
def kink_monitor():
    """Record the smallest distance of any relu input / max-pool winner to a kink."""
    margins = {"relu": np.inf, "maxpool": np.inf}
    relu, max_over_axis = T.relu, T.max_over_axis

    def relu_spy(x):
        margins["relu"] = min(margins["relu"], float(np.abs(x.data).min()))
        return relu(x)

    def max_spy(x, axis, mask=None):
        z = x.data if mask is None else np.where(np.broadcast_to(mask, x.shape), x.data, -np.inf)
        top2 = -np.partition(-z, 1, axis=axis).take([0, 1], axis=axis)
        gap = np.abs(top2.take(0, axis=axis) - top2.take(1, axis=axis))
        finite = gap[np.isfinite(gap)]
        if finite.size:
            margins["maxpool"] = min(margins["maxpool"], float(finite.min()))
        return max_over_axis(x, axis, mask)

    T.relu, T.max_over_axis = relu_spy, max_spy
    try:
        yield margins
    finally:
        T.relu, T.max_over_axis = relu, max_over_axis


def random_prefix_batch(rng, batch, max_len, vocab_size):
    """Left-aligned id matrix with prefix lengths in [1, max_len]."""
    ids = np.zeros((batch, max_len), dtype=np.int64)
    for b in range(batch):
        k = int(rng.integers(1, max_len + 1))
        ids[b, :k] = rng.integers(1, vocab_size + 2, size=k)
    return ids


def oracle_accuracy(pred, target):
    hits = 0
    for p, t in zip(pred, target):
        hits += p == t
    return hits / len(pred)


def oracle_weighted_f(pred, target):
    """Per-class F1 from explicit TP/FP/FN counts, weighted by target support."""
    classes = sorted(set(target) | set(pred))
    total, weighted = 0, 0.0
    for c in classes:
        tp = sum(1 for p, t in zip(pred, target) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, target) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, target) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        weighted += (tp + fn) * f
        total += tp + fn
    return weighted / total


def oracle_mae(pred, target):
    return math.fsum(abs(p - t) for p, t in zip(pred, target)) / len(pred)


def random_metric_instance(rng):
    n = int(rng.integers(1, 60))
    k = int(rng.integers(1, 8))
    target = rng.integers(0, k, size=n)
    pred = np.where(rng.random(n) < 0.5, target, rng.integers(0, k, size=n))
    return pred, target, k, rng.normal(0, 10, size=n), rng.normal(0, 10, size=n)


def check_feature_invariants(log, vocab, max_len):
    """Assert the per-sample feature invariants; returns the dataset."""
    ds = build_dataset(log, vocab, max_len)
    assert len(ds) == sum(max(len(t) - 1, 0) for t in log)
    by_case = {t.case_id: t for t in log}
    for s in ds.samples:
        fv1, fv2, fv3 = s.fv
        assert min(s.fv) >= 0
        assert fv3 >= fv1 and fv3 >= fv2
        assert 0 <= s.target_next_delta <= s.target_remaining
        assert all(i != 0 for i in s.encoded_prefix[:s.prefix_len])
        assert all(i == 0 for i in s.encoded_prefix[s.prefix_len:])
        labels = [vocab.decode(i) for i in s.encoded_prefix[:s.prefix_len]]
        assert labels == by_case[s.case_id].activities[:s.prefix_len]
    return ds
