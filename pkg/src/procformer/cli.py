"""Command-line interface: ``procformer prepare|train|evaluate|predict``.

Exit codes: 0 success, 1 usage, 2 input data, 3 training divergence,
4 model-file incompatibility.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .estimator import ProcessTransformerClassifier, make_estimator
from .eventlog import (ActivityVocabulary, ColumnMapping, build_vocabulary, chronological_split,
                       format_timestamp, parse_csv, parse_timestamp)
from .evaluation import evaluate_per_prefix
from .exceptions import (DivergedLoss, EmptyInput, InputDataError, ModelFileError,
                         NonFiniteGradient, PrefixLongerThanMaxLen, TraceTooLong,
                         VersionMismatch)
from .features import TASKS, build_dataset, dump_samples, fit_scaler, temporal_features

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_MODEL = 0, 1, 2, 3, 4
MODEL_FILENAME = "model.ptf"
DEFAULT_TRAIN_FRACTION = 0.8

logger = logging.getLogger("procformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_mapping_flags(p):
    g = p.add_argument_group("column mapping")
    g.add_argument("--case-col", default=ColumnMapping.case_column)
    g.add_argument("--activity-col", default=ColumnMapping.activity_column)
    g.add_argument("--time-col", default=ColumnMapping.timestamp_column)
    g.add_argument("--time-format", default="iso8601",
                   help="'iso8601' (default), 'epoch' seconds or a strptime pattern")


def _add_split_flag(p):
    p.add_argument("--train-fraction", type=float, default=DEFAULT_TRAIN_FRACTION,
                   help="share of traces (by start time) in the train split")


def _add_common(p):
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (default: $PROCFORMER_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="procformer", allow_abbrev=False,
                     description="Transformer-based predictive process monitoring.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", allow_abbrev=False,
                       help="parse a log, split it and dump prefix samples")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=None)
    _add_split_flag(p)
    _add_mapping_flags(p)
    _add_common(p)

    p = sub.add_parser("train", allow_abbrev=False, help="train a model on the train split")
    p.add_argument("--log", required=True)
    p.add_argument("--task", choices=TASKS, default="next_activity")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=36)
    p.add_argument("--max-len", type=int, default=None,
                   help="padding length (default: longest trace in the log)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class-weight", choices=("none", "balanced"), default="none")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--model", default=None, help=f"model path (default: OUT/{MODEL_FILENAME})")
    p.add_argument("--timings", action="store_true",
                   help="add wall-clock seconds to the reports (breaks byte reproducibility)")
    _add_split_flag(p)
    _add_mapping_flags(p)
    _add_common(p)

    p = sub.add_parser("evaluate", allow_abbrev=False,
                       help="per-prefix evaluation on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", default=None, help="report directory (default: model directory)")
    p.add_argument("--split", choices=("test", "all"), default="test",
                   help="evaluate the chronological test split or every trace")
    _add_mapping_flags(p)
    _add_common(p)

    p = sub.add_parser("predict", allow_abbrev=False, help="predict for a single running case")
    p.add_argument("--model", required=True)
    p.add_argument("--prefix", required=True, help="comma-separated activity labels")
    p.add_argument("--timestamps", default=None,
                   help="comma-separated timestamps, one per activity")
    p.add_argument("--time-format", default="iso8601")
    p.add_argument("--top", type=int, default=5)
    _add_common(p)
    return parser


def read_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.lstrip("-").replace("-", "_")] = value
    return values


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config_file(args.config)
        except (OSError, UsageError) as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key, raw in values.items():
            if key not in known or key in ("config", "help"):
                parser.error(f"unknown config key {key!r}")
            action = known[key]
            if action.const is True and action.nargs == 0:
                value = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    value = action.type(raw) if action.type else raw
                except ValueError:
                    parser.error(f"bad value for config key {key!r}: {raw!r}")
            sub.set_defaults(**{key: value})
        args = parser.parse_args(argv)
    return args


def _mapping(args):
    return ColumnMapping(args.case_col, args.activity_col, args.time_col, args.time_format)


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("PROCFORMER_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def _write(path, writer):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer(fh)


def _write_json(path, obj):
    _write(path, lambda fh: (json.dump(obj, fh, indent=2, sort_keys=True), fh.write("\n")))


def _load_split(args):
    if not 0.0 < args.train_fraction < 1.0:
        raise UsageError(f"--train-fraction must lie in (0, 1), got {args.train_fraction}")
    log = parse_csv(args.log, _mapping(args))
    train_log, test_log = chronological_split(log, args.train_fraction)
    return log, train_log, test_log


def cmd_prepare(args):
    log, train_log, test_log = _load_split(args)
    vocab = build_vocabulary(train_log)
    max_len = args.max_len or log.max_trace_length
    train_ds = build_dataset(train_log, vocab, max_len)
    test_ds = build_dataset(test_log, vocab, max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "train_samples.csv", lambda fh: dump_samples(train_ds, fh))
    _write(out / "test_samples.csv", lambda fh: dump_samples(test_ds, fh))
    _write_json(out / "vocabulary.json", vocab.to_dict())
    if train_ds.samples:
        _write_json(out / "scaler.json", fit_scaler(train_ds.samples).to_dict())
    stats = log.statistics()
    stats.update({"train_traces": len(train_log), "test_traces": len(test_log),
                  "train_samples": len(train_ds), "test_samples": len(test_ds),
                  "skipped_single_event_traces": train_ds.skipped_short + test_ds.skipped_short,
                  "max_len": max_len})
    _write_json(out / "summary.json", stats)
    labels = {"cases": "Cases", "events": "Events", "activities": "Activities",
              "max_case_length": "Max case length", "avg_case_length": "Avg. case length",
              "max_case_duration": "Max case duration (days)",
              "avg_case_duration": "Avg. case duration (days)"}
    for key, label in labels.items():
        v = stats[key]
        print(f"{label:<28}{v:,.2f}" if isinstance(v, float) else f"{label:<28}{v:,}")
    print(f"{'Train / test traces':<28}{len(train_log):,} / {len(test_log):,}")
    return stats


def cmd_train(args):
    log, train_log, _ = _load_split(args)
    vocab = build_vocabulary(train_log)
    max_len = args.max_len or log.max_trace_length
    ds = build_dataset(train_log, vocab, max_len)
    est = make_estimator(
        args.task, vocab_size=len(vocab), num_heads=args.heads, embed_dim=args.embed_dim,
        epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed,
        **({"class_weight": None if args.class_weight == "none" else args.class_weight}
           if args.task == "next_activity" else {}))
    try:
        est.fit(ds.X, ds.y(args.task))
    except DivergedLoss as exc:
        print(f"training diverged at epoch {exc.epoch}; last finite epoch: "
              f"{exc.last_finite_epoch}", file=sys.stderr)
        raise
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = Path(args.model) if args.model else out / MODEL_FILENAME
    mapping = _mapping(args)
    est.save(model_path, vocab.labels, extra={
        "train_fraction": args.train_fraction,
        "mapping": {"case_column": mapping.case_column,
                    "activity_column": mapping.activity_column,
                    "timestamp_column": mapping.timestamp_column,
                    "timestamp_format": mapping.timestamp_format},
    })
    report = est.report_
    _write(out / "train_report.csv", lambda fh: report.write_csv(fh, args.timings))
    _write(out / "train_report.json", lambda fh: report.write_json(fh, args.timings))
    if report.epochs_completed:
        best = report.best_epoch
        print(f"best epoch {best}: validation {report.metric_name} = "
              f"{report.val_metric[best]:.4f}")
    else:
        print("no epochs run; saved initial weights")
    print(f"model written to {model_path}")
    return est


def cmd_evaluate(args):
    est, mf = ProcessTransformerClassifier.load(args.model)
    stored = mf.extra.get("mapping")
    mapping = ColumnMapping(**stored) if stored and not _mapping_overridden(args) else _mapping(args)
    log = parse_csv(args.log, mapping)
    if args.split == "test":
        train_log, eval_log = chronological_split(
            log, mf.extra.get("train_fraction", DEFAULT_TRAIN_FRACTION))
        if list(build_vocabulary(train_log).labels) != list(mf.vocabulary):
            raise VersionMismatch(f"{args.model}: activity vocabulary of this log's train "
                                  "split differs from the model's")
    else:
        eval_log = log
    vocab = ActivityVocabulary(tuple(mf.vocabulary))
    ds = build_dataset(eval_log, vocab, max(mf.config.max_len, eval_log.max_trace_length))
    report = evaluate_per_prefix(est, ds, mf.config.task)
    out = Path(args.out) if args.out else Path(args.model).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "eval_report.json", report.write_json)
    _write(out / "eval_report.csv", report.write_csv)
    for name in report.metric_names:
        print(f"{name} (averaged over k): {report.averaged[name]:.4f}   "
              f"(pooled: {report.overall[name]:.4f})")
    return report


def _mapping_overridden(args):
    defaults = ColumnMapping()
    return (args.case_col, args.activity_col, args.time_col, args.time_format) != (
        defaults.case_column, defaults.activity_column, defaults.timestamp_column,
        defaults.timestamp_format)


def cmd_predict(args):
    est, mf = ProcessTransformerClassifier.load(args.model)
    vocab = ActivityVocabulary(tuple(mf.vocabulary))
    labels = [s.strip() for s in args.prefix.split(",") if s.strip()]
    if not labels:
        raise UsageError("--prefix needs at least one activity")
    if len(labels) > mf.config.max_len:
        raise PrefixLongerThanMaxLen(
            f"prefix has {len(labels)} events, model max_len is {mf.config.max_len}")
    if args.timestamps:
        ts = [parse_timestamp(s, args.time_format) for s in args.timestamps.split(",")]
        if len(ts) != len(labels):
            raise UsageError("--timestamps must have one entry per prefix activity")
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise InputDataError("prefix timestamps must be non-decreasing")
    elif mf.config.task != "next_activity":
        raise UsageError("time tasks need --timestamps")
    else:
        ts = [0] * len(labels)
    ids = [vocab.encode(a) for a in labels]
    row = np.array([ids + [0] * (mf.config.max_len - len(ids)) + list(temporal_features(ts))],
                   dtype=np.float64)
    result = {"task": mf.config.task, "prefix": labels}
    if mf.config.task == "next_activity":
        proba = est.predict_proba(row)[0]
        order = np.argsort(-proba[1:], kind="stable")[: args.top] + 1
        result["top"] = [{"activity": vocab.decode(int(i)), "probability": float(proba[i])}
                         for i in order]
    else:
        days = float(est.predict(row)[0])
        result["clamped"] = days < 0
        days = max(days, 0.0)
        result["days"] = days
        if mf.config.task == "next_time":
            result["timestamp"] = format_timestamp(int(round(ts[-1] + days * 86400.0)))
    print(json.dumps(result, indent=2))
    return result


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train,
            "evaluate": cmd_evaluate, "predict": cmd_predict}


def main(argv=None):
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads(args)):
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"procformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergedLoss, NonFiniteGradient) as exc:
        print(f"procformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ModelFileError as exc:
        print(f"procformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (InputDataError, EmptyInput, PrefixLongerThanMaxLen, TraceTooLong,
            FileNotFoundError) as exc:
        print(f"procformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
