"""Event-log ingestion: CSV parsing, chronological splitting and vocabularies."""
import csv
import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

from dateutil.parser import isoparse

from .exceptions import BadTimestamp, DegenerateSplit, EmptyLog, InputDataError, MissingColumn

SECONDS_PER_DAY = 86400.0

DEFAULT_CASE_COLUMN = "case:concept:name"
DEFAULT_ACTIVITY_COLUMN = "concept:name"
DEFAULT_TIMESTAMP_COLUMN = "time:timestamp"


@dataclass(frozen=True)
class Event:
    activity: str
    case_id: str
    timestamp: int  # whole seconds since the Unix epoch, UTC
    extra_attributes: tuple = ()

    def __post_init__(self):
        if not self.activity:
            raise ValueError("event activity must be non-empty")


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple

    def __post_init__(self):
        if not self.events:
            raise ValueError(f"trace {self.case_id!r} is empty")
        prev = None
        for e in self.events:
            if e.case_id != self.case_id:
                raise ValueError(f"event of case {e.case_id!r} inside trace {self.case_id!r}")
            if prev is not None and e.timestamp < prev:
                raise ValueError(f"trace {self.case_id!r} has decreasing timestamps")
            prev = e.timestamp

    def __len__(self):
        return len(self.events)

    @property
    def activities(self):
        return [e.activity for e in self.events]

    @property
    def timestamps(self):
        return [e.timestamp for e in self.events]

    @property
    def start(self):
        return self.events[0].timestamp

    def prefix(self, k):
        return Trace(self.case_id, self.events[:k])


@dataclass(frozen=True)
class EventLog:
    traces: tuple
    source_name: str = "<memory>"

    def __post_init__(self):
        seen = set()
        for t in self.traces:
            if t.case_id in seen:
                raise ValueError(f"duplicate case id {t.case_id!r}")
            seen.add(t.case_id)

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    @property
    def num_events(self):
        return sum(len(t) for t in self.traces)

    @property
    def activities(self):
        return sorted({e.activity for t in self.traces for e in t.events})

    @property
    def max_trace_length(self):
        return max((len(t) for t in self.traces), default=0)

    def statistics(self):
        """Descriptive statistics; durations in days."""
        lengths = [len(t) for t in self.traces]
        durations = [(t.events[-1].timestamp - t.start) / SECONDS_PER_DAY for t in self.traces]
        n = len(self.traces)
        return {
            "cases": n,
            "events": self.num_events,
            "activities": len(self.activities),
            "max_case_length": max(lengths, default=0),
            "avg_case_length": sum(lengths) / n if n else 0.0,
            "max_case_duration": max(durations, default=0.0),
            "avg_case_duration": sum(durations) / n if n else 0.0,
        }


@dataclass(frozen=True)
class ColumnMapping:
    case_column: str = DEFAULT_CASE_COLUMN
    activity_column: str = DEFAULT_ACTIVITY_COLUMN
    timestamp_column: str = DEFAULT_TIMESTAMP_COLUMN
    timestamp_format: str = "iso8601"  # "iso8601", "epoch" (unix seconds) or a strptime pattern

    def __post_init__(self):
        cols = (self.case_column, self.activity_column, self.timestamp_column)
        if len(set(cols)) != 3:
            raise ValueError(f"case, activity and timestamp columns must be distinct: {cols}")


def parse_timestamp(value, fmt="iso8601"):
    """Parse ``value`` to whole UTC seconds. Naive times are taken as UTC."""
    value = value.strip()
    if fmt == "epoch":
        return math.floor(float(value))
    if fmt == "iso8601":
        dt = isoparse(value)
    else:
        dt = datetime.strptime(value, fmt)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return math.floor(dt.timestamp())


def format_timestamp(seconds):
    return datetime.fromtimestamp(seconds, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S+00:00")


def parse_csv(source, mapping=None, source_name=None):
    """Read an event log from a CSV byte stream, text stream or path.

    Events are grouped by case and sorted by timestamp within each case,
    keeping file order for equal timestamps.
    """
    mapping = mapping or ColumnMapping()
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        source_name = source_name or str(source)
        with open(source, "rb") as fh:
            return parse_csv(fh, mapping, source_name)
    source_name = source_name or getattr(source, "name", "<stream>")
    if isinstance(source, io.TextIOBase):
        text = source
    else:
        text = io.TextIOWrapper(source, encoding="utf-8-sig", newline="")
    reader = csv.DictReader(text)
    header = reader.fieldnames
    if not header:
        raise EmptyLog(f"{source_name}: EmptyLog, file has no header or rows")
    for col in (mapping.case_column, mapping.activity_column, mapping.timestamp_column):
        if col not in header:
            raise MissingColumn(f"{source_name}: column {col!r} not found in header {header}")
    extra_cols = [c for c in header
                  if c not in (mapping.case_column, mapping.activity_column,
                               mapping.timestamp_column)]

    cases = {}
    n_rows = 0
    for row in reader:
        n_rows += 1
        line = reader.line_num
        raw_ts = row[mapping.timestamp_column]
        try:
            ts = parse_timestamp(raw_ts or "", mapping.timestamp_format)
        except (ValueError, OverflowError):
            raise BadTimestamp(line, raw_ts, source_name) from None
        case = row[mapping.case_column]
        activity = row[mapping.activity_column]
        if not activity:
            raise InputDataError(f"{source_name}:{line}: empty activity label")
        extras = tuple((c, row[c] or "") for c in extra_cols)
        cases.setdefault(case, []).append(Event(activity, case, ts, extras))
    if n_rows == 0:
        raise EmptyLog(f"{source_name}: EmptyLog, no event rows")

    traces = tuple(
        Trace(case, tuple(sorted(events, key=lambda e: e.timestamp)))  # sort is stable
        for case, events in cases.items()
    )
    return EventLog(traces, source_name)


def write_csv(log, stream, mapping=None):
    """Serialize ``log`` as CSV text (inverse of :func:`parse_csv`)."""
    mapping = mapping or ColumnMapping()
    extra = []
    for t in log.traces:
        for e in t.events:
            for k, _ in e.extra_attributes:
                if k not in extra:
                    extra.append(k)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow([mapping.case_column, mapping.activity_column,
                     mapping.timestamp_column, *extra])
    for t in log.traces:
        for e in t.events:
            attrs = dict(e.extra_attributes)
            writer.writerow([e.case_id, e.activity, format_timestamp(e.timestamp),
                             *(attrs.get(k, "") for k in extra)])


def chronological_split(log, train_fraction=0.8):
    """Split whole traces by case start time into (train, test) logs."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(log) == 0:
        raise EmptyLog("cannot split an empty log")
    ordered = sorted(log.traces, key=lambda t: (t.start, t.case_id))
    n_train = math.ceil(train_fraction * len(ordered))
    if n_train == 0 or n_train == len(ordered):
        raise DegenerateSplit(
            f"{len(ordered)} traces with train_fraction={train_fraction} leaves one side empty")
    return (EventLog(tuple(ordered[:n_train]), log.source_name + "[train]"),
            EventLog(tuple(ordered[n_train:]), log.source_name + "[test]"))


@dataclass(frozen=True)
class ActivityVocabulary:
    """Activity labels mapped to ids 1..V, with PAD=0 and UNK=V+1."""

    labels: tuple
    _index: dict = field(init=False, repr=False, compare=False)

    PAD = 0
    PAD_LABEL = "<PAD>"
    UNK_LABEL = "<UNK>"

    def __post_init__(self):
        object.__setattr__(self, "_index", {a: i + 1 for i, a in enumerate(self.labels)})

    def __len__(self):
        return len(self.labels)

    @property
    def unk(self):
        return len(self.labels) + 1

    @property
    def num_tokens(self):
        return len(self.labels) + 2

    def encode(self, label):
        return self._index.get(label, self.unk)

    def decode(self, idx):
        if idx == self.PAD:
            return self.PAD_LABEL
        if idx == self.unk:
            return self.UNK_LABEL
        return self.labels[idx - 1]

    def to_dict(self):
        d = {self.PAD_LABEL: 0}
        d.update(self._index)
        d[self.UNK_LABEL] = self.unk
        return d


def build_vocabulary(train):
    return ActivityVocabulary(tuple(sorted({e.activity for t in train for e in t.events})))
