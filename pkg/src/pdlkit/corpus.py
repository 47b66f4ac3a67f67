"""Ingestion of CASAS-style sensor event logs.

Raw logs are whitespace-delimited lines: date, time, sensor id, value,
and optionally an activity annotation ending in a ``begin``/``end`` marker.
This module parses them into :class:`SensorEvent` records, builds the
sensor-token vocabulary, slices the event stream into fixed-length sliding
windows, and handles day-based sampling and train/test splitting.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

PAD_TOKEN = "[PAD]"
MASK_TOKEN = "[MASK]"
CLS_TOKEN = "[CLS]"
UNK_TOKEN = "[UNK]"
SPECIAL_TOKENS = (PAD_TOKEN, MASK_TOKEN, CLS_TOKEN, UNK_TOKEN)

NO_LABEL = "No Label"

_TS_FORMATS = ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S")


@dataclass(slots=True)
class SensorEvent:
    """One timestamped sensor reading, optionally ground-truth labeled."""

    timestamp: dt.datetime
    sensor_id: str
    value: str
    truth_label: str = NO_LABEL

    @property
    def day_key(self) -> dt.date:
        return self.timestamp.date()


@dataclass
class ParseReport:
    """Outcome of one parse pass: counts, skipped lines, and warnings."""

    total_lines: int = 0
    parsed: int = 0
    skips: list[tuple[int, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def skip(self, line_no: int, reason: str) -> None:
        self.skips.append((line_no, reason))

    def warn(self, message: str) -> None:
        self.warnings.append(message)


def _parse_timestamp(date_s: str, time_s: str) -> dt.datetime | None:
    text = f"{date_s} {time_s}"
    for fmt in _TS_FORMATS:
        try:
            return dt.datetime.strptime(text, fmt)
        except ValueError:
            continue
    return None


def parse_event_log(lines) -> tuple[list[SensorEvent], ParseReport]:
    """Parse a line-oriented CASAS-style log into events.

    ``lines`` is any iterable of strings (an open file works). Well-formed
    lines become one event each, preserving input order; malformed lines are
    recorded in the report and skipped. Activity ``begin``/``end`` markers
    are expanded into per-event truth labels: an event inside one or more
    open activity spans is labeled with the most recently begun one, and
    events outside any span get ``"No Label"``. Occasional out-of-order
    timestamps are tolerated: the result is stably sorted, with a warning.
    """
    report = ParseReport()
    events: list[SensorEvent] = []
    open_spans: list[str] = []  # innermost (most recently begun) last

    for line_no, raw in enumerate(lines, start=1):
        report.total_lines += 1
        fields = raw.split()
        if not fields:
            continue
        if len(fields) < 4:
            report.skip(line_no, f"expected at least 4 fields, got {len(fields)}")
            continue
        ts = _parse_timestamp(fields[0], fields[1])
        if ts is None:
            report.skip(line_no, f"unparseable timestamp {fields[0]!r} {fields[1]!r}")
            continue
        sensor_id, value = fields[2], fields[3]
        if not sensor_id:
            report.skip(line_no, "empty sensor id")
            continue

        annotation = fields[4:]
        marker = annotation[-1].lower() if annotation else ""
        if marker == "begin":
            activity = " ".join(annotation[:-1])
            if activity:
                if activity in open_spans:
                    open_spans.remove(activity)
                open_spans.append(activity)
            else:
                report.warn(f"line {line_no}: begin marker without activity name")
        label = open_spans[-1] if open_spans else NO_LABEL
        if annotation and marker not in ("begin", "end"):
            # Direct per-event label with no span markers.
            label = " ".join(annotation)
        events.append(SensorEvent(ts, sensor_id, value, label))
        if marker == "end":
            activity = " ".join(annotation[:-1])
            if activity in open_spans:
                open_spans.remove(activity)
            else:
                report.warn(f"line {line_no}: end marker for activity not begun: {activity!r}")

    report.parsed = len(events)
    if not events and report.total_lines == 0:
        report.warn("empty input: no lines read")
        warnings.warn("parse_event_log: empty input", stacklevel=2)

    inversions = sum(
        1 for a, b in zip(events, events[1:]) if b.timestamp < a.timestamp
    )
    if inversions:
        report.warn(f"{inversions} out-of-order timestamps; stably sorted")
        events.sort(key=lambda e: e.timestamp)
    return events, report


def parse_event_file(path) -> tuple[list[SensorEvent], ParseReport]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_event_log(fh)


def discretize_value(value: str, bin_width: float = 1.0) -> str:
    """Map a sensor reading to its token suffix.

    Numeric readings (temperature) are floored to the nearest multiple of
    ``bin_width`` so the vocabulary stays finite; non-numeric readings
    (ON/OFF/OPEN/CLOSE) pass through unchanged.
    """
    try:
        v = float(value)
    except ValueError:
        return value
    binned = np.floor(v / bin_width) * bin_width
    if float(binned).is_integer():
        return str(int(binned))
    return f"{binned:g}"


def event_token(event: SensorEvent, bin_width: float = 1.0) -> str:
    return f"{event.sensor_id}_{discretize_value(event.value, bin_width)}"


@dataclass
class Vocabulary:
    """Bijective token <-> id map with the special tokens at the lowest ids."""

    token_to_id: dict[str, int]
    temperature_bin_width: float = 1.0

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("token ids must be exactly 0..size-1")
        for i, tok in enumerate(SPECIAL_TOKENS):
            if self.token_to_id.get(tok) != i:
                raise ValueError(f"special token {tok} must have id {i}")
        self.id_to_token = [None] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK_TOKEN]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def encode_event(self, event: SensorEvent) -> int:
        return self.id_for(event_token(event, self.temperature_bin_width))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "temperature_bin_width": self.temperature_bin_width,
                    "token_to_id": self.token_to_id,
                },
                fh,
                indent=2,
                sort_keys=True,
            )

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
        return cls(blob["token_to_id"], blob.get("temperature_bin_width", 1.0))


def build_vocabulary(events, temperature_bin_width: float = 1.0) -> Vocabulary:
    """One token per distinct (sensor, discretized value) pair, plus specials.

    Token order is lexicographic so the id assignment does not depend on
    event order. Unknown tokens at inference time map to ``[UNK]``.
    """
    if not events:
        raise ValueError("cannot build a vocabulary from zero events")
    seen = {event_token(e, temperature_bin_width) for e in events}
    token_to_id = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for offset, tok in enumerate(sorted(seen)):
        token_to_id[tok] = len(SPECIAL_TOKENS) + offset
    return Vocabulary(token_to_id, temperature_bin_width)


def tokenize_events(events, vocabulary: Vocabulary) -> np.ndarray:
    return np.array([vocabulary.encode_event(e) for e in events], dtype=np.int32)


def drop_temperature_events(events) -> list[SensorEvent]:
    """Filter out temperature readings (sensor ids starting with 'T')."""
    return [e for e in events if not e.sensor_id.startswith("T")]


@dataclass(frozen=True)
class Window:
    """A fixed-length run of sensor tokens with provenance into the event list."""

    window_id: int
    token_ids: np.ndarray
    start_event_index: int
    end_event_index: int
    day_key: dt.date


class WindowSet:
    """Columnar container for sliding windows.

    Stores the token matrix plus per-window provenance as parallel numpy
    arrays; indexing yields :class:`Window` views. Keeping this columnar
    matters at CASAS scale (hundreds of thousands of windows).
    """

    def __init__(self, token_ids, start_index, day, window_id):
        self.token_ids = np.asarray(token_ids, dtype=np.int32)
        self.start_index = np.asarray(start_index, dtype=np.int64)
        self.day = np.asarray(day)
        self.window_id = np.asarray(window_id, dtype=np.int64)
        n = len(self.token_ids)
        if not (len(self.start_index) == len(self.day) == len(self.window_id) == n):
            raise ValueError("column lengths disagree")

    @classmethod
    def empty(cls, length: int) -> "WindowSet":
        return cls(
            np.empty((0, length), dtype=np.int32),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype="U10"),
            np.empty(0, dtype=np.int64),
        )

    @property
    def length(self) -> int:
        return self.token_ids.shape[1]

    def __len__(self) -> int:
        return len(self.token_ids)

    def __getitem__(self, i: int) -> Window:
        start = int(self.start_index[i])
        return Window(
            window_id=int(self.window_id[i]),
            token_ids=self.token_ids[i],
            start_event_index=start,
            end_event_index=start + self.length - 1,
            day_key=dt.date.fromisoformat(str(self.day[i])),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "WindowSet":
        idx = np.asarray(indices, dtype=np.int64)
        return WindowSet(
            self.token_ids[idx], self.start_index[idx], self.day[idx], self.window_id[idx]
        )

    def days(self) -> list[dt.date]:
        return sorted(dt.date.fromisoformat(str(d)) for d in np.unique(self.day))

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                rec = {
                    "window_id": int(self.window_id[i]),
                    "day": str(self.day[i]),
                    "start": int(self.start_index[i]),
                    "token_ids": [int(t) for t in self.token_ids[i]],
                }
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "WindowSet":
        ids, starts, days, toks = [], [], [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                ids.append(rec["window_id"])
                starts.append(rec["start"])
                days.append(rec["day"])
                toks.append(rec["token_ids"])
        if not ids:
            raise ValueError(f"no windows in {path}")
        return cls(np.array(toks), np.array(starts), np.array(days), np.array(ids))


def make_windows(events, vocabulary: Vocabulary, length: int = 20, stride: int = 1) -> WindowSet:
    """Slide a fixed-length window over the tokenized event stream.

    Windows start at offsets 0, stride, 2*stride, ... giving
    ``floor((n - length) / stride) + 1`` windows for n >= length. A window
    is assigned to the calendar day of its first event.
    """
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be >= 1")
    ids = tokenize_events(events, vocabulary)
    n = len(ids)
    if n < length:
        warnings.warn(f"only {n} events for window length {length}: no windows", stacklevel=2)
        return WindowSet.empty(length)
    offsets = np.arange(0, n - length + 1, stride, dtype=np.int64)
    token_matrix = np.lib.stride_tricks.sliding_window_view(ids, length)[offsets].copy()
    event_days = np.array([e.day_key.isoformat() for e in events])
    return WindowSet(
        token_ids=token_matrix,
        start_index=offsets,
        day=event_days[offsets],
        window_id=np.arange(len(offsets), dtype=np.int64),
    )


def sample_windows(windows: WindowSet, fraction: float, seed: int) -> WindowSet:
    """Uniform sample without replacement, preserving original order."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(windows)
    if fraction == 1.0:
        return windows.subset(np.arange(n))
    size = int(fraction * n)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=size, replace=False)
    idx.sort()
    return windows.subset(idx)


@dataclass
class SplitPlan:
    """Train/test partition over whole calendar days."""

    train_days: set
    test_days: set
    seed: int

    def __post_init__(self):
        if self.train_days & self.test_days:
            raise ValueError("train and test days overlap")

    def assign(self, windows: WindowSet) -> tuple[WindowSet, WindowSet]:
        train_iso = {d.isoformat() for d in self.train_days}
        mask = np.array([str(d) in train_iso for d in windows.day])
        return windows.subset(np.nonzero(mask)[0]), windows.subset(np.nonzero(~mask)[0])

    def to_json(self) -> dict:
        return {
            "train_days": sorted(d.isoformat() for d in self.train_days),
            "test_days": sorted(d.isoformat() for d in self.test_days),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "SplitPlan":
        return cls(
            {dt.date.fromisoformat(d) for d in blob["train_days"]},
            {dt.date.fromisoformat(d) for d in blob["test_days"]},
            blob["seed"],
        )


def split_by_days(windows: WindowSet, train_ratio: float = 0.8, seed: int = 0) -> SplitPlan:
    """Pick train days uniformly at random; every window follows its day."""
    if not (0.0 < train_ratio < 1.0):
        raise ValueError(f"train_ratio must be in (0, 1), got {train_ratio}")
    days = windows.days()
    if len(days) < 2:
        raise ValueError(f"need at least 2 distinct days, got {len(days)}")
    n_train = int(np.floor(train_ratio * len(days) + 0.5))
    n_train = min(max(n_train, 1), len(days) - 1)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(days))
    train = {days[i] for i in perm[:n_train]}
    test = {days[i] for i in perm[n_train:]}
    return SplitPlan(train, test, seed)


def window_truth_labels(windows: WindowSet, events) -> list[str]:
    """Majority truth label over each window's covered events.

    Benchmarking helper only; ties go to the label appearing earliest in
    the window.
    """
    out = []
    length = windows.length
    for i in range(len(windows)):
        start = int(windows.start_index[i])
        span = [events[j].truth_label for j in range(start, start + length)]
        counts: dict[str, int] = {}
        for lab in span:
            counts[lab] = counts.get(lab, 0) + 1
        best = max(counts.items(), key=lambda kv: (kv[1], -span.index(kv[0])))
        out.append(best[0])
    return out


def write_events_csv(path, events) -> None:
    """Columnar events file: timestamp, sensor_id, value, truth_label."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "sensor_id", "value", "truth_label"])
        for e in events:
            writer.writerow(
                [e.timestamp.strftime("%Y-%m-%d %H:%M:%S.%f"), e.sensor_id, e.value, e.truth_label]
            )


def read_events_csv(path) -> list[SensorEvent]:
    events = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["timestamp", "sensor_id", "value", "truth_label"]:
            raise ValueError(f"unexpected events header in {path}: {header}")
        for row in reader:
            ts = dt.datetime.strptime(row[0], "%Y-%m-%d %H:%M:%S.%f")
            events.append(SensorEvent(ts, row[1], row[2], row[3]))
    return events
