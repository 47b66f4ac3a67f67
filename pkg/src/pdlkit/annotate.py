"""Centroid sample selection, annotation sessions, and label propagation.

The human-in-the-loop surface: pick the most confidently assigned windows
of every cluster, schedule them for a fixed number of raters, collect
ratings, derive per-cluster majority labels, propagate those to every
assigned window, and finally re-annotate the raw event stream through
covering-window majority.
"""

from __future__ import annotations

import datetime as dt
import json
import os
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import NO_LABEL, SensorEvent, WindowSet
from .evaluation import ClusterLabelEntry, ClusterLabelMap, LabelHierarchy, OTHER_LABEL
from .scan import AssignmentSet


@dataclass
class CentroidSample:
    """One high-confidence window of a cluster, shown to raters."""

    window_id: int
    cluster_id: int
    confidence: float
    events: list[SensorEvent] | None = None


def select_centroids(assignments: AssignmentSet, m: int) -> list[CentroidSample]:
    """The m most confidently assigned windows per cluster.

    Ties go to the lower window id. Clusters with fewer than m members
    yield what they have, with a warning.
    """
    if m <= 0:
        raise ValueError(f"m must be positive, got {m}")
    samples: list[CentroidSample] = []
    for c in range(assignments.k):
        rows = np.nonzero(assignments.cluster_ids == c)[0]
        if len(rows) == 0:
            warnings.warn(f"cluster {c} is empty: no centroid samples", stacklevel=2)
            continue
        order = sorted(rows, key=lambda i: (-assignments.confidences[i], assignments.window_ids[i]))
        if len(order) < m:
            warnings.warn(
                f"cluster {c} has only {len(order)} windows for m={m}", stacklevel=2
            )
        for i in order[:m]:
            samples.append(
                CentroidSample(
                    window_id=int(assignments.window_ids[i]),
                    cluster_id=c,
                    confidence=float(assignments.confidences[i]),
                )
            )
    return samples


def attach_event_payloads(samples, windows: WindowSet, events) -> None:
    """Fill each sample with the raw events its window covers."""
    row_of = {int(w): i for i, w in enumerate(windows.window_id)}
    for s in samples:
        row = row_of[s.window_id]
        start = int(windows.start_index[row])
        s.events = [events[j] for j in range(start, start + windows.length)]


@dataclass
class RatingRecord:
    sample_id: int
    rater_id: str
    label: str


@dataclass
class AnnotationSession:
    """State of one labeling round: samples in randomized order plus ratings."""

    session_id: str
    dataset_id: str
    samples: list[CentroidSample]
    raters_per_sample: int
    submissions: list[RatingRecord] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {s.window_id: s for s in self.samples}
        if len(self._by_id) != len(self.samples):
            raise ValueError("duplicate sample ids in session")

    @property
    def schedule_size(self) -> int:
        return len(self.samples) * self.raters_per_sample

    def sample_by_id(self, sample_id: int) -> CentroidSample:
        try:
            return self._by_id[int(sample_id)]
        except KeyError:
            raise KeyError(f"sample {sample_id} not in session") from None

    def ratings_for(self, sample_id: int) -> dict[str, str]:
        sid = int(sample_id)
        return {r.rater_id: r.label for r in self.submissions if r.sample_id == sid}

    def record(self, sample_id: int, rater_id: str, label: str, hierarchy: LabelHierarchy) -> str | None:
        """Record (or idempotently replace) one rating; returns the prior label."""
        sample = self.sample_by_id(sample_id)
        if label != OTHER_LABEL and label not in hierarchy:
            raise ValueError(f"label not in hierarchy: {label!r}")
        prior = None
        for r in self.submissions:
            if r.sample_id == sample.window_id and r.rater_id == rater_id:
                prior = r.label
                r.label = label
                return prior
        self.submissions.append(RatingRecord(sample.window_id, rater_id, label))
        return prior

    def next_for(self, rater_id: str) -> CentroidSample | None:
        """First sample this rater has not labeled and that still needs ratings."""
        for s in self.samples:
            ratings = self.ratings_for(s.window_id)
            if rater_id in ratings:
                continue
            if len(ratings) < self.raters_per_sample:
                return s
        return None

    def progress(self) -> dict:
        per_cluster: Counter = Counter(
            self.sample_by_id(r.sample_id).cluster_id for r in self.submissions
        )
        return {
            "submitted": len(self.submissions),
            "scheduled": self.schedule_size,
            "per_cluster": {str(c): per_cluster[c] for c in sorted(per_cluster)},
            "complete": len(self.submissions) >= self.schedule_size,
        }

    def clusters(self) -> list[int]:
        return sorted({s.cluster_id for s in self.samples})

    def to_json(self) -> dict:
        def event_blob(e: SensorEvent) -> list:
            return [e.timestamp.strftime("%Y-%m-%d %H:%M:%S.%f"), e.sensor_id, e.value, e.truth_label]

        return {
            "v": 1,
            "session_id": self.session_id,
            "dataset_id": self.dataset_id,
            "raters_per_sample": self.raters_per_sample,
            "samples": [
                {
                    "window_id": s.window_id,
                    "cluster_id": s.cluster_id,
                    "confidence": s.confidence,
                    "events": [event_blob(e) for e in s.events] if s.events else None,
                }
                for s in self.samples
            ],
            "submissions": [
                {"sample_id": r.sample_id, "rater_id": r.rater_id, "label": r.label}
                for r in self.submissions
            ],
        }

    @classmethod
    def from_json(cls, blob: dict) -> "AnnotationSession":
        samples = []
        for s in blob["samples"]:
            events = None
            if s.get("events"):
                events = [
                    SensorEvent(
                        dt.datetime.strptime(e[0], "%Y-%m-%d %H:%M:%S.%f"), e[1], e[2], e[3]
                    )
                    for e in s["events"]
                ]
            samples.append(
                CentroidSample(s["window_id"], s["cluster_id"], s["confidence"], events)
            )
        session = cls(
            session_id=blob["session_id"],
            dataset_id=blob["dataset_id"],
            samples=samples,
            raters_per_sample=blob["raters_per_sample"],
        )
        session.submissions = [
            RatingRecord(r["sample_id"], r["rater_id"], r["label"]) for r in blob["submissions"]
        ]
        return session

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "AnnotationSession":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def create_session(
    samples,
    rater_count_per_sample: int,
    seed: int,
    session_id: str = "session",
    dataset_id: str = "",
) -> AnnotationSession:
    """Deterministically shuffled session scheduling each sample for
    ``rater_count_per_sample`` distinct raters."""
    if not samples:
        raise ValueError("no samples to annotate")
    if rater_count_per_sample < 1:
        raise ValueError("rater_count_per_sample must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    return AnnotationSession(
        session_id=session_id,
        dataset_id=dataset_id,
        samples=[samples[i] for i in order],
        raters_per_sample=rater_count_per_sample,
    )


def _modal_label(labels: list[str], hierarchy: LabelHierarchy) -> tuple[str, int]:
    """Modal label; ties level-up once (children merge into tied parents),
    then fall back to the lexicographically smallest."""
    counts = Counter(labels)
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if len(tied) == 1:
        return tied[0], top
    tied_set = set(tied)
    remap = {}
    for cand in tied:
        if cand in hierarchy:
            parent = hierarchy.level_up(cand)
            if parent in tied_set:
                remap[cand] = parent
    if remap:
        merged = Counter(remap.get(lab, lab) for lab in labels)
        top2 = max(merged.values())
        tied2 = sorted(c for c, n in merged.items() if n == top2)
        return tied2[0], top2
    return tied[0], top


def cluster_majority_labels(session: AnnotationSession, hierarchy: LabelHierarchy) -> ClusterLabelMap:
    """Per-cluster modal label over its submitted ratings.

    A 5/5 specificity split (child vs its parent label) merges into the
    parent before giving up to lexicographic order. Unrated clusters map
    to "Other". Partial sessions are allowed, with a warning.
    """
    progress = session.progress()
    if not progress["complete"]:
        warnings.warn(
            f"session incomplete: {progress['submitted']}/{progress['scheduled']} ratings",
            stacklevel=2,
        )
    by_cluster: dict[int, list[str]] = {c: [] for c in session.clusters()}
    for r in session.submissions:
        by_cluster[session.sample_by_id(r.sample_id).cluster_id].append(r.label)
    entries = {}
    for c, labels in by_cluster.items():
        if not labels:
            entries[c] = ClusterLabelEntry(OTHER_LABEL, 0, 0)
            continue
        label, votes = _modal_label(labels, hierarchy)
        entries[c] = ClusterLabelEntry(label, votes, len(labels))
    return ClusterLabelMap(entries)


@dataclass
class PropagatedLabeling:
    """Window-level labels after propagating each cluster's majority label."""

    window_ids: np.ndarray
    labels: list[str]
    confidences: np.ndarray

    def label_of(self, window_id: int) -> str:
        if not hasattr(self, "_index"):
            self._index = {int(w): i for i, w in enumerate(self.window_ids)}
        return self.labels[self._index[int(window_id)]]

    def __len__(self) -> int:
        return len(self.labels)


def propagate(cluster_label_map: ClusterLabelMap, assignments: AssignmentSet) -> PropagatedLabeling:
    """Give every assigned window the label of its cluster (total function)."""
    missing = {int(c) for c in np.unique(assignments.cluster_ids)} - set(
        cluster_label_map.entries
    )
    if missing:
        raise ValueError(f"clusters without a mapped label: {sorted(missing)}")
    labels = [cluster_label_map.label_of(c) for c in assignments.cluster_ids]
    return PropagatedLabeling(
        window_ids=assignments.window_ids.copy(),
        labels=labels,
        confidences=assignments.confidences.copy(),
    )


def reannotate_events(
    propagated: PropagatedLabeling, windows: WindowSet, events
) -> list[str]:
    """Per-event labels by majority over covering windows.

    Ties break toward the covering window (carrying a tied label) with the
    highest assignment confidence, then the latest start. Events covered by
    no labeled window get "No Label".
    """
    n_events = len(events)
    length = windows.length
    row_of = {int(w): i for i, w in enumerate(windows.window_id)}

    label_names = sorted(set(propagated.labels))
    code_of = {lab: i for i, lab in enumerate(label_names)}
    counts = np.zeros((n_events, len(label_names)), dtype=np.int32)

    starts = np.empty(len(propagated), dtype=np.int64)
    codes = np.empty(len(propagated), dtype=np.int64)
    for j, wid in enumerate(propagated.window_ids):
        starts[j] = windows.start_index[row_of[int(wid)]]
        codes[j] = code_of[propagated.labels[j]]
        counts[starts[j] : starts[j] + length, codes[j]] += 1

    covered = counts.sum(axis=1) > 0
    best = counts.argmax(axis=1)
    top = counts.max(axis=1)
    tie_rows = np.nonzero(((counts == top[:, None]).sum(axis=1) > 1) & covered)[0]

    order = np.argsort(starts, kind="stable")
    starts_sorted = starts[order]

    out = [NO_LABEL] * n_events
    for e in np.nonzero(covered)[0]:
        out[e] = label_names[best[e]]
    for e in tie_rows:
        tied_codes = set(np.nonzero(counts[e] == top[e])[0])
        lo = np.searchsorted(starts_sorted, e - length + 1, side="left")
        hi = np.searchsorted(starts_sorted, e, side="right")
        winner = None
        for j in order[lo:hi]:
            if codes[j] not in tied_codes:
                continue
            key = (propagated.confidences[j], starts[j])
            if winner is None or key > winner[0]:
                winner = (key, codes[j])
        out[e] = label_names[winner[1]]
    return out


def export_propagated_csv(path, events, event_labels) -> None:
    """The re-annotated dataset: one row per event, truth and discovered labels."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "sensor", "value", "truth_label", "discovered_label"])
        for e, lab in zip(events, event_labels):
            writer.writerow(
                [e.timestamp.strftime("%Y-%m-%d %H:%M:%S.%f"), e.sensor_id, e.value, e.truth_label, lab]
            )
