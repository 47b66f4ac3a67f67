import datetime as dt

import numpy as np
import pytest

from pdlkit.annotate import (
    AnnotationSession,
    CentroidSample,
    PropagatedLabeling,
    attach_event_payloads,
    cluster_majority_labels,
    create_session,
    propagate,
    reannotate_events,
    select_centroids,
)
from pdlkit.corpus import NO_LABEL, SensorEvent, WindowSet, build_vocabulary, make_windows
from pdlkit.evaluation import ClusterLabelEntry, ClusterLabelMap, default_hierarchy
from pdlkit.scan import AssignmentSet

from conftest import make_event_stream


def make_assignments(cluster_ids, confidences, k=None):
    """AssignmentSet with prescribed argmax clusters and confidences."""
    cluster_ids = np.asarray(cluster_ids)
    confidences = np.asarray(confidences, dtype=np.float64)
    k = k or int(cluster_ids.max()) + 1
    n = len(cluster_ids)
    probs = np.zeros((n, k))
    for i, (c, conf) in enumerate(zip(cluster_ids, confidences)):
        probs[i, c] = conf
        rest = (1.0 - conf) / (k - 1) if k > 1 else 0.0
        for j in range(k):
            if j != c:
                probs[i, j] = rest
    return AssignmentSet(np.arange(n), probs)


class TestSelectCentroids:
    def test_top_m_per_cluster(self):
        asg = make_assignments([0, 0, 0, 1, 1, 1], [0.9, 0.5, 0.7, 0.8, 0.95, 0.6])
        samples = select_centroids(asg, m=2)
        by_cluster = {}
        for s in samples:
            by_cluster.setdefault(s.cluster_id, []).append(s.window_id)
        assert by_cluster[0] == [0, 2]
        assert by_cluster[1] == [4, 3]

    def test_confidence_ties_prefer_lower_window_id(self):
        asg = make_assignments([0, 0, 0], [0.8, 0.8, 0.8])
        samples = select_centroids(asg, m=2)
        assert [s.window_id for s in samples] == [0, 1]

    def test_small_cluster_warns(self):
        asg = make_assignments([0, 0, 0, 1], [0.9, 0.8, 0.7, 0.6])
        with pytest.warns(UserWarning, match="only"):
            samples = select_centroids(asg, m=3)
        assert sum(1 for s in samples if s.cluster_id == 1) == 1

    def test_m_positive(self):
        asg = make_assignments([0], [0.9])
        with pytest.raises(ValueError):
            select_centroids(asg, m=0)

    def test_selection_stable_under_lower_confidence_additions(self):
        asg = make_assignments([0, 0, 0], [0.9, 0.7, 0.8])
        before = [s.window_id for s in select_centroids(asg, m=2)]
        extended = make_assignments([0, 0, 0, 0, 0], [0.9, 0.7, 0.8, 0.5, 0.6])
        after = [s.window_id for s in select_centroids(extended, m=2)]
        assert before == after

    def test_selected_confidences_dominate_unselected(self):
        rng = np.random.default_rng(0)
        confs = rng.uniform(0.55, 1.0, size=30)  # argmax stays in cluster 0
        asg = make_assignments(np.zeros(30, dtype=int), confs, k=2)
        chosen = {s.window_id for s in select_centroids(asg, m=5)}
        worst_chosen = min(confs[list(chosen)])
        best_unchosen = max(confs[i] for i in range(30) if i not in chosen)
        assert worst_chosen >= best_unchosen


def sample_set(n=6, k=3):
    return [
        CentroidSample(window_id=i, cluster_id=i % k, confidence=0.9 - 0.01 * i)
        for i in range(n)
    ]


class TestSession:
    def test_schedule_size(self):
        session = create_session(sample_set(6), rater_count_per_sample=2, seed=0)
        assert session.schedule_size == 12

    def test_single_rater_schedule(self):
        session = create_session(sample_set(6), rater_count_per_sample=1, seed=0)
        assert session.schedule_size == 6

    def test_shuffle_deterministic(self):
        a = create_session(sample_set(10), 2, seed=5)
        b = create_session(sample_set(10), 2, seed=5)
        assert [s.window_id for s in a.samples] == [s.window_id for s in b.samples]

    def test_record_and_idempotent_resubmit(self):
        h = default_hierarchy()
        session = create_session(sample_set(4), 2, seed=0)
        sid = session.samples[0].window_id
        assert session.record(sid, "r1", "Cooking", h) is None
        assert len(session.submissions) == 1
        prior = session.record(sid, "r1", "Sleeping", h)
        assert prior == "Cooking"
        assert len(session.submissions) == 1
        assert session.ratings_for(sid) == {"r1": "Sleeping"}

    def test_unknown_label_rejected(self):
        h = default_hierarchy()
        session = create_session(sample_set(4), 2, seed=0)
        with pytest.raises(ValueError, match="hierarchy"):
            session.record(session.samples[0].window_id, "r1", "Flying", h)

    def test_other_always_allowed(self):
        h = default_hierarchy()
        session = create_session(sample_set(4), 2, seed=0)
        session.record(session.samples[0].window_id, "r1", "Other", h)

    def test_unknown_sample_rejected(self):
        h = default_hierarchy()
        session = create_session(sample_set(4), 2, seed=0)
        with pytest.raises(KeyError):
            session.record(999, "r1", "Cooking", h)

    def test_next_skips_rated_and_full_samples(self):
        h = default_hierarchy()
        session = create_session(sample_set(3), 1, seed=0)
        first = session.next_for("r1")
        session.record(first.window_id, "r1", "Cooking", h)
        second = session.next_for("r1")
        assert second.window_id != first.window_id
        # Another rater skips the fully rated sample too (rater_count=1).
        assert session.next_for("r2").window_id != first.window_id

    def test_next_none_when_done(self):
        h = default_hierarchy()
        session = create_session(sample_set(2), 1, seed=0)
        for _ in range(2):
            s = session.next_for("r1")
            session.record(s.window_id, "r1", "Cooking", h)
        assert session.next_for("r1") is None

    def test_json_roundtrip_with_payloads(self, tmp_path):
        events = make_event_stream(10)
        samples = sample_set(2, k=1)
        windows = WindowSet(
            np.zeros((2, 5), dtype=np.int32),
            np.array([0, 5]),
            np.array(["2024-01-01", "2024-01-01"]),
            np.array([0, 1]),
        )
        attach_event_payloads(samples, windows, events)
        session = create_session(samples, 2, seed=0, session_id="s1", dataset_id="synthetic")
        h = default_hierarchy()
        session.record(samples[0].window_id, "r1", "Cooking", h)
        path = tmp_path / "s1.json"
        session.save(path)
        loaded = AnnotationSession.load(path)
        assert loaded.session_id == "s1"
        assert [s.window_id for s in loaded.samples] == [s.window_id for s in session.samples]
        assert loaded.samples[0].events == session.samples[0].events
        assert loaded.submissions == session.submissions

    def test_progress_counts(self):
        h = default_hierarchy()
        session = create_session(sample_set(4, k=2), 2, seed=0)
        session.record(session.samples[0].window_id, "r1", "Cooking", h)
        p = session.progress()
        assert p["submitted"] == 1
        assert p["scheduled"] == 8
        assert not p["complete"]


class TestMajorityLabels:
    def _rated_session(self, ratings_by_cluster, m=5, raters=2):
        """Build a session with prescribed per-cluster rating label lists."""
        samples = []
        wid = 0
        for c in sorted(ratings_by_cluster):
            for _ in range(m):
                samples.append(CentroidSample(wid, c, 0.9))
                wid += 1
        session = AnnotationSession("s", "synthetic", samples, raters)
        h = default_hierarchy()
        for c, labels in ratings_by_cluster.items():
            cluster_samples = [s for s in samples if s.cluster_id == c]
            for i, label in enumerate(labels):
                sample = cluster_samples[i // raters]
                session.record(sample.window_id, f"r{i % raters}", label, h)
        return session, h

    def test_clear_majority(self):
        session, h = self._rated_session(
            {0: ["Sitting on couch/armchair"] * 7 + ["Sleeping"] * 3}
        )
        m = cluster_majority_labels(session, h)
        assert m.entries[0].label == "Sitting on couch/armchair"
        assert m.entries[0].votes == 7
        assert m.entries[0].total == 10

    def test_specificity_tie_merges_to_parent(self):
        # 5 votes "Movement near Fridge" vs 5 "Movement in Kitchen": the
        # child merges into its parent for 10 votes.
        session, h = self._rated_session(
            {0: ["Movement near Fridge"] * 5 + ["Movement in Kitchen"] * 5}
        )
        m = cluster_majority_labels(session, h)
        assert m.entries[0].label == "Movement in Kitchen"
        assert m.entries[0].votes == 10

    def test_unrelated_tie_lexicographic(self):
        session, h = self._rated_session({0: ["Sleeping"] * 5 + ["Cooking"] * 5})
        m = cluster_majority_labels(session, h)
        assert m.entries[0].label == "Cooking"

    def test_unrated_cluster_is_other(self):
        session, h = self._rated_session({0: ["Cooking"] * 10, 1: []})
        with pytest.warns(UserWarning, match="incomplete"):
            m = cluster_majority_labels(session, h)
        assert m.entries[1].label == "Other"
        assert m.entries[1].votes == 0


class TestPropagate:
    def test_total_over_assigned_windows(self):
        asg = make_assignments([0, 1, 0, 2, 1], [0.9, 0.8, 0.7, 0.6, 0.95])
        label_map = ClusterLabelMap(
            {
                0: ClusterLabelEntry("Cooking", 8, 10),
                1: ClusterLabelEntry("Sleeping", 9, 10),
                2: ClusterLabelEntry("Bathing", 10, 10),
            }
        )
        propagated = propagate(label_map, asg)
        assert len(propagated) == 5
        assert propagated.labels == ["Cooking", "Sleeping", "Cooking", "Bathing", "Sleeping"]
        assert propagated.label_of(3) == "Bathing"

    def test_same_cluster_same_label(self):
        asg = make_assignments([1, 1], [0.9, 0.6])
        label_map = ClusterLabelMap(
            {0: ClusterLabelEntry("A", 1, 1), 1: ClusterLabelEntry("B", 1, 1)}
        )
        propagated = propagate(label_map, asg)
        assert propagated.labels[0] == propagated.labels[1] == "B"

    def test_unmapped_cluster_rejected(self):
        asg = make_assignments([0, 1], [0.9, 0.8])
        label_map = ClusterLabelMap({0: ClusterLabelEntry("A", 1, 1)})
        with pytest.raises(ValueError, match="without a mapped label"):
            propagate(label_map, asg)


def reannotate_oracle(propagated, windows, events):
    """Brute-force per-event tally, independent of the implementation."""
    length = windows.length
    row_of = {int(w): i for i, w in enumerate(windows.window_id)}
    out = []
    for e in range(len(events)):
        covering = []
        for j, wid in enumerate(propagated.window_ids):
            start = int(windows.start_index[row_of[int(wid)]])
            if start <= e < start + length:
                covering.append(j)
        if not covering:
            out.append(NO_LABEL)
            continue
        counts = {}
        for j in covering:
            counts[propagated.labels[j]] = counts.get(propagated.labels[j], 0) + 1
        top = max(counts.values())
        tied = {lab for lab, n in counts.items() if n == top}
        if len(tied) == 1:
            out.append(tied.pop())
            continue
        best = None
        for j in covering:
            if propagated.labels[j] not in tied:
                continue
            key = (propagated.confidences[j], int(windows.start_index[row_of[int(propagated.window_ids[j])]]))
            if best is None or key > best[0]:
                best = (key, propagated.labels[j])
        out.append(best[1])
    return out


class TestReannotate:
    def _setup(self, n_events=60, length=5, cluster_seed=0):
        events = make_event_stream(n_events, seed=3)
        vocab = build_vocabulary(events)
        windows = make_windows(events, vocab, length=length)
        rng = np.random.default_rng(cluster_seed)
        clusters = rng.integers(0, 3, size=len(windows))
        confs = rng.uniform(0.4, 1.0, size=len(windows))
        asg = make_assignments(clusters, confs, k=3)
        label_map = ClusterLabelMap(
            {c: ClusterLabelEntry(f"L{c}", 1, 1) for c in range(3)}
        )
        propagated = propagate(label_map, asg)
        return propagated, windows, events

    def test_interior_event_single_regime(self):
        events = make_event_stream(30, seed=1)
        vocab = build_vocabulary(events)
        windows = make_windows(events, vocab, length=5)
        asg = make_assignments(np.zeros(len(windows), dtype=int), np.full(len(windows), 0.9), k=2)
        label_map = ClusterLabelMap(
            {0: ClusterLabelEntry("Only", 1, 1), 1: ClusterLabelEntry("Never", 0, 0)}
        )
        propagated = propagate(label_map, asg)
        labels = reannotate_events(propagated, windows, events)
        assert set(labels) == {"Only"}

    def test_first_event_covered_by_one_window(self):
        propagated, windows, events = self._setup()
        labels = reannotate_events(propagated, windows, events)
        assert labels[0] == propagated.labels[0]

    def test_matches_brute_force_oracle(self):
        for seed in range(4):
            propagated, windows, events = self._setup(cluster_seed=seed)
            assert reannotate_events(propagated, windows, events) == reannotate_oracle(
                propagated, windows, events
            )

    def test_uncovered_events_no_label(self):
        events = make_event_stream(30, seed=2)
        vocab = build_vocabulary(events)
        windows = make_windows(events, vocab, length=5, stride=7)  # gaps between windows
        n = len(windows)
        asg = make_assignments(np.zeros(n, dtype=int), np.full(n, 0.9), k=1)
        label_map = ClusterLabelMap({0: ClusterLabelEntry("X", 1, 1)})
        propagated = propagate(label_map, asg)
        labels = reannotate_events(propagated, windows, events)
        assert labels[5] == NO_LABEL  # between window 0 (0-4) and window 1 (7-11)
        assert labels == reannotate_oracle(propagated, windows, events)
