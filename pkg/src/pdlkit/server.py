"""HTTP/JSON service behind the annotation UI.

Serves house layouts, replay payloads, and label submission for one or
more annotation sessions, and exports the propagated-label CSV once every
cluster has ratings. Sessions are persisted to disk before a submission is
acknowledged, so a crash or restart loses nothing. All payloads carry a
``v`` version field.
"""

from __future__ import annotations

import io
import json
import threading
from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import JSONResponse, PlainTextResponse

from .annotate import (
    AnnotationSession,
    cluster_majority_labels,
    export_propagated_csv,
    propagate,
    reannotate_events,
)
from .corpus import WindowSet, read_events_csv
from .evaluation import ClusterLabelEntry, LabelHierarchy, OTHER_LABEL, default_hierarchy
from .scan import AssignmentSet

V = 1


def _error(status: int, message: str, **extra) -> JSONResponse:
    return JSONResponse(status_code=status, content={"v": V, "error": message, **extra})


def validate_layout(layout: dict) -> list[str]:
    """Structural check against the bundled schema; returns problem strings."""
    problems = []
    for key in ("v", "dataset", "rooms", "sensors"):
        if key not in layout:
            problems.append(f"missing key: {key}")
    for room in layout.get("rooms", []):
        if "name" not in room or "polygon" not in room:
            problems.append(f"bad room entry: {room}")
            continue
        for pt in room["polygon"]:
            if len(pt) != 2 or not all(0.0 <= float(c) <= 1.0 for c in pt):
                problems.append(f"room {room['name']}: point {pt} outside [0,1]^2")
    for sid, pt in layout.get("sensors", {}).items():
        if len(pt) != 2 or not all(0.0 <= float(c) <= 1.0 for c in pt):
            problems.append(f"sensor {sid}: point {pt} outside [0,1]^2")
    return problems


class SessionStore:
    """Write-ahead persisted sessions, one JSON document per session."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, AnnotationSession] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._global = threading.Lock()
        for path in sorted(self.directory.glob("*.json")):
            session = AnnotationSession.load(path)
            self._sessions[session.session_id] = session

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._global:
            return self._locks.setdefault(session_id, threading.Lock())

    def get(self, session_id: str) -> AnnotationSession | None:
        return self._sessions.get(session_id)

    def add(self, session: AnnotationSession) -> None:
        self._sessions[session.session_id] = session
        self.persist(session)

    def persist(self, session: AnnotationSession) -> None:
        session.save(self.directory / f"{session.session_id}.json")


def _replay_payload(sample, hierarchy: LabelHierarchy) -> dict:
    events = sample.events or []
    t0 = events[0].timestamp if events else None
    activations = [
        {
            "sensor": e.sensor_id,
            "value": e.value,
            "offset_ms": int((e.timestamp - t0).total_seconds() * 1000),
        }
        for e in events
    ]
    return {
        "v": V,
        "done": False,
        "sample_id": sample.window_id,
        "cluster_id": sample.cluster_id,
        "confidence": sample.confidence,
        "activations": activations,
        "label_options": hierarchy.as_tree(),
    }


def create_app(
    run_dir,
    layouts: dict[str, dict] | None = None,
    hierarchy: LabelHierarchy | None = None,
) -> FastAPI:
    """Build the service over a pipeline run directory.

    Expects ``session*.json`` session files under ``run_dir/sessions`` and,
    for the export endpoint, ``assignments.jsonl``, ``windows.jsonl`` and
    ``events.csv`` in ``run_dir``.
    """
    run_dir = Path(run_dir)
    hierarchy = hierarchy or default_hierarchy()
    store = SessionStore(run_dir / "sessions")

    if layouts is None:
        layouts = {}
        layout_dir = run_dir / "layouts"
        if layout_dir.is_dir():
            for path in sorted(layout_dir.glob("*.json")):
                blob = json.loads(path.read_text(encoding="utf-8"))
                layouts[blob.get("dataset", path.stem)] = blob
    for name, layout in layouts.items():
        problems = validate_layout(layout)
        if problems:
            raise ValueError(f"invalid layout {name!r}: {problems}")

    app = FastAPI(title="pdlkit annotation service")
    app.state.store = store
    app.state.layouts = layouts
    app.state.hierarchy = hierarchy
    app.state.run_dir = run_dir

    def _session_or_none(session_id: str) -> AnnotationSession | None:
        return store.get(session_id)

    @app.get("/api/layout/{dataset}")
    def get_layout(dataset: str):
        layout = layouts.get(dataset)
        if layout is None:
            return _error(404, f"no layout for dataset {dataset!r}")
        unplaced = sorted(
            {
                e.sensor_id
                for session in store._sessions.values()
                for s in session.samples
                if s.events
                for e in s.events
                if session.dataset_id == dataset and e.sensor_id not in layout["sensors"]
            }
        )
        return {"v": V, "layout": layout, "unplaced_sensors": unplaced}

    @app.get("/api/session/{session_id}")
    def get_session(session_id: str):
        session = _session_or_none(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        # Sample statuses only; never other raters' label choices.
        return {
            "v": V,
            "session_id": session.session_id,
            "dataset_id": session.dataset_id,
            "raters_per_sample": session.raters_per_sample,
            "samples": [
                {
                    "sample_id": s.window_id,
                    "cluster_id": s.cluster_id,
                    "ratings": len(session.ratings_for(s.window_id)),
                }
                for s in session.samples
            ],
            **session.progress(),
        }

    @app.get("/api/session/{session_id}/next")
    def get_next(session_id: str, rater: str = ""):
        session = _session_or_none(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        if not rater:
            return _error(422, "missing rater id")
        sample = session.next_for(rater)
        if sample is None:
            return {"v": V, "done": True}
        return _replay_payload(sample, hierarchy)

    @app.post("/api/session/{session_id}/label")
    def post_label(session_id: str, body: dict):
        session = _session_or_none(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        missing = [k for k in ("sample_id", "rater", "label") if k not in body]
        if missing:
            return _error(422, f"missing fields: {missing}")
        with store.lock_for(session_id):
            try:
                prior = session.record(
                    int(body["sample_id"]), str(body["rater"]), str(body["label"]), hierarchy
                )
            except KeyError as exc:
                return _error(404, str(exc))
            except ValueError as exc:
                return _error(422, str(exc))
            store.persist(session)  # before the 200 goes out
        return {"v": V, "ok": True, "prior": prior, **session.progress()}

    @app.get("/api/session/{session_id}/progress")
    def get_progress(session_id: str):
        session = _session_or_none(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        return {"v": V, **session.progress()}

    @app.get("/api/hierarchy")
    def get_hierarchy():
        return {"v": V, **hierarchy.as_tree()}

    @app.get("/api/export/{session_id}")
    def export(session_id: str):
        session = _session_or_none(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        label_map = cluster_majority_labels(session, hierarchy)
        unmapped = [
            c for c in session.clusters()
            if label_map.entries[c].total == 0
        ]
        if unmapped:
            return _error(409, "clusters unmapped", clusters=unmapped)
        assignments_path = run_dir / "assignments.jsonl"
        windows_path = run_dir / "windows.jsonl"
        events_path = run_dir / "events.csv"
        for path in (assignments_path, windows_path, events_path):
            if not path.exists():
                return _error(409, f"missing pipeline artifact: {path.name}")
        assignments = AssignmentSet.from_jsonl(assignments_path)
        windows = WindowSet.from_jsonl(windows_path)
        events = read_events_csv(events_path)
        # Clusters that had no centroid samples (empty at selection time)
        # degrade to "Other" rather than blocking the export.
        for c in {int(x) for x in assignments.cluster_ids}:
            if c not in label_map.entries:
                label_map.entries[c] = ClusterLabelEntry(OTHER_LABEL, 0, 0)
        propagated = propagate(label_map, assignments)
        event_labels = reannotate_events(propagated, windows, events)
        buf = io.StringIO()
        import csv as _csv

        writer = _csv.writer(buf)
        writer.writerow(["timestamp", "sensor", "value", "truth_label", "discovered_label"])
        for e, lab in zip(events, event_labels):
            writer.writerow(
                [
                    e.timestamp.strftime("%Y-%m-%d %H:%M:%S.%f"),
                    e.sensor_id,
                    e.value,
                    e.truth_label,
                    lab,
                ]
            )
        return PlainTextResponse(buf.getvalue(), media_type="text/csv")

    return app
