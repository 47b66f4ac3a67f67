"""Synthetic household generator with planted routines.

Produces a CASAS-style event stream from a small house model: rooms with
their own sensor sets, and per-routine Markov walks over those sensors.
A day is a sequence of routine episodes drawn from a routine-transition
chain, so the stream contains recurring motifs with known ground truth.
Acceptance and end-to-end tests run on this generator, so no external
download is needed.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .corpus import SensorEvent


@dataclass
class Segment:
    """One phase of a routine: a Markov walk over a sensor subset."""

    sensors: list[str]
    transition: np.ndarray  # (n_sensors, n_sensors) row-stochastic


@dataclass
class Routine:
    """One planted motif: one or more phases walked in order.

    Multi-phase routines (e.g. fridge-side prep, then stove-side cooking)
    produce windows that drift between two token populations, which is what
    real routines look like and what purely geometric clustering handles
    poorly. ``hallway_rate`` occasionally fires a shared hallway sensor,
    which different routines have in common.
    """

    name: str
    segments: list[Segment]
    off_prob: float = 0.5   # chance a motion ON is followed by its OFF
    min_events: int = 30
    max_events: int = 70
    hallway_rate: float = 0.0


_HALLWAY_SENSOR = "M000"


@dataclass
class SyntheticConfig:
    days: int = 10
    events_per_day: int = 500
    seed: int = 7
    start_date: dt.date = dt.date(2024, 3, 4)
    temperature_rate: float = 0.01  # fraction of steps emitting a T reading
    total_events: int | None = None  # exact stream length; overrides days*events_per_day


def _chain(n: int, stay: float, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic matrix favoring self-transitions with weight ``stay``."""
    base = rng.random((n, n)) * (1.0 - stay)
    np.fill_diagonal(base, 0.0)
    rows = base.sum(axis=1, keepdims=True)
    rows[rows == 0.0] = 1.0
    mat = base / rows * (1.0 - stay)
    mat += np.eye(n) * stay
    return mat / mat.sum(axis=1, keepdims=True)


def default_routines(rng: np.random.Generator) -> list[Routine]:
    """Four routines in four rooms, with distinct movement texture.

    Cooking is two-phase (fridge/pantry prep, then stove/counter work);
    Relaxing mostly re-fires the couch and TV-area sensors; Sleeping
    re-fires the bed sensor; Bathing walks door -> bathroom -> shower.
    """
    return [
        Routine(
            "Cooking",
            [
                Segment(["M001", "M013", "D001"], _chain(3, stay=0.3, rng=rng)),
                Segment(["M002", "M003", "M004"], _chain(3, stay=0.3, rng=rng)),
            ],
            min_events=52,
            max_events=80,
        ),
        Routine(
            "Relaxing",
            [Segment(["M005", "M006", "M007"], _chain(3, stay=0.8, rng=rng))],
            off_prob=0.35,
            min_events=56,
            max_events=84,
            hallway_rate=0.12,
        ),
        Routine(
            "Sleeping",
            [Segment(["M008", "M009", "M010"], _chain(3, stay=0.85, rng=rng))],
            off_prob=0.3,
            min_events=58,
            max_events=86,
            hallway_rate=0.12,
        ),
        Routine(
            "Bathing",
            [Segment(["D002", "M011", "M012"], _chain(3, stay=0.6, rng=rng))],
            min_events=44,
            max_events=66,
            hallway_rate=0.12,
        ),
    ]


# Uniform routine schedule (no immediate repeats): episode budgets above are
# tuned so the four routines cover roughly equal shares of the stream.
_ROUTINE_TRANSITION = np.array(
    [
        [0.0, 1 / 3, 1 / 3, 1 / 3],
        [1 / 3, 0.0, 1 / 3, 1 / 3],
        [1 / 3, 1 / 3, 0.0, 1 / 3],
        [1 / 3, 1 / 3, 1 / 3, 0.0],
    ]
)

_TEMP_SENSORS = {"Kitchen": "T001", "Living Room": "T002"}


def generate_events(config: SyntheticConfig) -> list[SensorEvent]:
    """Planted-routine event stream with per-event ground-truth labels."""
    rng = np.random.default_rng(config.seed)
    routines = default_routines(rng)
    target = config.total_events or config.days * config.events_per_day
    per_day = int(np.ceil(target / config.days))

    events: list[SensorEvent] = []
    for day_index in range(config.days):
        day = config.start_date + dt.timedelta(days=day_index)
        clock = dt.datetime.combine(day, dt.time(7, 0, 0))
        routine_idx = int(rng.integers(len(routines)))
        produced = 0
        while produced < per_day:
            routine = routines[routine_idx]
            n_steps = int(rng.integers(routine.min_events, routine.max_events + 1))
            n_segments = len(routine.segments)
            for seg_index, segment in enumerate(routine.segments):
                seg_steps = n_steps // n_segments
                if seg_index == n_segments - 1:
                    seg_steps = n_steps - seg_steps * (n_segments - 1)
                state = int(rng.integers(len(segment.sensors)))
                for _ in range(seg_steps):
                    if routine.hallway_rate and rng.random() < routine.hallway_rate:
                        sensor = _HALLWAY_SENSOR
                    else:
                        sensor = segment.sensors[state]
                    clock += dt.timedelta(seconds=float(rng.uniform(1.0, 8.0)))
                    if sensor.startswith("D"):
                        events.append(SensorEvent(clock, sensor, "OPEN", routine.name))
                        clock += dt.timedelta(seconds=float(rng.uniform(1.0, 5.0)))
                        events.append(SensorEvent(clock, sensor, "CLOSE", routine.name))
                        produced += 2
                    else:
                        events.append(SensorEvent(clock, sensor, "ON", routine.name))
                        produced += 1
                        if rng.random() < routine.off_prob:
                            clock += dt.timedelta(seconds=float(rng.uniform(0.5, 3.0)))
                            events.append(SensorEvent(clock, sensor, "OFF", routine.name))
                            produced += 1
                    if rng.random() < config.temperature_rate:
                        temp_sensor = "T001" if routine.name == "Cooking" else "T002"
                        reading = f"{rng.uniform(18.0, 24.0):.1f}"
                        clock += dt.timedelta(seconds=0.5)
                        events.append(SensorEvent(clock, temp_sensor, reading, routine.name))
                        produced += 1
                    state = int(
                        rng.choice(len(segment.sensors), p=segment.transition[state])
                    )
            clock += dt.timedelta(minutes=float(rng.uniform(2.0, 10.0)))
            routine_idx = int(
                rng.choice(len(routines), p=_ROUTINE_TRANSITION[routine_idx])
            )
    if config.total_events is not None:
        events = events[: config.total_events]
    return events


def write_raw_log(path, events) -> None:
    """CASAS-style raw text with begin/end span markers around label runs."""
    with open(path, "w", encoding="utf-8") as fh:
        prev_label = None
        for i, e in enumerate(events):
            nxt = events[i + 1].truth_label if i + 1 < len(events) else None
            marker = ""
            if e.truth_label != prev_label:
                marker = f" {e.truth_label} begin"
            elif nxt != e.truth_label:
                marker = f" {e.truth_label} end"
            stamp = e.timestamp.strftime("%Y-%m-%d %H:%M:%S.%f")
            fh.write(f"{stamp} {e.sensor_id} {e.value}{marker}\n")
            prev_label = e.truth_label


