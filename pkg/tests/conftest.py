import datetime as dt

import numpy as np
import pytest

from pdlkit.corpus import SensorEvent


@pytest.fixture
def tiny_events():
    """A hand-made two-day event list with one labeled span."""
    base = dt.datetime(2024, 3, 4, 8, 0, 0)
    rows = [
        ("M001", "ON", "No Label"),
        ("M001", "OFF", "No Label"),
        ("M002", "ON", "Cooking"),
        ("M003", "ON", "Cooking"),
        ("M002", "OFF", "Cooking"),
        ("D001", "OPEN", "No Label"),
        ("T001", "21.4", "No Label"),
        ("M001", "ON", "No Label"),
    ]
    events = []
    for i, (sensor, value, label) in enumerate(rows):
        ts = base + dt.timedelta(minutes=10 * i)
        if i >= 6:  # last two rows on the next day
            ts += dt.timedelta(days=1)
        events.append(SensorEvent(ts, sensor, value, label))
    return events


def make_event_stream(n, n_sensors=5, seed=0, start=dt.datetime(2024, 1, 1, 6, 0)):
    """n unlabeled events across several days, deterministic."""
    rng = np.random.default_rng(seed)
    events = []
    ts = start
    for i in range(n):
        ts = ts + dt.timedelta(seconds=float(rng.uniform(5, 30)))
        if rng.random() < 0.001:
            ts = ts + dt.timedelta(hours=12)
        sensor = f"M{rng.integers(1, n_sensors + 1):03d}"
        value = "ON" if rng.random() < 0.7 else "OFF"
        events.append(SensorEvent(ts, sensor, value))
    return events
