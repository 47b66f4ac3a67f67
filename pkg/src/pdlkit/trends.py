"""Longitudinal comparison of label distributions between two date ranges.

The unit of mass is the window: a period's distribution is the share of
windows per label among windows whose day falls inside the range, and a
trend is the signed percentage-point change of those shares.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass


@dataclass
class PeriodDistribution:
    start: dt.date
    end: dt.date
    shares: dict[str, float]
    total: int


@dataclass
class TrendDelta:
    """Per-label percentage-point change between two periods."""

    deltas: dict[str, float]

    def sorted_rows(self) -> list[tuple[str, float]]:
        return sorted(self.deltas.items(), key=lambda kv: (-abs(kv[1]), kv[0]))


def period_distribution(labeled_windows, start_date: dt.date, end_date: dt.date) -> PeriodDistribution:
    """Normalized label shares over windows with day_key in [start, end].

    ``labeled_windows`` is an iterable of (day_key, label) pairs.
    """
    if start_date > end_date:
        raise ValueError(f"start {start_date} after end {end_date}")
    counts: dict[str, int] = {}
    total = 0
    for day, label in labeled_windows:
        if isinstance(day, str):
            day = dt.date.fromisoformat(day)
        if start_date <= day <= end_date:
            counts[label] = counts.get(label, 0) + 1
            total += 1
    if total == 0:
        raise ValueError(f"no windows in range {start_date}..{end_date}")
    return PeriodDistribution(
        start=start_date,
        end=end_date,
        shares={lab: n / total for lab, n in counts.items()},
        total=total,
    )


def compare_periods(dist1: PeriodDistribution, dist2: PeriodDistribution) -> TrendDelta:
    """Signed pp deltas over the union label universe (missing share = 0)."""
    labels = set(dist1.shares) | set(dist2.shares)
    return TrendDelta(
        {lab: (dist2.shares.get(lab, 0.0) - dist1.shares.get(lab, 0.0)) * 100.0 for lab in labels}
    )


def write_trend_report(prefix, dist1: PeriodDistribution, dist2: PeriodDistribution) -> TrendDelta:
    """CSV + JSON report and a plot-data file (label, share1, share2, delta_pp)."""
    delta = compare_periods(dist1, dist2)
    rows = [
        (lab, dist1.shares.get(lab, 0.0), dist2.shares.get(lab, 0.0), d)
        for lab, d in delta.sorted_rows()
    ]
    with open(f"{prefix}.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "share1", "share2", "delta_pp"])
        for row in rows:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    blob = {
        "period1": {
            "start": dist1.start.isoformat(),
            "end": dist1.end.isoformat(),
            "total_windows": dist1.total,
            "shares": dist1.shares,
        },
        "period2": {
            "start": dist2.start.isoformat(),
            "end": dist2.end.isoformat(),
            "total_windows": dist2.total,
            "shares": dist2.shares,
        },
        "delta_pp": {lab: d for lab, d in delta.sorted_rows()},
    }
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
    return delta
