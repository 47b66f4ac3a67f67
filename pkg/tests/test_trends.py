import datetime as dt
import json

import pytest

from pdlkit.trends import compare_periods, period_distribution, write_trend_report

D = dt.date


def pairs(*rows):
    return [(D.fromisoformat(day), label) for day, label in rows]


class TestPeriodDistribution:
    def test_single_label_full_share(self):
        dist = period_distribution(
            pairs(("2024-01-01", "A"), ("2024-01-02", "A")), D(2024, 1, 1), D(2024, 1, 7)
        )
        assert dist.shares == {"A": 1.0}
        assert dist.total == 2

    def test_shares_sum_to_one(self):
        rows = pairs(
            ("2024-01-01", "A"), ("2024-01-01", "B"), ("2024-01-02", "C"), ("2024-01-03", "A")
        )
        dist = period_distribution(rows, D(2024, 1, 1), D(2024, 1, 3))
        assert sum(dist.shares.values()) == pytest.approx(1.0, abs=1e-9)

    def test_two_thirds_one_third(self):
        rows = pairs(("2024-01-01", "A"), ("2024-01-01", "A"), ("2024-01-01", "B"))
        dist = period_distribution(rows, D(2024, 1, 1), D(2024, 1, 1))
        assert dist.shares["A"] == pytest.approx(2 / 3)
        assert dist.shares["B"] == pytest.approx(1 / 3)

    def test_out_of_range_excluded(self):
        rows = pairs(("2024-01-01", "A"), ("2024-02-01", "B"))
        dist = period_distribution(rows, D(2024, 1, 1), D(2024, 1, 7))
        assert dist.shares == {"A": 1.0}

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError, match="no windows"):
            period_distribution(pairs(("2024-01-01", "A")), D(2024, 5, 1), D(2024, 5, 7))

    def test_reversed_range_rejected(self):
        with pytest.raises(ValueError):
            period_distribution(pairs(("2024-01-01", "A")), D(2024, 1, 7), D(2024, 1, 1))

    def test_accepts_iso_strings(self):
        dist = period_distribution([("2024-01-01", "A")], D(2024, 1, 1), D(2024, 1, 1))
        assert dist.total == 1

    def test_order_invariant(self):
        rows = pairs(("2024-01-01", "A"), ("2024-01-02", "B"), ("2024-01-01", "B"))
        a = period_distribution(rows, D(2024, 1, 1), D(2024, 1, 2))
        b = period_distribution(list(reversed(rows)), D(2024, 1, 1), D(2024, 1, 2))
        assert a.shares == b.shares


class TestCompare:
    def _dists(self):
        d1 = period_distribution(pairs(("2024-01-01", "A")), D(2024, 1, 1), D(2024, 1, 7))
        rows2 = pairs(
            ("2024-02-01", "A"), ("2024-02-01", "A"), ("2024-02-02", "B"),
            ("2024-02-02", "B"), ("2024-02-03", "B"),
        )
        d2 = period_distribution(rows2, D(2024, 2, 1), D(2024, 2, 7))
        return d1, d2

    def test_identical_periods_zero_delta(self):
        d1, _ = self._dists()
        delta = compare_periods(d1, d1)
        assert all(v == 0.0 for v in delta.deltas.values())

    def test_signed_pp_deltas(self):
        d1, d2 = self._dists()
        delta = compare_periods(d1, d2)
        assert delta.deltas["A"] == pytest.approx(-60.0)
        assert delta.deltas["B"] == pytest.approx(60.0)

    def test_antisymmetric(self):
        d1, d2 = self._dists()
        forward = compare_periods(d1, d2)
        backward = compare_periods(d2, d1)
        for lab in forward.deltas:
            assert forward.deltas[lab] == pytest.approx(-backward.deltas[lab])

    def test_deltas_sum_to_zero(self):
        d1, d2 = self._dists()
        assert sum(compare_periods(d1, d2).deltas.values()) == pytest.approx(0.0, abs=1e-6)

    def test_sorted_rows_by_magnitude(self):
        d1, d2 = self._dists()
        rows = compare_periods(d1, d2).sorted_rows()
        mags = [abs(v) for _, v in rows]
        assert mags == sorted(mags, reverse=True)


def test_report_files(tmp_path):
    d1 = period_distribution(pairs(("2024-01-01", "A")), D(2024, 1, 1), D(2024, 1, 7))
    d2 = period_distribution(
        pairs(("2024-02-01", "A"), ("2024-02-01", "B")), D(2024, 2, 1), D(2024, 2, 7)
    )
    write_trend_report(tmp_path / "trend", d1, d2)
    csv_text = (tmp_path / "trend.csv").read_text()
    assert csv_text.splitlines()[0] == "label,share1,share2,delta_pp"
    blob = json.loads((tmp_path / "trend.json").read_text())
    assert blob["period1"]["total_windows"] == 1
    assert blob["delta_pp"]["B"] == pytest.approx(50.0)
