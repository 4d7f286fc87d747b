import datetime as dt

import numpy as np
import pytest

from extremecast.climatology import (
    CausalityError,
    ClimatologyState,
    MissingClimatologyError,
    detrend,
    ingest,
    next_step_climatology,
    query,
    query_with_fallback,
    load_state,
    save_state,
)


def d(iso):
    return dt.date.fromisoformat(iso)


class TestIngest:
    def test_running_mean_two_values(self):
        st = ClimatologyState(())
        ingest(st, d("2019-03-02"), np.asarray(0.2))
        ingest(st, d("2019-03-09"), np.asarray(0.6))
        assert st.counts[2] == 2
        assert st.means[2] == pytest.approx(0.4, abs=1e-6)

    def test_causality_guard(self):
        st = ClimatologyState(())
        ingest(st, d("2019-05-01"), np.asarray(1.0))
        with pytest.raises(CausalityError):
            ingest(st, d("2019-04-30"), np.asarray(1.0))

    def test_same_date_allowed(self):
        st = ClimatologyState(())
        ingest(st, d("2019-05-01"), np.asarray(1.0))
        ingest(st, d("2019-05-01"), np.asarray(3.0))
        assert st.counts[4] == 2

    def test_valid_mask_updates_only_valid(self):
        st = ClimatologyState((2, 2))
        vals = np.asarray([[1.0, 2.0], [3.0, 4.0]])
        valid = np.asarray([[1, 0], [0, 1]])
        ingest(st, d("2019-01-05"), vals, valid)
        np.testing.assert_array_equal(st.counts[0], [[1, 0], [0, 1]])
        assert st.means[0][0, 1] == 0.0

    def test_valid_mask_broadcasts_over_channels(self):
        st = ClimatologyState((3, 2, 2))
        vals = np.ones((3, 2, 2))
        valid = np.asarray([[1, 0], [1, 1]])
        ingest(st, d("2019-01-05"), vals, valid)
        assert st.counts[0].sum() == 9

    def test_nan_at_valid_position_rejected(self):
        st = ClimatologyState((2,))
        with pytest.raises(ValueError):
            ingest(st, d("2019-01-05"), np.asarray([np.nan, 1.0]))

    def test_nan_at_invalid_position_ok(self):
        st = ClimatologyState((2,))
        ingest(st, d("2019-01-05"), np.asarray([np.nan, 1.0]),
               np.asarray([0, 1]))
        assert st.counts[0][1] == 1


class TestQuery:
    def fill_monthly(self, values_by_month):
        st = ClimatologyState(())
        for year in (2017, 2018):
            for m, v in values_by_month.items():
                ingest(st, dt.date(year, m, 15), np.asarray(float(v)))
        return st

    def test_exact_center_returns_bin_mean(self):
        st = self.fill_monthly({m: m for m in range(1, 13)})
        assert query(st, d("2019-06-15")) == pytest.approx(6.0, abs=1e-6)

    def test_linear_between_centers(self):
        st = self.fill_monthly({m: m for m in range(1, 13)})
        # Jun 15 -> Jul 15 is 30 days; Jun 25 sits 10/30 toward July
        out = query(st, d("2019-06-25"))
        assert out == pytest.approx(6 + 10 / 30, abs=1e-5)

    def test_december_january_wrap_continuous(self):
        st = self.fill_monthly({m: np.cos(2 * np.pi * m / 12) for m in range(1, 13)})
        a = query(st, d("2018-12-31"))
        b = query(st, d("2019-01-01"))
        # adjacent days across the wrap differ by one day of slope
        dec, jan = st.means[11], st.means[0]
        assert abs((b - a) - (jan - dec) / 31) < 1e-6

    def test_periodic_across_non_leap_years(self):
        st = self.fill_monthly({m: m * 0.1 for m in range(1, 13)})
        assert query(st, d("2018-04-20")) == query(st, d("2019-04-20"))

    def test_empty_bin_raises(self):
        st = ClimatologyState(())
        ingest(st, d("2019-06-15"), np.asarray(1.0))
        with pytest.raises(MissingClimatologyError):
            query(st, d("2019-06-20"))  # July bin empty

    def test_jan_early_uses_december(self):
        st = self.fill_monthly({1: 10.0, 12: 20.0})
        out = query(st, d("2019-01-05"))
        # Dec 15 -> Jan 15 spans 31 days, Jan 5 is 21 days in
        assert out == pytest.approx(20 + (10 - 20) * 21 / 31, abs=1e-5)

    def test_query_is_pure(self):
        st = self.fill_monthly({m: m for m in range(1, 13)})
        before = query(st, d("2019-03-20"))
        snap_means = st.means.copy()
        query(st, d("2019-08-01"))
        np.testing.assert_array_equal(st.means, snap_means)
        assert query(st, d("2019-03-20")) == before


class TestFallback:
    def test_fallback_to_nearest_bin(self):
        st = ClimatologyState(())
        for year in (2017, 2018):
            ingest(st, dt.date(year, 5, 15), np.asarray(5.0))
            ingest(st, dt.date(year, 6, 15), np.asarray(6.0))
        # query bracketing June/July; July empty, nearest filled is June
        vals, nfb = query_with_fallback(st, d("2019-06-20"))
        assert nfb == 1
        w = 5 / 30
        assert vals == pytest.approx((1 - w) * 6.0 + w * 6.0, abs=1e-5)

    def test_no_fallback_matches_query(self):
        st = ClimatologyState(())
        for year in (2017, 2018):
            for m in range(1, 13):
                ingest(st, dt.date(year, m, 15), np.asarray(float(m)))
        vals, nfb = query_with_fallback(st, d("2019-09-02"))
        assert nfb == 0
        assert vals == query(st, d("2019-09-02"))

    def test_totally_empty_position_raises(self):
        st = ClimatologyState(())
        with pytest.raises(MissingClimatologyError):
            query_with_fallback(st, d("2019-06-20"))


class TestHelpers:
    def test_detrend(self):
        out = detrend(np.asarray([3.0, 4.0]), np.asarray([1.0, 1.0]))
        np.testing.assert_allclose(out, [2.0, 3.0])

    def test_detrend_shape_mismatch(self):
        with pytest.raises(ValueError):
            detrend(np.zeros(3), np.zeros(4))

    def test_next_step_climatology_is_shifted_query(self):
        st = ClimatologyState(())
        for year in (2017, 2018):
            for m in range(1, 13):
                ingest(st, dt.date(year, m, 15), np.asarray(float(m)))
        date = d("2019-03-20")
        assert next_step_climatology(st, date, 5) == query(st, d("2019-03-25"))

    def test_save_load_roundtrip(self, tmp_path):
        st = ClimatologyState((2, 2))
        rng = np.random.default_rng(0)
        for k in range(24):
            day = d("2017-01-10") + dt.timedelta(days=30 * k)
            ingest(st, day, rng.normal(size=(2, 2)).astype(np.float32),
                   (rng.random((2, 2)) < 0.8).astype(int))
        save_state(st, tmp_path, "clima_test")
        back = load_state(tmp_path, "clima_test")
        np.testing.assert_array_equal(back.means, st.means)
        np.testing.assert_array_equal(back.counts, st.counts)
        assert back.last_ingested == st.last_ingested
