import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metaimpact.datamodel import (
    CleaningConfig,
    DailyBar,
    MarketSeries,
    Metaorder,
    Panel,
    build_panel,
    clean_panel,
    load_panel,
    metaorder_stats,
    read_metaorders_csv,
    rescaled_log_price,
    signed_sqrt,
    write_panel,
)
from metaimpact.errors import (
    ConfigError,
    DataError,
    DegenerateExecutionError,
    ParticipationOverflowError,
)
from metaimpact.simulator import (
    FlowParams,
    PropagatorParams,
    SimConfig,
    inject_violations,
    simulate_panel,
)

from conftest import make_day, simple_bar, simple_order, tiny_market


class TestSignedSqrt:
    def test_perfect_square(self):
        assert signed_sqrt(4.0) == 2.0

    def test_zero(self):
        assert signed_sqrt(0.0) == 0.0

    def test_odd_symmetry(self):
        assert signed_sqrt(-9.0) == -3.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            signed_sqrt(float("nan"))
        with pytest.raises(ValueError):
            signed_sqrt(np.array([1.0, np.inf]))

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
    def test_odd_and_increasing(self, a, b):
        assert signed_sqrt(-a) == -signed_sqrt(a)
        if a < b:
            assert signed_sqrt(a) < signed_sqrt(b)

    def test_vectorized(self):
        out = signed_sqrt(np.array([4.0, -9.0, 0.0]))
        assert np.array_equal(out, [2.0, -3.0, 0.0])


class TestMetaorderStats:
    def test_direct_ratios(self):
        order = simple_order(volume=1000.0, v_start=0.2, v_end=0.21, day_volume=1e5)
        bar = simple_bar(volume=1e5)
        stats = metaorder_stats(order, bar)
        assert stats.participation_rate == pytest.approx(1.0, abs=0)
        order = Metaorder("S0", make_day(0), 1, 1000.0, 34200.0, 40000.0,
                          10000.0, 20000.0)
        stats = metaorder_stats(order, simple_bar(volume=1e5))
        assert stats.participation_rate == pytest.approx(0.1)
        assert stats.duration == pytest.approx(0.1)
        assert stats.daily_fraction == pytest.approx(0.01)

    def test_fraction_is_product(self):
        order = Metaorder("S0", make_day(0), -1, 500.0, 34200.0, 50000.0,
                          0.0, 5000.0)
        stats = metaorder_stats(order, simple_bar(volume=1e4))
        assert stats.daily_fraction == stats.participation_rate * stats.duration

    def test_boundary_participation(self):
        order = Metaorder("S0", make_day(0), 1, 5000.0, 34200.0, 50000.0,
                          0.0, 5000.0)
        stats = metaorder_stats(order, simple_bar(volume=1e4))
        assert stats.participation_rate == 1.0

    def test_zero_interval_rejected(self):
        order = Metaorder("S0", make_day(0), 1, 100.0, 34200.0, 34200.0,
                          5000.0, 5000.0)
        with pytest.raises(DegenerateExecutionError):
            metaorder_stats(order, simple_bar())

    def test_overflow_rejected(self):
        order = Metaorder("S0", make_day(0), 1, 9000.0, 34200.0, 50000.0,
                          0.0, 5000.0)
        with pytest.raises(ParticipationOverflowError):
            metaorder_stats(order, simple_bar(volume=1e4))


class TestRescaledLogPrice:
    def test_log_identity(self):
        assert rescaled_log_price(math.e, 1.0) == pytest.approx(1.0)

    def test_unit_price(self):
        assert rescaled_log_price(1.0, 0.37) == 0.0

    def test_ratio(self):
        assert rescaled_log_price(math.e**2, 2.0) == pytest.approx(1.0)

    def test_rejects_zero_sigma(self):
        with pytest.raises(ValueError):
            rescaled_log_price(100.0, 0.0)


class TestDailyBar:
    def test_sigma_proxy(self):
        bar = DailyBar("S0", make_day(0), 100.0, 103.0, 99.0, 101.0, 1e6)
        assert bar.sigma == pytest.approx(0.04)

    def test_volume_curve_interpolation(self):
        cps = ((34200.0, 0.0), (45000.0, 4e5), (57600.0, 1e6))
        bar = DailyBar("S0", make_day(0), 100, 102, 99, 101, 1e6, cps)
        assert bar.cumulative_volume(34200.0) == 0.0
        assert bar.cumulative_volume(57600.0) == 1e6
        mid = bar.cumulative_volume(39600.0)
        assert 0 < mid < 4e5
        assert bar.time_at_volume(mid) == pytest.approx(39600.0)

    def test_default_linear_curve(self):
        bar = simple_bar(volume=2e6)
        assert bar.cumulative_volume(45900.0) == pytest.approx(1e6)


class TestPanel:
    def test_calendar_must_increase(self):
        days = (make_day(1), make_day(0))
        with pytest.raises(DataError):
            Panel(("S0",), days, {}, (), tiny_market(days))

    def test_return_matrix_first_day_is_open_to_close(self):
        days = [make_day(0), make_day(1)]
        bars = [simple_bar(day=days[0], close=102.0),
                simple_bar(day=days[1], close=104.0)]
        panel = build_panel(bars, [], tiny_market(days))
        r = panel.return_matrix()
        assert r[0, 0] == pytest.approx(math.log(102.0 / 100.0))
        assert r[0, 1] == pytest.approx(math.log(104.0 / 102.0))

    def test_tranche_restriction(self):
        days = [make_day(0)]
        bars = [simple_bar("A", days[0]), simple_bar("B", days[0])]
        orders = [simple_order("A", days[0]), simple_order("B", days[0])]
        panel = build_panel(bars, orders, tiny_market(days), {"A": "big", "B": "small"})
        sub = panel.restrict_tranche("big")
        assert sub.stocks == ("A",)
        assert len(sub.metaorders) == 1
        with pytest.raises(ConfigError):
            panel.restrict_tranche("absent")


class TestCleaning:
    def _panel_with(self, orders, bars=None):
        days = sorted({o.day for o in orders})
        if bars is None:
            keys = {(o.stock_id, o.day) for o in orders}
            bars = [simple_bar(sid, day) for sid, day in keys]
        return build_panel(bars, orders, tiny_market(days))

    def test_zero_duration_removed_and_counted(self):
        good = simple_order(volume=100.0)
        bad = Metaorder("S0", make_day(0), 1, 100.0, 40000.0, 40000.0,
                        2e5, 2e5)
        result = clean_panel(self._panel_with([good, bad]))
        assert result.rejections["zero_duration"] == 1
        assert len(result.panel.metaorders) == 1
        assert result.rejected_indices == (1,)

    def test_all_valid_is_identity(self):
        orders = [simple_order(volume=100.0), simple_order(volume=200.0, v_start=0.5, v_end=0.7)]
        result = clean_panel(self._panel_with(orders))
        assert result.panel.metaorders == tuple(orders)
        assert sum(result.rejections.values()) == 0

    def test_idempotent(self):
        orders = [simple_order(volume=100.0),
                  Metaorder("S0", make_day(0), 0, 100.0, 34200.0, 40000.0, 0.0, 1e5)]
        once = clean_panel(self._panel_with(orders))
        twice = clean_panel(once.panel)
        assert twice.panel.metaorders == once.panel.metaorders
        assert sum(twice.rejections.values()) == 0

    def test_participation_cap(self):
        bad = simple_order(volume=0.31e5, v_start=0.2, v_end=0.25)  # eta = 0.62
        result = clean_panel(self._panel_with([simple_order(volume=100.0), bad]))
        assert result.rejections["participation_cap"] == 1

    def test_zero_volatility_day_drops_bar_and_orders(self):
        days = [make_day(0)]
        flat = DailyBar("S1", days[0], 100.0, 100.0, 100.0, 100.0, 1e6)
        bars = [simple_bar("S0", days[0]), flat]
        orders = [simple_order("S0"), simple_order("S1")]
        result = clean_panel(build_panel(bars, orders, tiny_market(days)))
        assert result.rejections["zero_volatility_day"] == 1
        assert ("S1", days[0]) not in result.panel.bars

    def test_empty_output_is_fatal(self):
        bad = Metaorder("S0", make_day(0), 0, 100.0, 34200.0, 40000.0, 0.0, 1e5)
        with pytest.raises(ConfigError):
            clean_panel(self._panel_with([bad]))

    def test_injected_violations_recovered_exactly(self):
        res = simulate_panel(
            FlowParams(),
            SimConfig(n_stocks=10, n_days=60, seed=4, noise_scale=0.005),
            PropagatorParams(),
        )
        corrupted, record = inject_violations(res.panel, 0.05, seed=99)
        result = clean_panel(corrupted, CleaningConfig())
        assert list(result.rejected_indices) == record["tagged_indices"]
        assert sum(result.rejections.values()) == len(record["tagged_indices"])


class TestCsvRoundTrip:
    def test_panel_round_trip_identity(self, tmp_path):
        res = simulate_panel(
            FlowParams(autocorr_amplitude=0.24),
            SimConfig(n_stocks=4, n_days=30, seed=9, noise_scale=0.003),
            PropagatorParams(),
        )
        write_panel(res.panel, tmp_path)
        again = load_panel(tmp_path)
        assert again.metaorders == res.panel.metaorders
        assert again.days == res.panel.days
        assert again.stocks == res.panel.stocks
        assert set(again.bars) == set(res.panel.bars)
        for key in res.panel.bars:
            assert again.bars[key] == res.panel.bars[key]
        assert again.market == res.panel.market
        assert again.tranches == res.panel.tranches

    def test_metaorders_without_prices(self, tmp_path):
        from metaimpact.datamodel import write_metaorders_csv

        orders = [simple_order(volume=123.0)]
        path = tmp_path / "metaorders.csv"
        write_metaorders_csv(path, orders)
        header = path.read_text().splitlines()[0]
        assert header == ("stock_id,day,sign,volume,start_time,end_time,"
                          "vol_at_start,vol_at_end")
        assert read_metaorders_csv(path) == orders

    def test_empty_metaorder_file_is_data_error(self, tmp_path):
        path = tmp_path / "metaorders.csv"
        path.write_text("stock_id,day,sign,volume,start_time,end_time,"
                        "vol_at_start,vol_at_end\n")
        with pytest.raises(DataError):
            read_metaorders_csv(path)
