import datetime as dt
import logging

import numpy as np
import pytest

from metaimpact.datamodel import (
    DailyBar,
    MarketSeries,
    Metaorder,
    build_panel,
    clean_panel,
)
from metaimpact.simulator import (
    FlowParams,
    PropagatorParams,
    SimConfig,
    simulate_panel,
)

logging.getLogger("metaimpact").setLevel(logging.ERROR)


def make_day(i: int) -> dt.date:
    return dt.date(2007, 1, 1) + dt.timedelta(days=i)


def simple_bar(sid="S0", day=None, close=100.0, sigma=0.02, volume=1e6):
    day = day or make_day(0)
    return DailyBar(
        stock_id=sid,
        day=day,
        open=100.0,
        high=max(100.0, close) + 100.0 * sigma / 2,
        low=min(100.0, close) - 100.0 * sigma / 2,
        close=close,
        total_volume=volume,
    )


def simple_order(sid="S0", day=None, sign=1, volume=1000.0, v_start=0.2,
                 v_end=0.4, day_volume=1e6, p_start=None, p_end=None):
    day = day or make_day(0)
    return Metaorder(
        stock_id=sid,
        day=day,
        sign=sign,
        volume=volume,
        start_time=34200.0 + v_start * 23400.0,
        end_time=34200.0 + v_end * 23400.0,
        vol_at_start=v_start * day_volume,
        vol_at_end=v_end * day_volume,
        price_at_start=p_start,
        price_at_end=p_end,
    )


def tiny_market(days):
    return MarketSeries(tuple(days), tuple(0.0 for _ in days))


@pytest.fixture(scope="session")
def decay_oracle_panel():
    """Noiseless isolated-order panel: impacts follow the propagator."""
    cfg = SimConfig(
        n_stocks=30,
        n_days=200,
        seed=3,
        noise_scale=0.0,
        market_variance=0.0,
        isolation=True,
        fixed_duration=0.1,
        constant_volume=True,
    )
    res = simulate_panel(FlowParams(), cfg, PropagatorParams(0.22, 0.5))
    return clean_panel(res.panel).panel


@pytest.fixture(scope="session")
def white_kernel_sim():
    """White flow, zero noise, explicit short kernel: exact identification."""
    kernel = tuple(
        float(g)
        for g in 0.3 * np.exp(-0.15 * np.arange(9)) * np.array([1.0] + [-0.4] * 8)
    )
    cfg = SimConfig(
        n_stocks=6, n_days=200, seed=11, noise_scale=0.0, market_variance=0.0,
        kernel=kernel,
    )
    return simulate_panel(FlowParams(), cfg), np.array(kernel)


@pytest.fixture(scope="session")
def correlated_kernel_sim():
    """Correlated flow with noise over a plateau kernel (realistic run)."""
    from metaimpact.simulator import modified_propagator_kernel

    kernel, meta = modified_propagator_kernel(
        50, asymptote=0.7, decay_rate=0.1, decay_exponent=0.22, scale=0.5
    )
    flow = FlowParams(
        autocorr_amplitude=0.24, phi_min=1e-3, size_tail_exponent=0.6
    )
    cfg = SimConfig(
        n_stocks=100, n_days=880, seed=17, noise_scale=0.005,
        market_variance=1e-4, kernel=kernel, kernel_meta=meta,
    )
    return simulate_panel(flow, cfg), np.array(kernel)
