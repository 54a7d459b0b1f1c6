"""Synthetic market generator with known ground truth.

The generator produces panels on which the estimation pipeline can be
checked against closed forms: metaorder sizes follow truncated power
laws, daily net flow carries a configurable autocorrelation, and prices
follow one of two regimes selected by ``SimConfig.kernel``:

* ``kernel`` given (a list of daily lag coefficients): close-to-close
  returns are generated exactly by the quasi-linear model
  ``r = beta * r_mkt + sum_l kernel[l] * sigma * adjusted_root_flow(t-l)
  + noise (+ overnight gap)``, which makes kernel deconvolution exactly
  identifiable at zero noise.
* ``kernel=None``: intraday propagator dynamics.  A metaorder's impact
  grows as the square root of its executed daily fraction, peaks at
  ``prefactor * sigma * sqrt(fraction)``, relaxes along the propagator
  profile through its own and the following day's close (in volume
  time, overnight excluded), and is held constant afterwards.

Correlated flow uses a latent stationary Gaussian process mapped
through a monotone odd marginal transform; the latent autocorrelation
is solved per lag by 1-D inversion of the Hermite-polynomial transfer
map so that the signed-root imbalance matches the target
autocorrelation.  Days without orders carry exactly zero flow through
an atom of the marginal transform.

Randomness splits from the master seed through named substreams:
``SeedSequence(seed, spawn_key=(0,))`` drives the market factor,
``(1, i)`` flows and orders of stock ``i``, ``(2, i)`` its noise and
price path, and ``(3, i)`` violation injection.  Per-stock work is
therefore order-independent and bit-reproducible under parallel
generation.
"""

from __future__ import annotations

import datetime as dt
import functools
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .datamodel import (
    MARKET_CLOSE_S,
    MARKET_OPEN_S,
    DailyBar,
    MarketSeries,
    Metaorder,
    Panel,
    build_panel,
)
from .errors import ConfigError
from .flowstats import daily_imbalance
from .impact import propagator_decay

_HERMITE_DEGREE = 51
_HERMITE_NODES = 8001
_PSD_CHECK_LAGS = 384


@dataclass(frozen=True)
class PropagatorParams:
    """Transient-impact ground truth: peak scale and relaxation shape."""

    decay_exponent: float = 0.22
    prefactor: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.decay_exponent < 1.0:
            raise ConfigError("decay_exponent must lie in (0, 1)")
        if self.prefactor <= 0.0:
            raise ConfigError("prefactor must be positive")


@dataclass(frozen=True)
class FlowParams:
    """Order-flow ground truth.

    ``autocorr_*`` set the target autocorrelation of the signed-root
    imbalance, amplitude * lag**(-exponent) * exp(-rate * lag); zero
    amplitude yields white flow.  Size/participation distributions are
    truncated Pareto laws; ``orders_per_day`` is the Poisson intensity
    of the per-stock-day order count.
    """

    autocorr_amplitude: float = 0.0
    autocorr_decay_rate: float = 0.038
    autocorr_exponent: float = 0.56
    size_tail_exponent: float = 0.7
    phi_min: float = 1e-4
    phi_max: float = 0.4
    participation_tail_exponent: float = 0.8
    participation_min: float = 1e-3
    participation_max: float = 0.5
    orders_per_day: float = 1.0

    def __post_init__(self):
        if self.autocorr_amplitude < 0:
            raise ConfigError("autocorrelation amplitude must be >= 0")
        if self.autocorr_decay_rate <= 0 or self.autocorr_exponent <= 0:
            raise ConfigError("autocorrelation rate and exponent must be > 0")
        if not 0 < self.phi_min < self.phi_max <= self.participation_max:
            raise ConfigError("need 0 < phi_min < phi_max <= participation_max")
        if not 0 < self.participation_min < self.participation_max < 1.0:
            raise ConfigError("participation bounds must satisfy 0 < lo < hi < 1")
        if self.orders_per_day <= 0:
            raise ConfigError("orders_per_day must be positive")


@dataclass(frozen=True)
class SimConfig:
    """Panel shape, randomness, noise scales and the ground-truth kernel.

    ``isolation=True`` switches to the decay-oracle schedule: at most
    one order per stock-day, placed on alternating days with a fixed
    volume-time duration and gridded start positions, so no relaxation
    window of one order overlaps another order's execution or
    measurement marks.
    """

    n_stocks: int
    n_days: int
    seed: int
    noise_scale: float = 0.01
    market_variance: float = 0.0
    overnight_gap_scale: float = 0.0
    capm_beta: float = 1.0
    kernel: tuple[float, ...] | None = None
    kernel_meta: dict | None = None
    start_price: float = 100.0
    sigma_log_mean: float = math.log(0.025)
    sigma_log_sd: float = 0.25
    volume_log_mean: float = math.log(1e6)
    volume_log_sd: float = 0.5
    constant_sigma: bool = False
    constant_volume: bool = False
    isolation: bool = False
    fixed_duration: float = 0.1
    start_grid: int = 91
    first_day: dt.date = dt.date(2007, 1, 2)
    tranche_volume_factors: tuple[float, ...] = (0.3, 1.0, 3.0)
    tranche_names: tuple[str, ...] = ("small", "mid", "large")

    def __post_init__(self):
        if self.n_stocks < 1 or self.n_days < 2:
            raise ConfigError("need at least 1 stock and 2 days")
        if self.kernel is not None:
            if len(self.kernel) == 0:
                raise ConfigError("explicit kernel must have at least lag 0")
            if len(self.kernel) > self.n_days:
                raise ConfigError(
                    f"kernel horizon {len(self.kernel)} exceeds the "
                    f"{self.n_days}-day simulation"
                )
            object.__setattr__(self, "kernel", tuple(float(g) for g in self.kernel))
        if self.isolation and not 0.0 < self.fixed_duration <= 1.0:
            raise ConfigError("fixed_duration must lie in (0, 1]")
        if len(self.tranche_volume_factors) != len(self.tranche_names):
            raise ConfigError("tranche factors and names must align")


@dataclass(frozen=True)
class SimResult:
    panel: Panel
    ground_truth: dict


def modified_propagator_kernel(
    horizon: int,
    asymptote: float,
    decay_rate: float,
    decay_exponent: float = 0.22,
    scale: float = 0.3,
) -> tuple[tuple[float, ...], dict]:
    """Daily lag coefficients whose cumulative sum follows the modified
    propagator profile asymptote + (1-asymptote)*I_prop(t)*exp(-rate*t).

    Returns (lag coefficients, metadata dict) ready for ``SimConfig``.
    """
    taus = np.arange(horizon + 1, dtype=float)
    profile = asymptote + (1.0 - asymptote) * propagator_decay(
        taus, decay_exponent
    ) * np.exp(-decay_rate * taus)
    cum = scale * profile
    lags = np.diff(cum, prepend=0.0)
    lags[0] = cum[0]
    meta = {
        "family": "modified_propagator",
        "asymptote": asymptote,
        "decay_rate": decay_rate,
        "decay_exponent": decay_exponent,
        "scale": scale,
    }
    return tuple(float(g) for g in lags), meta


# ---------------------------------------------------------------------------
# Correlated sign series via a latent Gaussian copula
# ---------------------------------------------------------------------------


def _trunc_pareto_ppf(u, tail: float, lo: float, hi: float):
    """Quantile function of a Pareto law truncated to [lo, hi]."""
    lo_p, hi_p = lo**-tail, hi**-tail
    return (lo_p - np.asarray(u) * (lo_p - hi_p)) ** (-1.0 / tail)


def _marginal_transform(z: np.ndarray, params: FlowParams) -> np.ndarray:
    """Map standard normals to the signed-root imbalance marginal.

    Odd and monotone: an atom at zero with mass exp(-orders_per_day)
    models orderless days; beyond it the magnitude of the net fraction
    follows the truncated Pareto size law.
    """
    p_zero = math.exp(-params.orders_per_day)
    u = (2.0 * ndtr(np.abs(z)) - 1.0 - p_zero) / (1.0 - p_zero)
    out = np.zeros_like(z, dtype=float)
    live = u > 0.0
    mag = _trunc_pareto_ppf(
        u[live], params.size_tail_exponent, params.phi_min, params.phi_max
    )
    out[live] = np.sign(z[live]) * np.sqrt(mag)
    return out


@functools.lru_cache(maxsize=8)
def _transfer_polynomial(params: FlowParams) -> np.ndarray:
    """Squared Hermite weights of the marginal transform.

    The autocorrelation of the transformed series at latent correlation
    r is ``sum_k q[k] * r**k`` with these q (odd k only; the sum over k
    is the fraction of marginal variance the expansion captures).
    Coefficients use the orthonormal Hermite recurrence, which stays
    well-scaled at high order where raw Hermite values overflow.
    """
    x = np.linspace(-10.0, 10.0, _HERMITE_NODES)
    dx = x[1] - x[0]
    weight = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi) * dx
    h_vals = _marginal_transform(x, params)
    variance = float(np.sum(weight * h_vals * h_vals))
    if variance <= 0:
        raise ConfigError("degenerate marginal transform")
    q = np.zeros(_HERMITE_DEGREE + 1)
    prev = np.ones_like(x)
    cur = x.copy()
    for k in range(1, _HERMITE_DEGREE + 1):
        if k % 2 == 1:
            q[k] = float(np.sum(weight * h_vals * cur)) ** 2
        nxt = (x * cur - math.sqrt(k) * prev) / math.sqrt(k + 1.0)
        prev, cur = cur, nxt
    # Normalize by the true marginal variance, not the captured Hermite
    # mass; otherwise the realized autocorrelation lands a factor
    # (captured/total) below the target.
    return q / variance


@functools.lru_cache(maxsize=16)
def _latent_autocorr(params: FlowParams, n_lags: int) -> np.ndarray:
    """Latent Gaussian autocorrelations reproducing the target law.

    Cached: the inversion and its positive-semidefiniteness check run
    once per configuration, not once per stock.
    """
    lags = np.arange(1, n_lags + 1, dtype=float)
    target = (
        params.autocorr_amplitude
        * lags**-params.autocorr_exponent
        * np.exp(-params.autocorr_decay_rate * lags)
    )
    q = _transfer_polynomial(params)
    powers = np.arange(q.size)

    def transfer(r: float) -> float:
        return float(np.sum(q * r**powers))

    reachable = transfer(1.0)
    rho = np.zeros(n_lags)
    for i, g in enumerate(target):
        if g <= 0.0:
            rho[i] = 0.0
        elif g >= reachable:
            raise ConfigError(
                f"target autocorrelation {g:.3f} at lag {i + 1} exceeds the "
                f"{reachable:.3f} reachable under this marginal"
            )
        else:
            rho[i] = brentq(lambda r: transfer(r) - g, 0.0, 1.0, xtol=1e-12)
    _check_psd(rho)
    rho.flags.writeable = False
    return rho


def _check_psd(rho: np.ndarray) -> None:
    """Reject latent autocorrelations that are not positive semidefinite.

    One Cholesky of the Toeplitz matrix decides; on failure the leading
    principal minors are walked to name the offending lag.
    """
    n = min(rho.size, _PSD_CHECK_LAGS)
    full = np.concatenate([[1.0], rho[:n]])
    idx = np.abs(np.subtract.outer(np.arange(n + 1), np.arange(n + 1)))
    mat = full[idx] + 1e-12 * np.eye(n + 1)
    try:
        np.linalg.cholesky(mat)
        return
    except np.linalg.LinAlgError:
        pass
    for m in range(2, n + 2):
        try:
            np.linalg.cholesky(mat[:m, :m])
        except np.linalg.LinAlgError:
            raise ConfigError(
                f"target autocorrelation is not positive semidefinite at lag {m - 1}"
            ) from None


def _stationary_gaussian(
    rho: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Exact stationary Gaussian sample via circulant embedding."""
    L = rho.size
    m = 1
    while m < 2 * (n + L + 1):
        m <<= 1
    circ = np.zeros(m)
    circ[0] = 1.0
    circ[1 : L + 1] = rho
    circ[m - L :] = rho[::-1]
    lam = np.fft.rfft(circ).real
    floor = -1e-8 * lam.max()
    if lam.min() < floor:
        raise ConfigError(
            "circulant embedding of the target autocorrelation has a "
            "negative spectrum; reduce the correlation horizon"
        )
    lam = np.clip(lam, 0.0, None)
    half = m // 2
    w = np.zeros(m, dtype=complex)
    w[0] = math.sqrt(lam[0] / m) * rng.standard_normal()
    w[half] = math.sqrt(lam[half] / m) * rng.standard_normal()
    a = rng.standard_normal(half - 1)
    b = rng.standard_normal(half - 1)
    body = np.sqrt(lam[1:half] / (2.0 * m)) * (a + 1j * b)
    w[1:half] = body
    w[half + 1 :] = np.conj(body[::-1])
    return np.fft.fft(w).real[:n]


def _correlation_horizon(params: FlowParams, n_days: int) -> int:
    """Lag beyond which the target law is numerically negligible."""
    horizon = int(math.log(max(params.autocorr_amplitude, 1e-12) / 1e-9)
                  / params.autocorr_decay_rate) + 1
    return max(1, min(horizon, n_days, 4096))


def generate_sign_series(
    params: FlowParams, n_days: int, seed: int | np.random.SeedSequence
) -> np.ndarray:
    """One stock's daily net-fraction series with the target flow law.

    The signed square root of the returned series has population
    autocorrelation equal to the configured truncated power law; zero
    entries mark orderless days.
    """
    rng = np.random.default_rng(seed)
    if params.autocorr_amplitude == 0.0:
        z = rng.standard_normal(n_days)
    else:
        rho = _latent_autocorr(params, _correlation_horizon(params, n_days))
        z = _stationary_gaussian(rho, n_days, rng)
    root = _marginal_transform(z, params)
    return np.sign(root) * root**2


# ---------------------------------------------------------------------------
# Metaorder generation
# ---------------------------------------------------------------------------

# Intraday cumulative-volume template: U-shaped trading rate.
_CURVE_FRACTIONS = np.array([0.0, 0.15, 0.35, 0.5, 0.65, 0.85, 1.0])
_CURVE_VOLUMES = np.array([0.0, 0.22, 0.42, 0.5, 0.58, 0.78, 1.0])
_CURVE_TIMES = MARKET_OPEN_S + _CURVE_FRACTIONS * (MARKET_CLOSE_S - MARKET_OPEN_S)

# Orders are generated to survive the default cleaning thresholds; the
# per-order fraction floor keeps implied durations above the default
# minimum with a 2% margin.
_PART_FLOOR_MARGIN = 1.02
_DEFAULT_MIN_DURATION = 1e-4


def _time_at_fraction(v: np.ndarray) -> np.ndarray:
    return np.interp(v, _CURVE_VOLUMES, _CURVE_TIMES)


def _zero_truncated_poisson(
    rng: np.random.Generator, lam: float, size: int
) -> np.ndarray:
    out = rng.poisson(lam, size)
    bad = out == 0
    while np.any(bad):
        out[bad] = rng.poisson(lam, int(bad.sum()))
        bad = out == 0
    return out


@dataclass
class _StockOrders:
    """Array bundle for one stock's orders, volume-time coordinates."""

    day_idx: np.ndarray
    sign: np.ndarray
    phi: np.ndarray
    eta: np.ndarray
    v_start: np.ndarray
    v_end: np.ndarray


def _draw_orders_for_flow(
    flow_series: np.ndarray, params: FlowParams, rng: np.random.Generator
) -> _StockOrders:
    """Split each day's net fraction into signed order fractions.

    All orders of a day share the sign of the net flow and their
    fractions sum to it exactly; single-order days reproduce the size
    law directly, multi-order days split by normalized Pareto weights
    with a floor that keeps every implied duration above the default
    cleaning threshold.
    """
    flow_days = np.flatnonzero(flow_series)
    mag = np.abs(flow_series[flow_days])
    part_floor = (
        _PART_FLOOR_MARGIN * _DEFAULT_MIN_DURATION * params.participation_max
    )
    k = _zero_truncated_poisson(rng, params.orders_per_day, flow_days.size)
    k = np.minimum(k, np.maximum((mag / part_floor).astype(int), 1))
    total = int(k.sum())
    day_of_order = np.repeat(flow_days, k)
    mag_of_order = np.repeat(mag, k)
    raw = _trunc_pareto_ppf(
        rng.random(total), params.size_tail_exponent, params.phi_min, params.phi_max
    )
    offsets = np.concatenate([[0], np.cumsum(k)[:-1]])
    seg_sum = np.add.reduceat(raw, offsets)
    w = raw / np.repeat(seg_sum, k)
    floor_frac = part_floor / mag_of_order
    k_of_order = np.repeat(k, k)
    w = floor_frac + (1.0 - k_of_order * floor_frac) * w
    phi = w * mag_of_order
    sign = np.sign(np.repeat(flow_series[flow_days], k)).astype(int)
    lo = np.maximum(phi, params.participation_min)
    eta = _trunc_pareto_ppf(
        rng.random(total), params.participation_tail_exponent,
        lo, params.participation_max,
    )
    duration = phi / eta
    v_start = rng.random(total) * (1.0 - duration)
    return _StockOrders(day_of_order, sign, phi, eta, v_start, v_start + duration)


def _draw_isolated_orders(
    n_days: int, params: FlowParams, cfg: SimConfig, rng: np.random.Generator
) -> _StockOrders:
    """Decay-oracle schedule: one order every second day, fixed duration."""
    days = np.arange(0, n_days - 1, 2)
    n = days.size
    d = cfg.fixed_duration
    grid = np.linspace(0.0, 1.0 - d, cfg.start_grid)
    v_start = grid[rng.integers(0, cfg.start_grid, n)]
    sign = rng.choice(np.array([-1, 1]), n)
    eta = _trunc_pareto_ppf(
        rng.random(n), params.participation_tail_exponent,
        np.full(n, params.participation_min), params.participation_max,
    )
    phi = eta * d
    return _StockOrders(days, sign, phi, eta, v_start, v_start + d)


# ---------------------------------------------------------------------------
# Panel assembly
# ---------------------------------------------------------------------------


def _weekday_calendar(first_day: dt.date, n_days: int) -> tuple[dt.date, ...]:
    days = []
    cur = first_day
    while len(days) < n_days:
        if cur.weekday() < 5:
            days.append(cur)
        cur += dt.timedelta(days=1)
    return tuple(days)


def _stock_ids(n: int) -> tuple[str, ...]:
    width = max(4, len(str(n - 1)))
    return tuple(f"S{i:0{width}d}" for i in range(n))


def _tranche_map(cfg: SimConfig) -> tuple[dict[str, str], np.ndarray]:
    sids = _stock_ids(cfg.n_stocks)
    n_groups = len(cfg.tranche_names)
    labels = {}
    factors = np.empty(cfg.n_stocks)
    for i, sid in enumerate(sids):
        g = min(i * n_groups // cfg.n_stocks, n_groups - 1)
        labels[sid] = cfg.tranche_names[g]
        factors[i] = cfg.tranche_volume_factors[g]
    return labels, factors


def _stock_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stream, index))
    )


def _draw_stock_days(
    cfg: SimConfig, rng: np.random.Generator, volume_factor: float
) -> tuple[np.ndarray, np.ndarray]:
    """(total volume, target volatility proxy) per day for one stock."""
    if cfg.constant_volume:
        v_d = np.full(cfg.n_days, math.exp(cfg.volume_log_mean) * volume_factor)
    else:
        v_d = volume_factor * rng.lognormal(
            cfg.volume_log_mean, cfg.volume_log_sd, cfg.n_days
        )
    if cfg.constant_sigma:
        sigma = np.full(cfg.n_days, math.exp(cfg.sigma_log_mean))
    else:
        sigma = rng.lognormal(cfg.sigma_log_mean, cfg.sigma_log_sd, cfg.n_days)
    return v_d, sigma


def generate_metaorders(
    params: FlowParams, cfg: SimConfig, seed: int | None = None
) -> tuple[list[Metaorder], list[DailyBar], MarketSeries]:
    """Orders, provisional bars and the market series for a config.

    Bars carry correct volumes, volume curves and volatility proxies but
    flat placeholder prices; :func:`simulate_prices` replaces them.
    """
    cfg = cfg if seed is None else replace(cfg, seed=seed)
    days = _weekday_calendar(cfg.first_day, cfg.n_days)
    sids = _stock_ids(cfg.n_stocks)
    _, vol_factors = _tranche_map(cfg)
    market_rng = _stock_rng(cfg.seed, 0, 0)
    if cfg.market_variance > 0:
        mkt = market_rng.normal(0.0, math.sqrt(cfg.market_variance), cfg.n_days)
    else:
        mkt = np.zeros(cfg.n_days)
    market = MarketSeries(days, tuple(float(r) for r in mkt))

    orders: list[Metaorder] = []
    bars: list[DailyBar] = []
    for i, sid in enumerate(sids):
        rng = _stock_rng(cfg.seed, 1, i)
        v_d, sigma = _draw_stock_days(cfg, rng, vol_factors[i])
        if cfg.isolation:
            so = _draw_isolated_orders(cfg.n_days, params, cfg, rng)
        else:
            flow = generate_sign_series(
                params, cfg.n_days,
                np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, i, 1)),
            )
            so = _draw_orders_for_flow(flow, params, rng)
        start_t = _time_at_fraction(so.v_start)
        end_t = _time_at_fraction(so.v_end)
        day_vol = v_d[so.day_idx]
        for j in range(so.day_idx.size):
            d = int(so.day_idx[j])
            orders.append(
                Metaorder(
                    stock_id=sid,
                    day=days[d],
                    sign=int(so.sign[j]),
                    volume=float(so.phi[j] * day_vol[j]),
                    start_time=float(start_t[j]),
                    end_time=float(end_t[j]),
                    vol_at_start=float(so.v_start[j] * day_vol[j]),
                    vol_at_end=float(so.v_end[j] * day_vol[j]),
                )
            )
        for t in range(cfg.n_days):
            cps = tuple(
                (float(ct), float(cv * v_d[t]))
                for ct, cv in zip(_CURVE_TIMES, _CURVE_VOLUMES)
            )
            bars.append(
                DailyBar(
                    stock_id=sid,
                    day=days[t],
                    open=cfg.start_price,
                    high=cfg.start_price * (1.0 + sigma[t]),
                    low=cfg.start_price,
                    close=cfg.start_price,
                    total_volume=float(v_d[t]),
                    checkpoints=cps,
                )
            )
    return orders, bars, market


# ---------------------------------------------------------------------------
# Price simulation
# ---------------------------------------------------------------------------


def _bar_arrays(
    bars: list[DailyBar], sids: tuple[str, ...], days: tuple[dt.date, ...]
) -> tuple[np.ndarray, np.ndarray]:
    sid_idx = {s: i for i, s in enumerate(sids)}
    day_idx = {d: t for t, d in enumerate(days)}
    v_d = np.empty((len(sids), len(days)))
    sigma = np.empty_like(v_d)
    for b in bars:
        i, t = sid_idx[b.stock_id], day_idx[b.day]
        v_d[i, t] = b.total_volume
        sigma[i, t] = b.sigma
    return v_d, sigma


def _build_bar(
    sid: str,
    day: dt.date,
    open_p: float,
    close_p: float,
    lo_mark: float,
    hi_mark: float,
    sigma_target: float,
    total_volume: float,
    checkpoints,
) -> tuple[DailyBar, bool]:
    """OHLC bar matching the target volatility proxy when feasible."""
    top = max(open_p, close_p, hi_mark)
    bot = min(open_p, close_p, lo_mark)
    span_target = sigma_target * open_p
    mismatch = False
    if span_target >= top - bot:
        slack = span_target - (top - bot)
        high = top + 0.5 * slack
        low = bot - 0.5 * slack
    else:
        high, low = top, bot
        mismatch = True
    return (
        DailyBar(sid, day, open_p, high, low, close_p, total_volume, checkpoints),
        mismatch,
    )


def simulate_prices(
    orders: list[Metaorder],
    bars: list[DailyBar],
    market: MarketSeries,
    propagator: PropagatorParams,
    cfg: SimConfig,
) -> SimResult:
    """Price the panel and return it with its ground-truth record."""
    days = market.days
    sids = _stock_ids(cfg.n_stocks)
    day_idx = {d: t for t, d in enumerate(days)}
    v_d, sigma_t = _bar_arrays(bars, sids, days)
    mkt = np.asarray(market.returns)

    provisional = build_panel(bars, orders, market)
    flows = daily_imbalance(provisional)
    phi_root = flows.phi_root
    day_mean = phi_root.mean(axis=0)
    adj_root = phi_root - cfg.capm_beta * day_mean[None, :]

    if not orders:
        raise ConfigError("cannot price a panel without metaorders")
    sid_index = {s: i for i, s in enumerate(sids)}
    sid_of = np.array([sid_index[m.stock_id] for m in orders], dtype=int)
    t_of = np.array([day_idx[m.day] for m in orders], dtype=int)
    phi_of = np.array([m.volume for m in orders]) / v_d[sid_of, t_of]
    v_end_of = np.array([m.vol_at_end for m in orders]) / v_d[sid_of, t_of]
    v_start_of = np.array([m.vol_at_start for m in orders]) / v_d[sid_of, t_of]
    sign_of = np.array([m.sign for m in orders], dtype=float)

    priced_orders: list[Metaorder | None] = [None] * len(orders)
    priced_bars: list[DailyBar] = []
    mismatch_days = 0
    checkpoint_of = {(b.stock_id, b.day): b.checkpoints for b in bars}
    order_rows_by_stock: dict[int, list[int]] = {i: [] for i in range(len(sids))}
    for row, i in enumerate(sid_of):
        order_rows_by_stock[int(i)].append(row)

    for i, sid in enumerate(sids):
        rng = _stock_rng(cfg.seed, 2, i)
        gaps = np.zeros(cfg.n_days)
        if cfg.overnight_gap_scale > 0:
            gaps[1:] = rng.normal(0.0, cfg.overnight_gap_scale, cfg.n_days - 1)
        rows = np.array(order_rows_by_stock[i], dtype=int)
        t_rows = t_of[rows] if rows.size else np.empty(0, dtype=int)

        if cfg.kernel is not None:
            noise = (
                rng.normal(0.0, cfg.noise_scale, cfg.n_days)
                if cfg.noise_scale > 0
                else np.zeros(cfg.n_days)
            )
            signal = np.convolve(sigma_t[i] * adj_root[i], cfg.kernel)[: cfg.n_days]
            r_model = cfg.capm_beta * mkt + signal + noise
            log_close = math.log(cfg.start_price) + np.cumsum(r_model + gaps)
            log_open = log_close - r_model
            mark_start = log_open[t_rows] + v_start_of[rows] * r_model[t_rows]
            mark_end = log_open[t_rows] + v_end_of[rows] * r_model[t_rows]
        else:
            peak = (
                propagator.prefactor
                * sigma_t[i, t_rows]
                * np.sqrt(phi_of[rows])
            )
            dur = v_end_of[rows] - v_start_of[rows]
            z_same = (1.0 - v_end_of[rows]) / dur
            relax_same = propagator_decay(z_same, propagator.decay_exponent)
            has_next = t_rows + 1 < cfg.n_days
            z_next = np.where(
                has_next,
                z_same + v_d[i, np.minimum(t_rows + 1, cfg.n_days - 1)]
                / (dur * v_d[i, t_rows]),
                z_same,
            )
            relax_next = propagator_decay(z_next, propagator.decay_exponent)
            delta = np.zeros(cfg.n_days)
            np.add.at(delta, t_rows, sign_of[rows] * peak * relax_same)
            np.add.at(
                delta,
                np.minimum(t_rows + 1, cfg.n_days - 1),
                np.where(has_next, sign_of[rows] * peak * (relax_next - relax_same), 0.0),
            )
            w_start = np.zeros(rows.size)
            w_end = np.zeros(rows.size)
            w_close = np.zeros(cfg.n_days)
            if cfg.noise_scale > 0:
                w_start, w_end, w_close = _intraday_noise(
                    rng, cfg, t_rows, v_start_of[rows], v_end_of[rows]
                )
            r_model = cfg.capm_beta * mkt + w_close + delta
            log_close = math.log(cfg.start_price) + np.cumsum(r_model + gaps)
            log_open = log_close - r_model
            mark_start = (
                log_open[t_rows]
                + v_start_of[rows] * cfg.capm_beta * mkt[t_rows]
                + w_start
            )
            mark_end = (
                log_open[t_rows]
                + v_end_of[rows] * cfg.capm_beta * mkt[t_rows]
                + w_end
                + sign_of[rows] * peak
            )
        hi_mark = np.exp(np.maximum(mark_start, mark_end)) if rows.size else None
        lo_mark = np.exp(np.minimum(mark_start, mark_end)) if rows.size else None

        closes = np.exp(log_close)
        opens = np.exp(log_open)
        hi_of_day = closes.copy()
        lo_of_day = closes.copy()
        if rows.size:
            p_start = np.exp(mark_start)
            p_end = np.exp(mark_end)
            for pos in range(rows.size):
                priced_orders[rows[pos]] = replace(
                    orders[rows[pos]],
                    price_at_start=float(p_start[pos]),
                    price_at_end=float(p_end[pos]),
                )
            np.maximum.at(hi_of_day, t_rows, hi_mark)
            np.minimum.at(lo_of_day, t_rows, lo_mark)
        for t in range(cfg.n_days):
            bar, mism = _build_bar(
                sid, days[t], float(opens[t]), float(closes[t]),
                float(lo_of_day[t]), float(hi_of_day[t]),
                sigma_t[i, t], float(v_d[i, t]), checkpoint_of[(sid, days[t])],
            )
            priced_bars.append(bar)
            mismatch_days += int(mism)

    panel = build_panel(priced_bars, [m for m in priced_orders if m], market,
                        _tranche_map(cfg)[0])
    truth = _ground_truth(cfg, propagator, len(orders), mismatch_days)
    return SimResult(panel, truth)


def _intraday_noise(
    rng: np.random.Generator,
    cfg: SimConfig,
    t_rows: np.ndarray,
    v_start: np.ndarray,
    v_end: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Brownian noise (volume-time clock) at order marks and the close.

    Returns per-order noise at the start/end marks and the per-day
    close value; days share one path so marks stay mutually consistent.
    """
    n_days = cfg.n_days
    scale = cfg.noise_scale
    w_close = rng.normal(0.0, scale, n_days)
    w_start = np.zeros(t_rows.size)
    w_end = np.zeros(t_rows.size)
    order_of_day: dict[int, list[int]] = {}
    for pos, t in enumerate(t_rows):
        order_of_day.setdefault(int(t), []).append(pos)
    for t, positions in order_of_day.items():
        vs = [(v_start[p], p, "s") for p in positions]
        ve = [(v_end[p], p, "e") for p in positions]
        marks = sorted(vs + ve)
        level = 0.0
        prev_v = 0.0
        total = rng.standard_normal(len(marks) + 1)
        for k, (v, p, kind) in enumerate(marks):
            dv = max(v - prev_v, 0.0)
            level += scale * math.sqrt(dv) * total[k]
            prev_v = v
            if kind == "s":
                w_start[p] = level
            else:
                w_end[p] = level
        dv = max(1.0 - prev_v, 0.0)
        w_close[t] = level + scale * math.sqrt(dv) * total[len(marks)]
    return w_start, w_end, w_close


def _ground_truth(
    cfg: SimConfig,
    propagator: PropagatorParams,
    n_orders: int,
    mismatch_days: int,
) -> dict:
    kernel = None if cfg.kernel is None else list(cfg.kernel)
    truth = {
        "mode": "daily_kernel" if cfg.kernel is not None else "intraday_propagator",
        "seed": cfg.seed,
        "n_stocks": cfg.n_stocks,
        "n_days": cfg.n_days,
        "capm_beta": cfg.capm_beta,
        "noise_scale": cfg.noise_scale,
        "market_variance": cfg.market_variance,
        "overnight_gap_scale": cfg.overnight_gap_scale,
        "propagator": {
            "decay_exponent": propagator.decay_exponent,
            "prefactor": propagator.prefactor,
        },
        "kernel_lags": kernel,
        "kernel_meta": cfg.kernel_meta,
        "n_metaorders": n_orders,
        "sigma_mismatch_days": mismatch_days,
        "isolation": cfg.isolation,
    }
    if kernel is not None:
        cum = np.cumsum(kernel)
        truth["kernel_cumulative"] = [float(x) for x in cum]
        truth["kernel_normalized"] = [float(x) for x in cum / cum[0]]
    return truth


def simulate_panel(
    flow: FlowParams,
    cfg: SimConfig,
    propagator: PropagatorParams | None = None,
) -> SimResult:
    """Generate orders, bars and prices in one deterministic pass."""
    propagator = propagator or PropagatorParams()
    orders, bars, market = generate_metaorders(flow, cfg)
    result = simulate_prices(orders, bars, market, propagator, cfg)
    result.ground_truth["flow"] = asdict(flow)
    return result


# ---------------------------------------------------------------------------
# Violation injection (cleaning oracle)
# ---------------------------------------------------------------------------

_VIOLATION_KINDS = (
    "zero_duration",
    "participation_cap",
    "daily_fraction_cap",
    "invalid_record",
    "duration_floor",
    "missing_bar",
    "zero_volatility_day",
)


def inject_violations(
    panel: Panel, fraction: float, seed: int
) -> tuple[Panel, dict]:
    """Corrupt a fraction of orders so each default filter must fire.

    Returns the corrupted panel and a tag record with the exact set of
    order indices a correct cleaner must reject (zero-volatility days
    sweep every order of the affected stock-day into the tag set).
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3, 0)))
    orders = list(panel.metaorders)
    n_pick = max(len(_VIOLATION_KINDS), int(round(fraction * len(orders))))
    if n_pick >= len(orders):
        raise ConfigError("panel too small for the requested violation fraction")
    picked = rng.choice(len(orders), size=n_pick, replace=False)
    bars = dict(panel.bars)
    tagged: set[int] = set()
    by_kind: dict[str, list[int]] = {k: [] for k in _VIOLATION_KINDS}
    far_day = panel.days[-1] + dt.timedelta(days=30)

    by_stock_day: dict[tuple[str, dt.date], list[int]] = {}
    for idx, m in enumerate(orders):
        by_stock_day.setdefault((m.stock_id, m.day), []).append(idx)

    for pos, idx in enumerate(sorted(int(j) for j in picked)):
        if idx in tagged:
            continue
        kind = _VIOLATION_KINDS[pos % len(_VIOLATION_KINDS)]
        m = orders[idx]
        bar = panel.bars[(m.stock_id, m.day)]
        if kind == "zero_duration":
            orders[idx] = replace(m, end_time=m.start_time, vol_at_end=m.vol_at_start)
            tagged.add(idx)
        elif kind == "participation_cap":
            orders[idx] = replace(m, vol_at_end=m.vol_at_start + m.volume / 0.6)
            tagged.add(idx)
        elif kind == "daily_fraction_cap":
            orders[idx] = replace(
                m,
                volume=1.2 * bar.total_volume,
                vol_at_start=0.0,
                vol_at_end=3.0 * bar.total_volume,
            )
            tagged.add(idx)
        elif kind == "invalid_record":
            orders[idx] = replace(m, sign=0)
            tagged.add(idx)
        elif kind == "duration_floor":
            interval = 0.5 * _DEFAULT_MIN_DURATION * bar.total_volume
            orders[idx] = replace(
                m,
                vol_at_end=m.vol_at_start + interval,
                volume=0.4 * interval,
            )
            tagged.add(idx)
        elif kind == "missing_bar":
            orders[idx] = replace(m, day=far_day)
            tagged.add(idx)
        else:  # zero_volatility_day
            key = (m.stock_id, m.day)
            swept = by_stock_day[key]
            if any(j in tagged for j in swept):
                orders[idx] = replace(m, sign=0)
                kind = "invalid_record"
                tagged.add(idx)
            else:
                bars[key] = replace(bar, high=bar.open, low=bar.open, close=bar.open)
                tagged.update(swept)
        by_kind[kind].append(idx)

    corrupted = Panel(
        panel.stocks, panel.days, bars, tuple(orders), panel.market, panel.tranches
    )
    record = {
        "fraction": fraction,
        "tagged_indices": sorted(tagged),
        "by_kind": {k: sorted(v) for k, v in by_kind.items()},
    }
    return corrupted, record
