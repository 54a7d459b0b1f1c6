"""Binned impact curves and post-execution relaxation curves.

Impact is measured on volatility-rescaled log prices.  For one order
with sign ``e`` the per-order impact between marks ``a`` and ``b`` is
``e * (log(S_b) - log(S_a)) / sigma_day``, with the volatility proxy of
the order's execution day applied to both marks.

Relaxation curves are ratios of binned means (mean numerator over mean
denominator per bin), never means of per-order ratios: per-order ratios
blow up whenever a denominator impact is near zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .curvefit import FitProblem, nonlinear_lsq, weights_from_stderr
from .datamodel import MARKET_CLOSE_S, MARKET_OPEN_S, Metaorder, Panel
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

PRICE_PAIRS = ("start_to_end", "start_to_close", "start_to_next_close")


@dataclass(frozen=True)
class ImpactBin:
    center: float
    value: float
    stderr: float
    count: int


@dataclass(frozen=True)
class ImpactCurve:
    price_pair: str
    bins: tuple[ImpactBin, ...]

    def centers(self) -> np.ndarray:
        return np.array([b.center for b in self.bins])

    def values(self) -> np.ndarray:
        return np.array([b.value for b in self.bins])

    def stderrs(self) -> np.ndarray:
        return np.array([b.stderr for b in self.bins])


@dataclass(frozen=True)
class DecayPoint:
    z: float
    value: float
    stderr: float
    count: int


def propagator_decay(z, decay_exponent: float):
    """Relaxation profile (1+z)**(1-e) - z**(1-e) of transient impact.

    Equals 1 at z=0 and decreases strictly in z for exponents in (0,1);
    the exponent 1 is admitted as the fully-transient limit.
    """
    if not 0.0 < decay_exponent <= 1.0:
        raise ValueError("decay exponent must lie in (0, 1]")
    arr = np.asarray(z, dtype=float)
    if np.any(arr < 0.0):
        raise ValueError("z must be non-negative")
    power = 1.0 - decay_exponent
    out = np.where(arr == 0.0, 1.0, (1.0 + arr) ** power - arr**power)
    return float(out) if np.ndim(z) == 0 else out


def zeta_from_autocorr(lag1_corr: float) -> float:
    """Flow-persistence correction 1 / (1 + C(1)) for next-day ratios."""
    if lag1_corr <= -1.0:
        raise ValueError("lag-1 autocorrelation must exceed -1")
    return 1.0 / (1.0 + lag1_corr)


# ---------------------------------------------------------------------------
# Per-order measures
# ---------------------------------------------------------------------------


def _next_day_close(panel: Panel, order: Metaorder) -> float | None:
    idx = panel.day_index.get(order.day)
    if idx is None or idx + 1 >= panel.n_days:
        return None
    nxt = panel.bars.get((order.stock_id, panel.days[idx + 1]))
    return None if nxt is None else nxt.close


def _order_impact(panel: Panel, order: Metaorder, price_pair: str) -> float | None:
    """Signed rescaled impact for one order, or None when unavailable."""
    bar = panel.bar_for(order)
    if bar is None or bar.sigma <= 0.0 or order.price_at_start is None:
        return None
    sigma = bar.sigma
    start = math.log(order.price_at_start)
    if price_pair == "start_to_end":
        if order.price_at_end is None:
            return None
        end = math.log(order.price_at_end)
    elif price_pair == "start_to_close":
        end = math.log(bar.close)
    elif price_pair == "start_to_next_close":
        nxt = _next_day_close(panel, order)
        if nxt is None:
            return None
        end = math.log(nxt)
    else:
        raise ConfigError(f"unknown price pair {price_pair!r}")
    return order.sign * (end - start) / sigma


def _order_phi(panel: Panel, order: Metaorder) -> float:
    return order.volume / panel.bar_for(order).total_volume


def _equal_population_split(
    sort_keys: tuple[np.ndarray, ...], n_bins: int
) -> list[np.ndarray]:
    """Index groups of near-equal size (counts differ by at most 1).

    ``sort_keys`` are passed least-significant first, numpy lexsort
    style, so ties on the binning variable break deterministically.
    """
    order = np.lexsort(sort_keys)
    return [g for g in np.array_split(order, n_bins) if g.size]


def impact_curve(
    panel: Panel,
    price_pair: str = "start_to_end",
    n_bins: int = 20,
) -> ImpactCurve:
    """Conditional mean impact per equal-population daily-fraction bin."""
    if price_pair not in PRICE_PAIRS:
        raise ConfigError(f"price_pair must be one of {PRICE_PAIRS}")
    phis, impacts, sids, day_ords = [], [], [], []
    for order in panel.metaorders:
        imp = _order_impact(panel, order, price_pair)
        if imp is None:
            continue
        phis.append(_order_phi(panel, order))
        impacts.append(imp)
        sids.append(order.stock_id)
        day_ords.append(order.day.toordinal())
    if not phis:
        raise DataError("no metaorders with usable price marks")
    phi = np.asarray(phis)
    imp = np.asarray(impacts)
    if np.unique(phi).size < n_bins:
        raise ConfigError(
            f"n_bins={n_bins} exceeds the {np.unique(phi).size} distinct "
            "daily-fraction values"
        )
    sid_codes = np.unique(np.asarray(sids), return_inverse=True)[1]
    groups = _equal_population_split(
        (np.asarray(day_ords), sid_codes, phi), n_bins
    )
    bins = []
    for g in groups:
        vals = imp[g]
        se = float(np.std(vals, ddof=1) / np.sqrt(g.size)) if g.size > 1 else 0.0
        bins.append(ImpactBin(float(np.mean(phi[g])), float(np.mean(vals)), se, g.size))
    return ImpactCurve(price_pair, tuple(bins))


def impact_ratio_curve(
    panel: Panel, n_bins: int = 20
) -> tuple[np.ndarray, np.ndarray, float]:
    """Start-to-close over start-to-end impact per daily-fraction bin.

    Returns (bin centers, per-bin ratios, mean ratio over bins).  Each
    ratio is a ratio of binned mean impacts computed on the same orders.
    """
    phis, num, den, sids, day_ords = [], [], [], [], []
    for order in panel.metaorders:
        i_se = _order_impact(panel, order, "start_to_end")
        i_sc = _order_impact(panel, order, "start_to_close")
        if i_se is None or i_sc is None:
            continue
        phis.append(_order_phi(panel, order))
        num.append(i_sc)
        den.append(i_se)
        sids.append(order.stock_id)
        day_ords.append(order.day.toordinal())
    if len(phis) < n_bins:
        raise DataError("too few orders for the requested binning")
    phi = np.asarray(phis)
    num = np.asarray(num)
    den = np.asarray(den)
    sid_codes = np.unique(np.asarray(sids), return_inverse=True)[1]
    groups = _equal_population_split((np.asarray(day_ords), sid_codes, phi), n_bins)
    centers = np.array([np.mean(phi[g]) for g in groups])
    ratios = np.array([np.mean(num[g]) / np.mean(den[g]) for g in groups])
    return centers, ratios, float(np.mean(ratios))


# ---------------------------------------------------------------------------
# Relaxation curves
# ---------------------------------------------------------------------------


def _decay_samples(
    panel: Panel, horizon: str, clock: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(z, numerator, denominator) arrays for the decay ratio."""
    zs, nums, dens = [], [], []
    for order in panel.metaorders:
        i_se = _order_impact(panel, order, "start_to_end")
        if i_se is None:
            continue
        bar = panel.bar_for(order)
        v_se = order.interval_volume()
        if v_se <= 0.0:
            continue
        v_ec = bar.total_volume - order.vol_at_end
        t_se = order.end_time - order.start_time
        if clock == "time" and t_se <= 0.0:
            continue
        close_t = bar.checkpoints[-1][0] if bar.checkpoints else MARKET_CLOSE_S
        if horizon == "same_day":
            i_num = _order_impact(panel, order, "start_to_close")
            if clock == "volume":
                z = v_ec / v_se
            else:
                z = (close_t - order.end_time) / t_se
        elif horizon == "next_day":
            i_num = _order_impact(panel, order, "start_to_next_close")
            idx = panel.day_index[order.day]
            if idx + 1 >= panel.n_days:
                continue
            nxt = panel.bars.get((order.stock_id, panel.days[idx + 1]))
            if nxt is None:
                continue
            if clock == "volume":
                z = (v_ec + nxt.total_volume) / v_se
            else:
                open2_t = nxt.checkpoints[0][0] if nxt.checkpoints else MARKET_OPEN_S
                close2_t = nxt.checkpoints[-1][0] if nxt.checkpoints else MARKET_CLOSE_S
                z = ((close_t - order.end_time) + (close2_t - open2_t)) / t_se
        else:
            raise ConfigError("horizon must be 'same_day' or 'next_day'")
        if i_num is None or z < 0.0:
            continue
        zs.append(z)
        nums.append(i_num)
        dens.append(i_se)
    return np.asarray(zs), np.asarray(nums), np.asarray(dens)


def _z_bin_groups(z: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Value-based z bins: linear below 0.1, logarithmic above.

    When the number of distinct z values does not exceed ``n_bins`` the
    samples are grouped by (quantized) exact value instead, which keeps
    gridded oracle data loss-free.
    """
    zq = np.round(z, 12)
    uniq = np.unique(zq)
    if uniq.size <= n_bins:
        return [np.flatnonzero(zq == u) for u in uniq]
    z_max = float(z.max())
    if z_max <= 0.1:
        edges = np.linspace(0.0, z_max, n_bins + 1)
    else:
        n_lin = max(1, n_bins // 4)
        n_log = n_bins - n_lin
        lin = np.linspace(0.0, 0.1, n_lin + 1)
        log = np.geomspace(0.1, z_max, n_log + 1)
        edges = np.concatenate([lin[:-1], log])
    edges[-1] = np.nextafter(max(edges[-1], z_max), np.inf)
    which = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, len(edges) - 2)
    return [np.flatnonzero(which == b) for b in range(len(edges) - 1)]


def decay_curve(
    panel: Panel,
    horizon: str = "same_day",
    n_bins: int = 20,
    zeta: float = 1.0,
    clock: str = "volume",
) -> list[DecayPoint]:
    """Relaxation ratio per z bin, z = post-execution over execution volume.

    ``same_day`` compares the day close against the execution end;
    ``next_day`` uses the following day's close with the full next-day
    volume added to the numerator clock (overnight volume is zero) and
    is rescaled by ``zeta`` to undo flow persistence.  Standard errors
    propagate numerator and denominator errors in quadrature.
    """
    if horizon == "same_day" and zeta != 1.0:
        raise ConfigError("zeta applies to the next_day horizon only")
    if clock not in ("volume", "time"):
        raise ConfigError("clock must be 'volume' or 'time'")
    z, num, den = _decay_samples(panel, horizon, clock)
    if z.size == 0:
        raise DataError("no usable relaxation samples")
    points = []
    for g in _z_bin_groups(z, n_bins):
        if g.size == 0:
            logger.warning("dropping empty z bin")
            continue
        m_num = float(np.mean(num[g]))
        m_den = float(np.mean(den[g]))
        if m_den == 0.0:
            logger.warning("dropping z bin with zero mean denominator impact")
            continue
        ratio = zeta * m_num / m_den
        if g.size > 1:
            se_num = np.std(num[g], ddof=1) / np.sqrt(g.size)
            se_den = np.std(den[g], ddof=1) / np.sqrt(g.size)
            se = abs(ratio) * math.hypot(se_num / m_num, se_den / m_den)
        else:
            se = 0.0
        points.append(DecayPoint(float(np.mean(z[g])), ratio, float(se), int(g.size)))
    return points


def conditional_next_close(
    panel: Panel, n_bins: int = 10
) -> tuple[list[ImpactBin], float, float]:
    """Next-day-close impact conditioned on same-day-close impact.

    Returns per-bin means of the next-day impact (binned on the same-day
    impact, equal population) plus the zero-intercept regression slope
    of next-day on same-day impact with its standard error.
    """
    if n_bins < 2:
        raise ConfigError("need at least 2 bins")
    sc, sc2 = [], []
    for order in panel.metaorders:
        a = _order_impact(panel, order, "start_to_close")
        b = _order_impact(panel, order, "start_to_next_close")
        if a is None or b is None:
            continue
        sc.append(a)
        sc2.append(b)
    if len(sc) < max(n_bins, 3):
        raise DataError("too few paired same/next-day observations")
    x = np.asarray(sc)
    y = np.asarray(sc2)
    sxx = float(x @ x)
    slope = float(x @ y) / sxx
    resid = y - slope * x
    se = math.sqrt(float(resid @ resid) / (x.size - 1) / sxx)
    order_idx = np.argsort(x, kind="stable")
    bins = []
    for g in np.array_split(order_idx, n_bins):
        if g.size == 0:
            continue
        vals = y[g]
        bse = float(np.std(vals, ddof=1) / np.sqrt(g.size)) if g.size > 1 else 0.0
        bins.append(ImpactBin(float(np.mean(x[g])), float(np.mean(vals)), bse, g.size))
    return bins, slope, se


# ---------------------------------------------------------------------------
# Fits on relaxation curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecayFit:
    decay_exponent: float
    stderr: float
    converged: bool
    at_boundary: bool
    residual_norm: float


def fit_decay_exponent(points: list[DecayPoint], x0: float = 0.22) -> DecayFit:
    """One-parameter weighted fit of the propagator relaxation profile.

    Relaxation values must lie in (0, 1] up to their own sampling noise;
    noiseless points (zero standard error) are held to the bound
    exactly.
    """
    if len(points) < 3:
        raise DataError("need at least 3 relaxation points to fit")
    z = np.array([p.z for p in points])
    vals = np.array([p.value for p in points])
    slack = np.array([3.0 * p.stderr for p in points])
    if np.any(vals <= 0.0) or np.any(vals > 1.0 + slack + 1e-9):
        raise DataError("relaxation values must lie in (0, 1] up to noise")
    weights = weights_from_stderr([p.stderr for p in points])
    problem = FitProblem(
        model=lambda th: propagator_decay(z, max(th[0], 1e-12)),
        observed=vals,
        x0=np.array([x0]),
        lower=np.array([0.0]),
        upper=np.array([1.0]),
        weights=weights,
    )
    res = nonlinear_lsq(problem)
    return DecayFit(
        decay_exponent=float(res.params[0]),
        stderr=float(res.stderr[0]),
        converged=res.converged,
        at_boundary=bool(res.at_bounds[0]),
        residual_norm=res.residual_norm,
    )


def apparent_plateau(points: list[DecayPoint], z_window: tuple[float, float]) -> float:
    """Plateau read off a windowed relaxation curve.

    Fits a constant (weighted least squares) to the top half of the z
    window, which is exactly how a saturation level gets eyeballed on a
    truncated plot.  Window truncation inflates the apparent plateau of
    a still-decaying curve.
    """
    lo, hi = z_window
    kept = [p for p in points if lo <= p.z <= hi]
    if not kept:
        raise DataError("no relaxation points inside the window")
    tail_lo = lo + 0.5 * (hi - lo)
    tail = [p for p in kept if p.z >= tail_lo] or [max(kept, key=lambda p: p.z)]
    w = weights_from_stderr([p.stderr for p in tail])
    vals = np.array([p.value for p in tail])
    if w is None:
        return float(np.mean(vals))
    return float(np.sum(w * vals) / np.sum(w))
