"""Domain types, CSV ingestion, and cleaning filters for metaorder panels.

A panel bundles three record kinds over one exchange calendar:

* metaorders  -- signed institutional executions, one row per order,
* daily bars  -- per stock-day OHLC, total volume and an intraday
  cumulative-volume curve given as piecewise-linear checkpoints,
* market      -- one close-to-close index return per calendar day.

All record types are frozen dataclasses; a built ``Panel`` is immutable
and can be shared read-only across parallel estimation workers.

File formats (one header row each, ``\\n`` line endings):

* ``metaorders.csv``: stock_id,day,sign,volume,start_time,end_time,
  vol_at_start,vol_at_end[,price_at_start,price_at_end].  Times are
  seconds since midnight.  The two trailing price columns are optional;
  impact estimators require them, flow statistics do not.
* ``bars.csv``: stock_id,day,open,high,low,close,total_volume
  [,checkpoints].  ``checkpoints`` is a quoted ``time:cumvol`` list
  separated by ``;``; when absent the volume curve is linear over the
  regular session.
* ``market.csv``: day,index_return.
* ``stocks.csv`` (optional): stock_id,tranche.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DegenerateExecutionError,
    ParticipationOverflowError,
)

# Regular session bounds, seconds since midnight (09:30-16:00).
MARKET_OPEN_S = 34200.0
MARKET_CLOSE_S = 57600.0

METAORDER_COLUMNS = (
    "stock_id",
    "day",
    "sign",
    "volume",
    "start_time",
    "end_time",
    "vol_at_start",
    "vol_at_end",
)
METAORDER_PRICE_COLUMNS = ("price_at_start", "price_at_end")
BAR_COLUMNS = ("stock_id", "day", "open", "high", "low", "close", "total_volume")
MARKET_COLUMNS = ("day", "index_return")


def signed_sqrt(x):
    """Return sign(x) * sqrt(|x|), elementwise for arrays.

    Odd and strictly increasing; rejects non-finite input.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("signed_sqrt requires finite input")
    out = np.sign(arr) * np.sqrt(np.abs(arr))
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Metaorder:
    """One signed execution record.

    ``vol_at_start``/``vol_at_end`` are the market's cumulative traded
    shares at the order's start and end times.  Price marks are the
    traded prices observed at those times; they are optional because
    flow-level statistics do not need them.
    """

    stock_id: str
    day: dt.date
    sign: int
    volume: float
    start_time: float
    end_time: float
    vol_at_start: float
    vol_at_end: float
    price_at_start: float | None = None
    price_at_end: float | None = None

    def interval_volume(self) -> float:
        return self.vol_at_end - self.vol_at_start


@dataclass(frozen=True)
class MetaorderStats:
    """Elementary execution descriptors of one metaorder."""

    participation_rate: float
    duration: float
    daily_fraction: float


@dataclass(frozen=True)
class DailyBar:
    """Per stock-day OHLC bar with the intraday cumulative-volume curve.

    ``checkpoints`` are (seconds-since-midnight, cumulative shares)
    pairs, non-decreasing in both coordinates, ending at the total day
    volume.  ``None`` means a linear curve over the regular session.
    """

    stock_id: str
    day: dt.date
    open: float
    high: float
    low: float
    close: float
    total_volume: float
    checkpoints: tuple[tuple[float, float], ...] | None = None

    @property
    def sigma(self) -> float:
        """Daily volatility proxy (high - low) / open."""
        return (self.high - self.low) / self.open

    def _curve(self) -> tuple[np.ndarray, np.ndarray]:
        if self.checkpoints is None:
            times = np.array([MARKET_OPEN_S, MARKET_CLOSE_S])
            vols = np.array([0.0, self.total_volume])
        else:
            pts = np.asarray(self.checkpoints, dtype=float)
            times, vols = pts[:, 0], pts[:, 1]
        return times, vols

    def cumulative_volume(self, t) -> float | np.ndarray:
        """Shares traded between the session start and time ``t``."""
        times, vols = self._curve()
        out = np.interp(t, times, vols)
        return float(out) if np.ndim(t) == 0 else out

    def time_at_volume(self, v) -> float | np.ndarray:
        """Inverse of :meth:`cumulative_volume` (left edge on flats)."""
        times, vols = self._curve()
        out = np.interp(v, vols, times)
        return float(out) if np.ndim(v) == 0 else out


@dataclass(frozen=True)
class MarketSeries:
    """Close-to-close market index return per calendar day."""

    days: tuple[dt.date, ...]
    returns: tuple[float, ...]

    def __post_init__(self):
        if len(self.days) != len(self.returns):
            raise DataError("market series days and returns differ in length")

    def as_dict(self) -> dict[dt.date, float]:
        return dict(zip(self.days, self.returns))


@dataclass(frozen=True)
class Panel:
    """Immutable bundle of bars, metaorders and the market series.

    ``days`` is the common trading calendar (strictly increasing).
    Construction does not require every metaorder to resolve to a bar;
    :func:`clean_panel` enforces that and the other record invariants.
    """

    stocks: tuple[str, ...]
    days: tuple[dt.date, ...]
    bars: Mapping[tuple[str, dt.date], DailyBar]
    metaorders: tuple[Metaorder, ...]
    market: MarketSeries
    tranches: Mapping[str, str] | None = None
    day_index: Mapping[dt.date, int] = field(init=False, repr=False)

    def __post_init__(self):
        days = tuple(self.days)
        if any(b >= a for a, b in zip(days[1:], days[:-1])):
            raise DataError("panel calendar must be strictly increasing")
        object.__setattr__(self, "day_index", {d: i for i, d in enumerate(days)})

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def n_stocks(self) -> int:
        return len(self.stocks)

    def bar_for(self, order: Metaorder) -> DailyBar | None:
        return self.bars.get((order.stock_id, order.day))

    def market_returns(self) -> np.ndarray:
        lookup = self.market.as_dict()
        missing = [d for d in self.days if d not in lookup]
        if missing:
            raise DataError(f"market series missing {len(missing)} panel days")
        return np.array([lookup[d] for d in self.days])

    def close_matrix(self) -> np.ndarray:
        """Close prices, shape (n_stocks, n_days); NaN where no bar."""
        out = np.full((self.n_stocks, self.n_days), np.nan)
        for i, sid in enumerate(self.stocks):
            for j, day in enumerate(self.days):
                bar = self.bars.get((sid, day))
                if bar is not None:
                    out[i, j] = bar.close
        return out

    def sigma_matrix(self) -> np.ndarray:
        """Volatility proxies, shape (n_stocks, n_days); NaN where no bar."""
        out = np.full((self.n_stocks, self.n_days), np.nan)
        for i, sid in enumerate(self.stocks):
            for j, day in enumerate(self.days):
                bar = self.bars.get((sid, day))
                if bar is not None:
                    out[i, j] = bar.sigma
        return out

    def return_matrix(self) -> np.ndarray:
        """Daily log close-to-close returns, shape (n_stocks, n_days).

        The first day has no previous close, so its entry falls back to
        the open-to-close return of that day.
        """
        closes = self.close_matrix()
        out = np.full_like(closes, np.nan)
        out[:, 1:] = np.log(closes[:, 1:]) - np.log(closes[:, :-1])
        for i, sid in enumerate(self.stocks):
            bar = self.bars.get((sid, self.days[0])) if self.days else None
            if bar is not None:
                out[i, 0] = math.log(bar.close) - math.log(bar.open)
        return out

    def restrict_stocks(self, keep: Iterable[str]) -> "Panel":
        keep_set = set(keep)
        stocks = tuple(s for s in self.stocks if s in keep_set)
        if not stocks:
            raise DataError("stock restriction leaves an empty panel")
        bars = {k: v for k, v in self.bars.items() if k[0] in keep_set}
        orders = tuple(m for m in self.metaorders if m.stock_id in keep_set)
        tranches = None
        if self.tranches is not None:
            tranches = {s: t for s, t in self.tranches.items() if s in keep_set}
        return Panel(stocks, self.days, bars, orders, self.market, tranches)

    def restrict_tranche(self, label: str) -> "Panel":
        if self.tranches is None:
            raise ConfigError("panel carries no tranche labels")
        keep = [s for s in self.stocks if self.tranches.get(s) == label]
        if not keep:
            raise ConfigError(f"no stocks labelled {label!r}")
        return self.restrict_stocks(keep)


def build_panel(
    bars: Iterable[DailyBar],
    metaorders: Iterable[Metaorder],
    market: MarketSeries,
    tranches: Mapping[str, str] | None = None,
) -> Panel:
    """Assemble a Panel; calendar and stock list are derived and sorted."""
    bar_map: dict[tuple[str, dt.date], DailyBar] = {}
    for bar in bars:
        bar_map[(bar.stock_id, bar.day)] = bar
    stocks = tuple(sorted({k[0] for k in bar_map}))
    days = tuple(sorted({k[1] for k in bar_map} | set(market.days)))
    return Panel(stocks, days, bar_map, tuple(metaorders), market, tranches)


# ---------------------------------------------------------------------------
# Elementary descriptors
# ---------------------------------------------------------------------------


def metaorder_stats(order: Metaorder, bar: DailyBar) -> MetaorderStats:
    """Participation rate, volume-time duration and daily fraction.

    The identity daily_fraction = participation_rate * duration holds to
    full precision because the fraction is computed as the product.
    """
    interval = order.interval_volume()
    if interval <= 0.0:
        raise DegenerateExecutionError(
            f"metaorder {order.stock_id}/{order.day} has zero interval volume"
        )
    if bar.total_volume <= 0.0:
        raise DataError(f"bar {bar.stock_id}/{bar.day} has non-positive volume")
    eta = order.volume / interval
    if eta > 1.0:
        raise ParticipationOverflowError(
            f"metaorder {order.stock_id}/{order.day} participation {eta:.3g} > 1"
        )
    duration = interval / bar.total_volume
    return MetaorderStats(eta, duration, eta * duration)


def rescaled_log_price(price: float, sigma: float) -> float:
    """log(price) / sigma, the volatility-rescaled log price."""
    if price <= 0.0:
        raise ValueError("price must be positive")
    if sigma <= 0.0:
        raise ValueError("volatility proxy must be positive")
    return math.log(price) / sigma


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CleaningConfig:
    """Filter thresholds applied by :func:`clean_panel`.

    The upstream data vendor's own cleaning rules are not public, so
    these caps are explicit and configurable; rejection counts per
    filter are always reported.
    """

    max_participation: float = 0.5
    max_daily_fraction: float = 1.0
    min_duration: float = 1e-4


#: Filter names in the order they are attributed to a rejected order.
CLEAN_FILTERS = (
    "invalid_record",
    "missing_bar",
    "zero_volatility_day",
    "zero_duration",
    "duration_floor",
    "participation_cap",
    "daily_fraction_cap",
)


@dataclass(frozen=True)
class CleanResult:
    panel: Panel
    rejections: dict[str, int]
    rejected_indices: tuple[int, ...]


def _record_filter(
    order: Metaorder,
    bar: DailyBar | None,
    cfg: CleaningConfig,
) -> str | None:
    """Name of the first filter rejecting ``order``, or None if kept."""
    if (
        order.sign not in (-1, 1)
        or not order.volume > 0.0
        or order.start_time > order.end_time
        or order.vol_at_end < order.vol_at_start
    ):
        return "invalid_record"
    if bar is None:
        return "missing_bar"
    if bar.sigma <= 0.0:
        return "zero_volatility_day"
    interval = order.interval_volume()
    if interval <= 0.0 or order.start_time == order.end_time:
        return "zero_duration"
    duration = interval / bar.total_volume
    if duration < cfg.min_duration:
        return "duration_floor"
    eta = order.volume / interval
    if eta > cfg.max_participation or eta > 1.0:
        return "participation_cap"
    if order.volume / bar.total_volume > cfg.max_daily_fraction:
        return "daily_fraction_cap"
    return None


def clean_panel(raw: Panel, cfg: CleaningConfig | None = None) -> CleanResult:
    """Drop invalid records and stock-days unusable for estimation.

    Zero-volatility stock-days (high == low) are removed together with
    their metaorders because impact rescaling divides by the proxy.
    Idempotent: cleaning a cleaned panel changes nothing.
    """
    cfg = cfg or CleaningConfig()
    counts = {name: 0 for name in CLEAN_FILTERS}
    dead_days = {
        key for key, bar in raw.bars.items() if bar.sigma <= 0.0
    }
    kept_orders = []
    rejected = []
    for idx, order in enumerate(raw.metaorders):
        bar = raw.bar_for(order)
        if (order.stock_id, order.day) in dead_days:
            verdict = "zero_volatility_day"
        else:
            verdict = _record_filter(order, bar, cfg)
        if verdict is None:
            kept_orders.append(order)
        else:
            counts[verdict] += 1
            rejected.append(idx)
    bars = {k: v for k, v in raw.bars.items() if k not in dead_days}
    if not bars or not kept_orders:
        raise ConfigError("cleaning removed every usable record")
    stocks = tuple(s for s in raw.stocks if any(k[0] == s for k in bars))
    tranches = raw.tranches
    if tranches is not None:
        tranches = {s: t for s, t in tranches.items() if s in set(stocks)}
    panel = Panel(stocks, raw.days, bars, tuple(kept_orders), raw.market, tranches)
    return CleanResult(panel, counts, tuple(rejected))


# ---------------------------------------------------------------------------
# CSV ingestion / serialization
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_day(s: str) -> dt.date:
    return dt.date.fromisoformat(s)


def _checkpoints_to_str(cps: tuple[tuple[float, float], ...]) -> str:
    return ";".join(f"{_fmt(t)}:{_fmt(v)}" for t, v in cps)


def _checkpoints_from_str(s: str) -> tuple[tuple[float, float], ...]:
    pairs = []
    for chunk in s.split(";"):
        t, v = chunk.split(":")
        pairs.append((float(t), float(v)))
    return tuple(pairs)


def write_metaorders_csv(path: Path | str, orders: Iterable[Metaorder]) -> None:
    orders = list(orders)
    with_prices = any(m.price_at_start is not None for m in orders)
    header = METAORDER_COLUMNS + (METAORDER_PRICE_COLUMNS if with_prices else ())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for m in orders:
            row = [
                m.stock_id,
                m.day.isoformat(),
                str(m.sign),
                _fmt(m.volume),
                _fmt(m.start_time),
                _fmt(m.end_time),
                _fmt(m.vol_at_start),
                _fmt(m.vol_at_end),
            ]
            if with_prices:
                row.append("" if m.price_at_start is None else _fmt(m.price_at_start))
                row.append("" if m.price_at_end is None else _fmt(m.price_at_end))
            w.writerow(row)


def read_metaorders_csv(path: Path | str) -> list[Metaorder]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None:
            raise DataError(f"{path}: empty metaorder file")
        if tuple(header[: len(METAORDER_COLUMNS)]) != METAORDER_COLUMNS:
            raise DataError(f"{path}: unexpected metaorder header {header!r}")
        has_prices = len(header) == len(METAORDER_COLUMNS) + 2
        for row in r:
            if not row:
                continue
            ps = pe = None
            if has_prices and row[8] != "" and row[9] != "":
                ps, pe = float(row[8]), float(row[9])
            out.append(
                Metaorder(
                    stock_id=row[0],
                    day=_parse_day(row[1]),
                    sign=int(row[2]),
                    volume=float(row[3]),
                    start_time=float(row[4]),
                    end_time=float(row[5]),
                    vol_at_start=float(row[6]),
                    vol_at_end=float(row[7]),
                    price_at_start=ps,
                    price_at_end=pe,
                )
            )
    if not out:
        raise DataError(f"{path}: no metaorder rows")
    return out


def write_bars_csv(path: Path | str, bars: Iterable[DailyBar]) -> None:
    bars = list(bars)
    with_cps = any(b.checkpoints is not None for b in bars)
    header = BAR_COLUMNS + (("checkpoints",) if with_cps else ())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for b in bars:
            row = [
                b.stock_id,
                b.day.isoformat(),
                _fmt(b.open),
                _fmt(b.high),
                _fmt(b.low),
                _fmt(b.close),
                _fmt(b.total_volume),
            ]
            if with_cps:
                row.append(
                    "" if b.checkpoints is None else _checkpoints_to_str(b.checkpoints)
                )
            w.writerow(row)


def read_bars_csv(path: Path | str) -> list[DailyBar]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header[: len(BAR_COLUMNS)]) != BAR_COLUMNS:
            raise DataError(f"{path}: unexpected bar header {header!r}")
        has_cps = len(header) == len(BAR_COLUMNS) + 1
        for row in r:
            if not row:
                continue
            cps = None
            if has_cps and row[7] != "":
                cps = _checkpoints_from_str(row[7])
            out.append(
                DailyBar(
                    stock_id=row[0],
                    day=_parse_day(row[1]),
                    open=float(row[2]),
                    high=float(row[3]),
                    low=float(row[4]),
                    close=float(row[5]),
                    total_volume=float(row[6]),
                    checkpoints=cps,
                )
            )
    if not out:
        raise DataError(f"{path}: no bar rows")
    return out


def write_market_csv(path: Path | str, market: MarketSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MARKET_COLUMNS)
        for day, ret in zip(market.days, market.returns):
            w.writerow([day.isoformat(), _fmt(ret)])


def read_market_csv(path: Path | str) -> MarketSeries:
    days, rets = [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header) != MARKET_COLUMNS:
            raise DataError(f"{path}: unexpected market header {header!r}")
        for row in r:
            if not row:
                continue
            days.append(_parse_day(row[0]))
            rets.append(float(row[1]))
    if not days:
        raise DataError(f"{path}: no market rows")
    return MarketSeries(tuple(days), tuple(rets))


def write_stocks_csv(path: Path | str, tranches: Mapping[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stock_id", "tranche"])
        for sid in sorted(tranches):
            w.writerow([sid, tranches[sid]])


def read_stocks_csv(path: Path | str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r, None)
        for row in r:
            if row:
                out[row[0]] = row[1]
    return out


def write_panel(panel: Panel, directory: Path | str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_metaorders_csv(directory / "metaorders.csv", panel.metaorders)
    bars = [panel.bars[k] for k in sorted(panel.bars)]
    write_bars_csv(directory / "bars.csv", bars)
    write_market_csv(directory / "market.csv", panel.market)
    if panel.tranches is not None:
        write_stocks_csv(directory / "stocks.csv", panel.tranches)


def load_panel(directory: Path | str) -> Panel:
    directory = Path(directory)
    orders = read_metaorders_csv(directory / "metaorders.csv")
    bars = read_bars_csv(directory / "bars.csv")
    market = read_market_csv(directory / "market.csv")
    tranches = None
    stocks_path = directory / "stocks.csv"
    if stocks_path.exists():
        tranches = read_stocks_csv(stocks_path)
    return build_panel(bars, orders, market, tranches)
