"""Daily signed imbalance construction and flow autocorrelation.

The imbalance of a stock-day is the signed sum of its metaorders' daily
fractions; days without orders count as zero flow rather than being
dropped, otherwise lags would be distorted.  Autocorrelations are
computed per stock with the standard biased estimator (sample-mean
subtraction, full-sample variance normalization) and then averaged
across stocks; the cross-stock dispersion provides standard errors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .curvefit import FitProblem, nonlinear_lsq
from .datamodel import Panel, signed_sqrt
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StockDayFlow:
    stock_id: str
    day_index: int
    net_fraction: float
    net_fraction_root: float
    adjusted_root: float | None = None


@dataclass(frozen=True)
class FlowMatrix:
    """Per-stock-day net flow, vectorized over the panel calendar.

    ``phi`` holds the signed net daily fraction, ``phi_root`` its
    signed square root, and ``phi_root_adj`` the market-adjusted root
    (None until :func:`cross_sectional_adjust` runs).  All arrays have
    shape (n_stocks, n_days).
    """

    stocks: tuple[str, ...]
    phi: np.ndarray
    phi_root: np.ndarray
    phi_root_adj: np.ndarray | None = None

    def records(self):
        adj = self.phi_root_adj
        for i, sid in enumerate(self.stocks):
            for t in range(self.phi.shape[1]):
                yield StockDayFlow(
                    sid,
                    t,
                    float(self.phi[i, t]),
                    float(self.phi_root[i, t]),
                    None if adj is None else float(adj[i, t]),
                )


def daily_imbalance(panel: Panel) -> FlowMatrix:
    """Net signed daily fraction and its signed root per stock-day."""
    idx = {sid: i for i, sid in enumerate(panel.stocks)}
    phi = np.zeros((panel.n_stocks, panel.n_days))
    for order in panel.metaorders:
        bar = panel.bar_for(order)
        if bar is None:
            raise DataError(
                f"metaorder {order.stock_id}/{order.day} has no bar; clean first"
            )
        t = panel.day_index[order.day]
        phi[idx[order.stock_id], t] += order.sign * order.volume / bar.total_volume
    return FlowMatrix(panel.stocks, phi, signed_sqrt(phi))


def cross_sectional_adjust(flows: FlowMatrix, betas: np.ndarray) -> FlowMatrix:
    """Subtract beta times the cross-sectional mean root imbalance.

    ``betas`` has shape (n_stocks, n_days); the mean runs over all
    stocks in the panel each day (zero-flow days included).
    """
    if flows.phi.size == 0:
        raise DataError("empty flow matrix")
    betas = np.asarray(betas, dtype=float)
    if betas.shape != flows.phi_root.shape:
        raise ConfigError(
            f"beta shape {betas.shape} does not match flows {flows.phi_root.shape}"
        )
    day_mean = flows.phi_root.mean(axis=0, keepdims=True)
    return replace(flows, phi_root_adj=flows.phi_root - betas * day_mean)


@dataclass(frozen=True)
class FlowAutocorrelation:
    lags: np.ndarray
    mean_corr: np.ndarray
    stderr: np.ndarray
    n_stocks_used: int
    per_stock: np.ndarray | None = None


def _autocorr_one(
    series: np.ndarray, max_lag: int, bias_correction: bool
) -> np.ndarray | None:
    x = series - series.mean()
    n = x.size
    cov = np.empty(max_lag + 1)
    cov[0] = float(x @ x) / n
    if cov[0] <= 0.0:
        return None
    for lag in range(1, max_lag + 1):
        cov[lag] = float(x[:-lag] @ x[lag:]) / n
    if bias_correction:
        # Demeaning shifts every autocovariance down by ~Var(sample mean);
        # with persistent flow that floor drags truncated-power-law fits,
        # so add the estimate back before normalizing.  The raw
        # autocovariances entering the estimate carry the same shift,
        # hence the closed-form deflation of the denominator.
        k_max = min(3 * max_lag, n // 2)
        extra = np.empty(k_max + 1)
        extra[: max_lag + 1] = cov
        for lag in range(max_lag + 1, k_max + 1):
            extra[lag] = float(x[:-lag] @ x[lag:]) / n
        taper = 1.0 - np.arange(1, k_max + 1) / n
        raw_mean_var = (extra[0] + 2.0 * float(taper @ extra[1:])) / n
        deflation = 1.0 - (1.0 + 2.0 * float(taper.sum())) / n
        cov = cov + raw_mean_var / max(deflation, 0.1)
    return cov[1:] / cov[0]


def flow_autocorrelation(
    flows: FlowMatrix, max_lag: int, bias_correction: bool = True
) -> FlowAutocorrelation:
    """Cross-stock average autocorrelation of the root imbalance.

    ``bias_correction`` (default on) undoes the sample-mean-induced
    downward shift of each stock's autocovariances before normalizing;
    pass False for the plain estimator.
    """
    n_days = flows.phi_root.shape[1]
    if not 1 <= max_lag < n_days:
        raise ConfigError(f"max_lag must lie in [1, {n_days - 1})")
    rows = []
    for i, sid in enumerate(flows.stocks):
        ac = _autocorr_one(flows.phi_root[i], max_lag, bias_correction)
        if ac is None:
            logger.warning("skipping constant flow series for %s", sid)
            continue
        rows.append(ac)
    if not rows:
        raise DataError("no stock had a non-constant flow series")
    mat = np.vstack(rows)
    mean = mat.mean(axis=0)
    if mat.shape[0] > 1:
        se = mat.std(axis=0, ddof=1) / np.sqrt(mat.shape[0])
    else:
        se = np.zeros(max_lag)
    return FlowAutocorrelation(
        np.arange(1, max_lag + 1), mean, se, mat.shape[0], mat
    )


# ---------------------------------------------------------------------------
# Truncated power-law fit
# ---------------------------------------------------------------------------

DEFAULT_PROPAGATOR_EXPONENT = 0.22


def truncated_power_law(lags, amplitude: float, decay_rate: float, exponent: float):
    """amplitude * lag**(-exponent) * exp(-decay_rate * lag)."""
    lags = np.asarray(lags, dtype=float)
    return amplitude * lags ** (-exponent) * np.exp(-decay_rate * lags)


def truncated_power_law_jacobian(
    lags, amplitude: float, decay_rate: float, exponent: float
) -> np.ndarray:
    """Analytic Jacobian of :func:`truncated_power_law` wrt (a, b, g)."""
    lags = np.asarray(lags, dtype=float)
    g = truncated_power_law(lags, amplitude, decay_rate, exponent)
    d_a = g / amplitude
    d_b = -lags * g
    d_g = -np.log(lags) * g
    return np.column_stack([d_a, d_b, d_g])


@dataclass(frozen=True)
class AutocorrFit:
    amplitude: float
    decay_rate: float
    exponent: float
    exponent_fixed: bool
    covariance: np.ndarray
    amplitude_stderr: float
    decay_rate_stderr: float
    converged: bool
    n_iter: int
    residual_norm: float


def fit_autocorr(
    corr: FlowAutocorrelation,
    exponent: float | None = 1.0 - 2.0 * DEFAULT_PROPAGATOR_EXPONENT,
) -> AutocorrFit:
    """Weighted fit of the exponentially truncated power law.

    With ``exponent`` given (the propagator-model constraint fixes it to
    1 - 2*0.22 by default) only amplitude and truncation rate move; pass
    ``None`` to free the exponent as a third parameter.  Non-positive
    lags of the empirical curve stay in the loss even though the model
    is positive; this pulls the truncation rate up and is intentional.
    """
    lags = np.asarray(corr.lags, dtype=float)
    c = np.asarray(corr.mean_corr, dtype=float)
    if lags.size < 5:
        raise DataError("need at least 5 lags to fit")
    if not np.any(c > 0.0):
        raise DataError("autocorrelation is nowhere positive; refusing to fit")
    weights = None
    if np.all(corr.stderr > 0):
        weights = 1.0 / np.asarray(corr.stderr) ** 2
    a0 = max(float(c[0]), 1e-3)
    tail = c[c > 0]
    b0 = 0.05 if tail.size < 2 else min(max(-np.log(tail[-1] / tail[0]) / lags.size, 1e-4), 1.0)

    if exponent is not None:
        model = lambda th: truncated_power_law(lags, th[0], th[1], exponent)
        x0 = np.array([a0, b0])
        lower = np.array([0.0, 0.0])
        upper = np.array([10.0, 5.0])
    else:
        model = lambda th: truncated_power_law(lags, th[0], th[1], th[2])
        x0 = np.array([a0, b0, 0.5])
        lower = np.array([0.0, 0.0, 0.0])
        upper = np.array([10.0, 5.0, 3.0])

    res = nonlinear_lsq(
        FitProblem(model=model, observed=c, x0=x0, lower=lower, upper=upper,
                   weights=weights)
    )
    fitted_exponent = exponent if exponent is not None else float(res.params[2])
    cov = res.covariance
    if corr.per_stock is not None and corr.per_stock.shape[0] > 1 and weights is not None:
        cov = _sandwich_covariance(
            lags, res.params, exponent, weights, corr.per_stock
        )
    stderr = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return AutocorrFit(
        amplitude=float(res.params[0]),
        decay_rate=float(res.params[1]),
        exponent=float(fitted_exponent),
        exponent_fixed=exponent is not None,
        covariance=cov,
        amplitude_stderr=float(stderr[0]),
        decay_rate_stderr=float(stderr[1]),
        converged=res.converged,
        n_iter=res.n_iter,
        residual_norm=res.residual_norm,
    )


def _sandwich_covariance(
    lags: np.ndarray,
    params: np.ndarray,
    exponent: float | None,
    weights: np.ndarray,
    per_stock: np.ndarray,
) -> np.ndarray:
    """Parameter covariance that honors cross-lag error correlation.

    The weighted-least-squares covariance assumes independent per-lag
    errors, but one stock's sampling error moves neighboring lags
    together; the sandwich replaces the middle with the cross-stock
    covariance of the averaged curve.
    """
    if exponent is not None:
        jac = truncated_power_law_jacobian(lags, params[0], params[1], exponent)[:, :2]
    else:
        jac = truncated_power_law_jacobian(lags, params[0], params[1], params[2])
    n_stocks = per_stock.shape[0]
    curve_cov = np.cov(per_stock, rowvar=False, ddof=1) / n_stocks
    jw = jac * weights[:, None]
    bread = np.linalg.pinv(jac.T @ jw)
    meat = jw.T @ curve_cov @ jw
    return bread @ meat @ bread
