"""Kernel deconvolution of daily returns against lagged flow imbalances.

Pipeline: rolling market betas -> market-adjusted flows and residual
returns -> pooled lagged regression -> cumulative reaction kernel ->
asymptote fit, with stock-level bootstrap bands.  The bare response
function (cumulative flow/return cross-covariance) is kept alongside as
the uncorrected comparison: with persistent flow it drifts upward where
the deconvolved kernel decays.

Cumulated regression errors treat per-lag coefficient errors as
independent (variances add); bootstrap bands do not make that
assumption and are the preferred uncertainty measure.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .curvefit import FitProblem, linear_lsq, nonlinear_lsq, weights_from_stderr
from .datamodel import Panel
from .errors import ConfigError, DataError
from .flowstats import FlowMatrix, cross_sectional_adjust, daily_imbalance
from .impact import propagator_decay

logger = logging.getLogger(__name__)

DEFAULT_DECAY_EXPONENT = 0.22


@dataclass(frozen=True)
class DeconvConfig:
    horizon: int = 50
    bootstrap_replicates: int = 200
    beta_half_width: int = 20
    alpha_lags: int = 0
    seed: int = 0
    ridge: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigError("horizon must be >= 0")
        if self.bootstrap_replicates < 0:
            raise ConfigError("bootstrap replicates must be >= 0")
        if self.beta_half_width < 0 or self.alpha_lags < 0:
            raise ConfigError("window sizes must be >= 0")


# ---------------------------------------------------------------------------
# Rolling market beta
# ---------------------------------------------------------------------------

_MIN_BETA_OBS = 10


def rolling_beta(
    panel: Panel, half_width: int = 20
) -> tuple[np.ndarray, np.ndarray]:
    """OLS slope of stock on market returns over centered windows.

    Windows truncate at the panel edges.  Days whose window offers
    fewer than 10 observations or zero market variance fall back to
    beta 1 and are flagged.  Returns (betas, fallback flags), both of
    shape (n_stocks, n_days).
    """
    returns = panel.return_matrix()
    market = panel.market_returns()
    n_stocks, n_days = returns.shape
    betas = np.ones((n_stocks, n_days))
    flags = np.zeros((n_stocks, n_days), dtype=bool)
    for i in range(n_stocks):
        r = returns[i]
        valid = np.isfinite(r)
        rv = np.where(valid, r, 0.0)
        mv = np.where(valid, market, 0.0)
        ones = valid.astype(float)
        c_n = np.concatenate([[0.0], np.cumsum(ones)])
        c_m = np.concatenate([[0.0], np.cumsum(mv)])
        c_r = np.concatenate([[0.0], np.cumsum(rv)])
        c_mm = np.concatenate([[0.0], np.cumsum(mv * mv)])
        c_mr = np.concatenate([[0.0], np.cumsum(mv * rv)])
        for t in range(n_days):
            a = max(0, t - half_width)
            b = min(n_days, t + half_width + 1)
            n = c_n[b] - c_n[a]
            if n < _MIN_BETA_OBS:
                flags[i, t] = True
                continue
            sm = c_m[b] - c_m[a]
            sr = c_r[b] - c_r[a]
            smm = c_mm[b] - c_mm[a]
            smr = c_mr[b] - c_mr[a]
            var_m = smm - sm * sm / n
            if var_m <= 1e-18:
                flags[i, t] = True
                continue
            betas[i, t] = (smr - sm * sr / n) / var_m
    return betas, flags


def residual_returns(panel: Panel, betas: np.ndarray) -> np.ndarray:
    """Stock returns net of the market component beta * r_mkt."""
    returns = panel.return_matrix()
    market = panel.market_returns()
    return returns - betas * market[None, :]


# ---------------------------------------------------------------------------
# Design construction and kernel solve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignSystem:
    """Pooled lagged regression system, kept in per-stock blocks.

    Blocks make stock-level bootstrap resampling cheap: a replicate is
    a with-replacement sum of per-stock Gram contributions.
    """

    stocks: tuple[str, ...]
    block_x: tuple[np.ndarray, ...]
    block_y: tuple[np.ndarray, ...]
    horizon: int
    alpha_lags: int

    @property
    def n_rows(self) -> int:
        return sum(y.size for y in self.block_y)

    @property
    def n_cols(self) -> int:
        return self.horizon + 1 + self.alpha_lags

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.block_x), np.concatenate(self.block_y)


def build_design(
    flows: FlowMatrix,
    residuals: np.ndarray,
    sigma: np.ndarray,
    config: DeconvConfig,
) -> DesignSystem:
    """Stack response and lagged-volatility-scaled-flow regressors.

    Row tau of stock i carries response residual[i, tau] and regressors
    sigma[i, tau - l] * adjusted_root[i, tau - l] for l = 0..horizon;
    only days with a full lag history contribute rows.  With
    ``alpha_lags`` set, that many lagged residual returns are appended
    as extra regressors (a mean-reversion/momentum proxy).
    """
    if flows.phi_root_adj is None:
        raise ConfigError("flows must be cross-sectionally adjusted first")
    adj = flows.phi_root_adj
    n_stocks, n_days = adj.shape
    h = config.horizon
    start = max(h, config.alpha_lags)
    if start >= n_days:
        raise ConfigError(
            f"horizon {h} leaves no usable days in a {n_days}-day panel"
        )
    x_series = sigma * adj
    if not np.all(np.isfinite(x_series)) or not np.all(np.isfinite(residuals)):
        raise DataError("non-finite regressors or responses; clean the panel")
    block_x, block_y = [], []
    for i in range(n_stocks):
        rows = n_days - start
        x = np.empty((rows, h + 1 + config.alpha_lags))
        for lag in range(h + 1):
            x[:, lag] = x_series[i, start - lag : n_days - lag]
        for k in range(1, config.alpha_lags + 1):
            x[:, h + k] = residuals[i, start - k : n_days - k]
        block_x.append(x)
        block_y.append(residuals[i, start:])
    system = DesignSystem(
        flows.stocks, tuple(block_x), tuple(block_y), h, config.alpha_lags
    )
    if system.n_rows < system.n_cols:
        raise DataError(
            f"{system.n_rows} rows cannot identify {system.n_cols} coefficients"
        )
    return system


@dataclass(frozen=True)
class KernelEstimate:
    lags: np.ndarray
    coefficients: np.ndarray
    coefficient_stderr: np.ndarray
    cumulative: np.ndarray
    cumulative_stderr: np.ndarray
    normalized: np.ndarray
    alpha_coefficients: np.ndarray
    n_rows: int


def solve_kernel(system: DesignSystem, ridge: float = 0.0) -> KernelEstimate:
    """Least-squares lag coefficients and their cumulative kernel.

    No regularization by default; the pooled system has far more rows
    than columns.  A ridge penalty can stabilize small panels but
    biases the kernel and is flagged in the run report by the caller.
    """
    x, y = system.stacked()
    if ridge > 0.0:
        scale = math.sqrt(ridge)
        x = np.vstack([x, scale * np.eye(system.n_cols)])
        y = np.concatenate([y, np.zeros(system.n_cols)])
    fit = linear_lsq(x, y)
    h = system.horizon
    coeff = fit.coefficients[: h + 1]
    stderr = fit.stderr[: h + 1]
    cumulative = np.cumsum(coeff)
    cum_var = np.cumsum(stderr**2)
    g0 = cumulative[0]
    if g0 == 0.0:
        # degenerate (e.g. zero response): normalization undefined
        normalized = np.full_like(cumulative, np.nan)
    else:
        normalized = cumulative / g0
    return KernelEstimate(
        lags=np.arange(h + 1),
        coefficients=coeff,
        coefficient_stderr=stderr,
        cumulative=cumulative,
        cumulative_stderr=np.sqrt(cum_var),
        normalized=normalized,
        alpha_coefficients=fit.coefficients[h + 1 :],
        n_rows=system.n_rows,
    )


# ---------------------------------------------------------------------------
# Asymptote fit (modified propagator profile)
# ---------------------------------------------------------------------------


def modified_propagator_profile(
    taus, asymptote: float, decay_rate: float, exponent: float
):
    """asymptote + (1 - asymptote) * I_prop(tau) * exp(-rate * tau)."""
    taus = np.asarray(taus, dtype=float)
    return asymptote + (1.0 - asymptote) * propagator_decay(
        taus, exponent
    ) * np.exp(-decay_rate * taus)


def modified_propagator_jacobian(
    taus, asymptote: float, decay_rate: float, exponent: float
) -> np.ndarray:
    """Analytic Jacobian wrt (asymptote, rate, exponent); taus >= 1."""
    taus = np.asarray(taus, dtype=float)
    prop = propagator_decay(taus, exponent)
    env = np.exp(-decay_rate * taus)
    d_asym = 1.0 - prop * env
    d_rate = -taus * (1.0 - asymptote) * prop * env
    power = 1.0 - exponent
    d_prop = -((1.0 + taus) ** power * np.log1p(taus) - taus**power * np.log(taus))
    d_exp = (1.0 - asymptote) * env * d_prop
    return np.column_stack([d_asym, d_rate, d_exp])


FIT_MODES = ("one_param", "two_param", "b_zero_free_beta")


@dataclass(frozen=True)
class KernelFitParams:
    mode: str
    asymptote: float
    decay_rate: float
    decay_exponent: float
    asymptote_stderr: float
    decay_rate_stderr: float
    decay_exponent_stderr: float
    converged: bool
    n_iter: int
    residual_norm: float
    at_bounds: bool


def fit_kernel_asymptote(
    normalized: np.ndarray,
    mode: str = "one_param",
    decay_rate_fixed: float | None = None,
    stderr: np.ndarray | None = None,
    decay_exponent: float = DEFAULT_DECAY_EXPONENT,
) -> KernelFitParams:
    """Fit the normalized cumulative kernel's long-horizon plateau.

    Modes: ``one_param`` fits the asymptote with the propagator
    exponent and the truncation rate held fixed (the rate typically
    comes from the flow autocorrelation fit); ``two_param`` frees the
    rate; ``b_zero_free_beta`` sets the rate to zero and frees the
    exponent instead.  The asymptote is box-bounded to [0, 1].
    """
    if mode not in FIT_MODES:
        raise ConfigError(f"mode must be one of {FIT_MODES}")
    kernel = np.asarray(normalized, dtype=float)
    if kernel.size < 4:
        raise DataError("kernel too short to fit")
    if abs(kernel[0] - 1.0) > 1e-9:
        raise ConfigError("kernel must be normalized to 1 at lag 0")
    taus = np.arange(1, kernel.size, dtype=float)
    obs = kernel[1:]
    weights = None
    if stderr is not None:
        weights = weights_from_stderr(np.asarray(stderr)[1:])

    a0 = min(max(float(np.mean(kernel[-min(10, kernel.size - 1) :])), 0.0), 1.0)
    if mode == "one_param":
        if decay_rate_fixed is None:
            raise ConfigError("one_param mode needs the fixed truncation rate")
        model = lambda th: modified_propagator_profile(
            taus, th[0], decay_rate_fixed, decay_exponent
        )
        jac = lambda th: modified_propagator_jacobian(
            taus, th[0], decay_rate_fixed, decay_exponent
        )[:, :1]
        x0, lo, hi = np.array([a0]), np.array([0.0]), np.array([1.0])
    elif mode == "two_param":
        b0 = decay_rate_fixed if decay_rate_fixed is not None else 0.05
        model = lambda th: modified_propagator_profile(
            taus, th[0], th[1], decay_exponent
        )
        jac = lambda th: modified_propagator_jacobian(
            taus, th[0], th[1], decay_exponent
        )[:, :2]
        x0 = np.array([a0, b0])
        lo, hi = np.array([0.0, 0.0]), np.array([1.0, 5.0])
    else:
        model = lambda th: modified_propagator_profile(taus, th[0], 0.0, th[1])
        jac = lambda th: modified_propagator_jacobian(taus, th[0], 0.0, th[1])[
            :, [0, 2]
        ]
        x0 = np.array([a0, decay_exponent])
        lo, hi = np.array([0.0, 1e-6]), np.array([1.0, 0.999])

    res = nonlinear_lsq(
        FitProblem(model=model, observed=obs, x0=x0, lower=lo, upper=hi,
                   weights=weights),
        jacobian=jac,
    )
    params = res.params
    se = res.stderr
    if mode == "one_param":
        out = (params[0], decay_rate_fixed, decay_exponent, se[0], 0.0, 0.0)
    elif mode == "two_param":
        out = (params[0], params[1], decay_exponent, se[0], se[1], 0.0)
    else:
        out = (params[0], 0.0, params[1], se[0], 0.0, se[1])
    return KernelFitParams(
        mode=mode,
        asymptote=float(out[0]),
        decay_rate=float(out[1]),
        decay_exponent=float(out[2]),
        asymptote_stderr=float(out[3]),
        decay_rate_stderr=float(out[4]),
        decay_exponent_stderr=float(out[5]),
        converged=res.converged,
        n_iter=res.n_iter,
        residual_norm=res.residual_norm,
        at_bounds=bool(np.any(res.at_bounds)),
    )


# ---------------------------------------------------------------------------
# Bare response function
# ---------------------------------------------------------------------------


def response_function(
    flows: FlowMatrix, residuals: np.ndarray, max_lag: int
) -> np.ndarray:
    """Normalized cumulative cross-covariance of flow with later returns.

    The apparent impact trajectory without correcting for metaorder
    autocorrelation; persistent flow makes it rise where the true
    kernel decays.  Entry 0 is 1 by normalization.
    """
    if flows.phi_root_adj is None:
        raise ConfigError("flows must be cross-sectionally adjusted first")
    adj = flows.phi_root_adj
    n_days = adj.shape[1]
    if not 0 <= max_lag < n_days:
        raise ConfigError(f"max_lag must lie in [0, {n_days - 1})")
    increments = np.empty(max_lag + 1)
    for k in range(max_lag + 1):
        x = adj[:, : n_days - k].ravel()
        y = residuals[:, k:].ravel()
        increments[k] = float(np.mean(x * y) - np.mean(x) * np.mean(y))
    cumulative = np.cumsum(increments)
    if abs(cumulative[0]) < 1e-300:
        raise DataError("flow/return covariance at lag 0 is zero")
    return cumulative / cumulative[0]


# ---------------------------------------------------------------------------
# Stock-level bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelBand:
    mean: np.ndarray
    std: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    replicates: int


def bootstrap_kernel(system: DesignSystem, config: DeconvConfig) -> KernelBand:
    """Per-lag bands of the normalized cumulative kernel.

    Each replicate resamples whole stocks with replacement (preserving
    temporal dependence within a stock), re-solves the pooled system
    via its per-stock Gram contributions and records the normalized
    cumulative kernel.  Replicate r uses the substream
    ``SeedSequence(seed, spawn_key=(4, r))``; a single-replicate run
    degenerates to the identity resample so its band equals the point
    estimate.  Reported: per-lag mean, standard deviation and the 5th
    and 95th percentiles.
    """
    n_stocks = len(system.stocks)
    if n_stocks < 2:
        raise DataError("stock-level bootstrap needs at least 2 stocks")
    reps = config.bootstrap_replicates
    if reps < 1:
        raise ConfigError("need at least one bootstrap replicate")
    h = system.horizon
    p = system.n_cols
    grams = [x.T @ x for x in system.block_x]
    moments = [x.T @ y for x, y in zip(system.block_x, system.block_y)]

    def one_replicate(rep: int, out: np.ndarray) -> None:
        if reps == 1:
            counts = np.ones(n_stocks, dtype=int)
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=config.seed, spawn_key=(4, rep))
            )
            idx = rng.integers(0, n_stocks, n_stocks)
            counts = np.bincount(idx, minlength=n_stocks)
        gram = np.zeros((p, p))
        moment = np.zeros(p)
        for i, c in enumerate(counts):
            if c:
                gram += c * grams[i]
                moment += c * moments[i]
        if config.ridge > 0.0:
            gram = gram + config.ridge * np.eye(p)
        try:
            coeff = np.linalg.solve(gram, moment)
        except np.linalg.LinAlgError:
            coeff = np.linalg.lstsq(gram, moment, rcond=None)[0]
        cumulative = np.cumsum(coeff[: h + 1])
        if cumulative[0] == 0.0:
            out[rep] = np.nan
        else:
            out[rep] = cumulative / cumulative[0]

    samples = np.empty((reps, h + 1))
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(lambda r: one_replicate(r, samples), range(reps)))
    else:
        for rep in range(reps):
            one_replicate(rep, samples)
    good = samples[~np.isnan(samples).any(axis=1)]
    if good.shape[0] < reps:
        logger.warning(
            "dropped %d degenerate bootstrap replicates", reps - good.shape[0]
        )
    if good.shape[0] == 0:
        raise DataError("every bootstrap replicate was degenerate")
    std = good.std(axis=0, ddof=1) if good.shape[0] > 1 else np.zeros(h + 1)
    return KernelBand(
        mean=good.mean(axis=0),
        std=std,
        lo=np.percentile(good, 5, axis=0),
        hi=np.percentile(good, 95, axis=0),
        replicates=int(good.shape[0]),
    )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeconvInputs:
    flows: FlowMatrix
    residuals: np.ndarray
    sigma: np.ndarray
    betas: np.ndarray
    beta_fallbacks: int


def prepare_inputs(panel: Panel, config: DeconvConfig) -> DeconvInputs:
    """Rolling betas, adjusted flows and residual returns for a panel."""
    betas, flags = rolling_beta(panel, config.beta_half_width)
    flows = cross_sectional_adjust(daily_imbalance(panel), betas)
    residuals = residual_returns(panel, betas)
    sigma = panel.sigma_matrix()
    if np.any(~np.isfinite(sigma)):
        raise DataError("panel has stock-days without bars; clean or fill first")
    return DeconvInputs(flows, residuals, sigma, betas, int(flags.sum()))
