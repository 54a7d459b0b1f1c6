"""Shared fitting machinery: weighted linear least squares and a damped
Gauss-Newton solver with box bounds.

Conventions
-----------
* ``linear_lsq`` treats weights as relative; coefficient standard errors
  are scaled by the residual variance (the usual OLS/WLS estimator).
* ``nonlinear_lsq`` treats weights as inverse variances; the returned
  covariance is ``(J' W J)^-1`` without residual rescaling, so scaling
  every weight by a constant rescales the covariance accordingly while
  leaving the estimates unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import RankDeficiencyError

_FD_REL_STEP = 1e-6


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    stderr: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    dof: int


def linear_lsq(
    design: np.ndarray,
    response: np.ndarray,
    weights: np.ndarray | None = None,
) -> LinearFit:
    """Weighted linear least squares via orthogonal factorization.

    Raises :class:`RankDeficiencyError` naming the dependent columns
    when the (weighted) design is rank deficient.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be 2-D")
    n, p = X.shape
    if n < p:
        raise ValueError(f"need at least as many rows ({n}) as columns ({p})")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite entries in least-squares system")
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        sw = np.sqrt(w)
        Xw = X * sw[:, None]
        yw = y * sw
    else:
        Xw, yw = X, y

    q, r, piv = scipy.linalg.qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        bad = tuple(int(c) for c in sorted(piv[rank:]))
        raise RankDeficiencyError(
            f"rank-deficient design: columns {bad} are linearly dependent", bad
        )
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ coef
    rss = float(resid @ resid)
    dof = max(n - p, 1)
    xtx_inv = scipy.linalg.cho_solve(
        scipy.linalg.cho_factor(Xw.T @ Xw), np.eye(p)
    )
    cov = xtx_inv * (rss / dof)
    return LinearFit(coef, np.sqrt(np.diag(cov)), cov, np.sqrt(rss), dof)


@dataclass
class FitProblem:
    """Box-bounded weighted least-squares problem.

    ``model(params)`` must return predictions aligned with ``observed``.
    Zero or ``None`` weights fall back to uniform weighting.
    """

    model: Callable[[np.ndarray], np.ndarray]
    observed: np.ndarray
    x0: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    weights: np.ndarray | None = None
    step_tol: float = 1e-10
    grad_tol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        p = self.x0.size
        self.lower = (
            np.full(p, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        )
        self.upper = (
            np.full(p, np.inf) if self.upper is None else np.asarray(self.upper, float)
        )
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds exceed upper bounds")
        if np.any(self.x0 < self.lower) or np.any(self.x0 > self.upper):
            raise ValueError("initial guess outside bounds")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if np.any(self.weights < 0):
                raise ValueError("weights must be non-negative")
            if not np.any(self.weights > 0):
                self.weights = None


@dataclass
class FitResult:
    params: np.ndarray
    covariance: np.ndarray
    stderr: np.ndarray
    residual_norm: float
    converged: bool
    n_iter: int
    at_lower: np.ndarray = field(default_factory=lambda: np.array([], dtype=bool))
    at_upper: np.ndarray = field(default_factory=lambda: np.array([], dtype=bool))
    cost_trace: tuple[float, ...] = ()

    @property
    def at_bounds(self) -> np.ndarray:
        return self.at_lower | self.at_upper


def finite_difference_jacobian(
    model: Callable[[np.ndarray], np.ndarray],
    params: np.ndarray,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    rel_step: float = _FD_REL_STEP,
) -> np.ndarray:
    """Central-difference Jacobian with relative steps.

    Steps shrink to one-sided differences at active box bounds so the
    evaluation never leaves the feasible region.
    """
    params = np.asarray(params, dtype=float)
    p = params.size
    f0 = np.asarray(model(params), dtype=float)
    jac = np.empty((f0.size, p))
    lo = np.full(p, -np.inf) if lower is None else lower
    hi = np.full(p, np.inf) if upper is None else upper
    for j in range(p):
        h = rel_step * max(abs(params[j]), 1.0)
        up = min(params[j] + h, hi[j])
        dn = max(params[j] - h, lo[j])
        if up == dn:
            jac[:, j] = 0.0
            continue
        x_up = params.copy()
        x_up[j] = up
        x_dn = params.copy()
        x_dn[j] = dn
        jac[:, j] = (np.asarray(model(x_up)) - np.asarray(model(x_dn))) / (up - dn)
    return jac


def nonlinear_lsq(
    problem: FitProblem,
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None,
) -> FitResult:
    """Damped Gauss-Newton with adaptive damping and box projection.

    Deterministic given its inputs.  Failure to converge within the
    iteration budget returns a result with ``converged=False`` rather
    than raising; the caller decides what that means.
    """
    lo, hi = problem.lower, problem.upper
    w = problem.weights
    sw = None if w is None else np.sqrt(w)

    def residuals(x: np.ndarray) -> np.ndarray:
        r = np.asarray(problem.model(x), dtype=float) - problem.observed
        return r if sw is None else r * sw

    def jac_at(x: np.ndarray) -> np.ndarray:
        if jacobian is not None:
            j = np.asarray(jacobian(x), dtype=float)
        else:
            j = finite_difference_jacobian(problem.model, x, lo, hi)
        return j if sw is None else j * sw[:, None]

    x = problem.x0.copy()
    r = residuals(x)
    cost = float(r @ r)
    damping = 1e-3
    n_iter = 0
    converged = False
    trace = [cost]

    for n_iter in range(1, problem.max_iter + 1):
        J = jac_at(x)
        grad = J.T @ r
        if np.max(np.abs(grad), initial=0.0) <= problem.grad_tol:
            converged = True
            break
        JtJ = J.T @ J
        scale = np.diag(JtJ).copy()
        scale[scale <= 0] = 1.0
        accepted = False
        for _ in range(60):
            try:
                step = np.linalg.solve(JtJ + damping * np.diag(scale), -grad)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            cand = np.clip(x + step, lo, hi)
            r_cand = residuals(cand)
            cost_cand = float(r_cand @ r_cand)
            if cost_cand <= cost:
                moved = np.linalg.norm(cand - x)
                x, r, cost = cand, r_cand, cost_cand
                trace.append(cost)
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                if moved <= problem.step_tol * (np.linalg.norm(x) + problem.step_tol):
                    converged = True
                break
            damping *= 10.0
        if converged:
            break
        if not accepted:
            # every damped step strictly increased the cost
            break

    J = jac_at(x)
    JtJ = J.T @ J
    try:
        cov = np.linalg.inv(JtJ)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(JtJ)
    eps = 1e-12
    finite_lo, finite_hi = np.isfinite(lo), np.isfinite(hi)
    lo_safe = np.where(finite_lo, lo, 0.0)
    hi_safe = np.where(finite_hi, hi, 0.0)
    at_lower = finite_lo & (x <= lo_safe + eps * np.maximum(1.0, np.abs(lo_safe)))
    at_upper = finite_hi & (x >= hi_safe - eps * np.maximum(1.0, np.abs(hi_safe)))
    return FitResult(
        params=x,
        covariance=cov,
        stderr=np.sqrt(np.maximum(np.diag(cov), 0.0)),
        residual_norm=float(np.sqrt(cost)),
        converged=converged,
        n_iter=n_iter,
        at_lower=at_lower,
        at_upper=at_upper,
        cost_trace=tuple(trace),
    )


def weights_from_stderr(stderr: Sequence[float] | np.ndarray) -> np.ndarray | None:
    """Inverse-variance weights; None when any error is zero/missing.

    Noiseless fixtures carry zero standard errors, in which case a
    weighted fit is meaningless and uniform weights are the right call.
    """
    se = np.asarray(stderr, dtype=float)
    if se.size == 0 or np.any(~np.isfinite(se)) or np.any(se <= 0):
        return None
    return 1.0 / se**2
