"""Estimation of the drift when the hidden start is random, ``Y_0 ~ N(0, d2)``.

The observation behaves like ``f y0 exp(theta t)`` for small noise, so the
log-ratio of two short-window derivative estimates identifies ``theta``
regardless of the unknown ``y0``. A one-step correction with the empirical
Fisher information then reaches the rate ``eps`` conditionally on ``y0``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ModelError, TimeGrid, clamp
from .riccati import closed_form_trace, cumtrapz, filter_flow, limit_trace, pathwise_value, tangent_flow

LOG_FLOOR = 1e-12
FISHER_FLOOR = 1e-12


def derivative_window(eps: float, grid: TimeGrid) -> int:
    """Steps spanned by ``eps^(2/3)`` (rounded up, at least 2)."""
    k = grid.index(min(eps ** (2.0 / 3.0), grid.T), rounding="up")
    if k < 2:
        raise ModelError("grid too coarse for the derivative window eps^(2/3)")
    return k


def derivative_estimate(X, grid: TimeGrid, t: float, eps: float):
    """Forward difference ``(X_{t+delta} - X_t) / delta`` with ``delta = eps^(2/3)`` on the grid."""
    w = derivative_window(eps, grid)
    k = grid.index(t, rounding="up")
    if k + w > grid.N:
        raise ModelError("derivative window runs past the horizon")
    X = np.asarray(X, dtype=float)
    return (X[..., k + w] - X[..., k]) / (w * grid.dt)


@dataclass(frozen=True, eq=False)
class MMEResult:
    """Log-ratio estimate; ``informative`` is False where both derivatives hit the floor."""

    theta: np.ndarray
    raw: np.ndarray
    informative: np.ndarray


def _log_ratio(X, grid, k1, k2, w, floor):
    X = np.asarray(X, dtype=float)
    d1 = np.abs(X[..., k1 + w] - X[..., k1])
    d2 = np.abs(X[..., k2 + w] - X[..., k2])
    scale = w * grid.dt
    informative = (d1 / scale >= floor) | (d2 / scale >= floor)
    lo = floor * scale
    raw = np.log(np.maximum(d2, lo) / np.maximum(d1, lo)) / ((k2 - k1) * grid.dt)
    return raw, informative


def mme_log_ratio(spec, X, grid: TimeGrid, t1: float, t2: float, eps: float | None = None,
                  floor: float = LOG_FLOOR) -> MMEResult:
    """``(ln|X'_{t2}| - ln|X'_{t1}|) / (t2 - t1)`` with ``|X'|`` floored, clamped to the parameter set.

    The window factor cancels in the ratio, so the estimate is exact on
    noiseless exponential paths.
    """
    eps = spec.eps if eps is None else eps
    if not t1 < t2:
        raise ModelError("need t1 < t2")
    w = derivative_window(eps, grid)
    k1, k2 = grid.index(t1, rounding="up"), grid.index(t2, rounding="up")
    if k1 == k2:
        raise ModelError("evaluation points collapse onto one grid node")
    if k2 + w > grid.N:
        raise ModelError("derivative window runs past the horizon")
    raw, informative = _log_ratio(X, grid, k1, k2, w, floor)
    return MMEResult(clamp(raw, spec.bounds), raw, informative)


def mme_shrinking_window(spec, X, grid: TimeGrid, p1: float, p2: float, eps: float | None = None,
                         floor: float = LOG_FLOOR) -> MMEResult:
    """Log-ratio estimate at ``t_i = p_i / ln(1/eps)``."""
    eps = spec.eps if eps is None else eps
    if not 0 < p1 < p2:
        raise ModelError("need 0 < p1 < p2")
    L = np.log(1.0 / eps)
    t1, t2 = p1 / L, p2 / L
    if t2 >= grid.T:
        raise ModelError("shrinking-window point falls outside the horizon")
    if t1 < grid.dt:
        raise ModelError("shrinking-window points below grid resolution")
    return mme_log_ratio(spec, X, grid, t1, t2, eps, floor)


def default_points(tau: float) -> tuple[float, float]:
    """Evaluation points ``tau/2`` and ``3 tau/4`` of the preliminary estimator."""
    return 0.5 * tau, 0.75 * tau


# ---------------------------------------------------------------------------
# Filter and sensitivity on [tau, T]
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SensitivityIII:
    """``m*`` and ``dm*/dtheta`` on nodes ``start..N``."""

    grid: TimeGrid
    start: int
    m: np.ndarray
    dm: np.ndarray


def filter_sensitivity_iii(spec, theta, X, grid: TimeGrid, tau: float) -> SensitivityIII:
    """Filter with the limit Riccati form on ``[tau, T]`` and its parameter derivative.

    Initial values at ``tau`` come from the exact filter on ``[0, tau]``
    evaluated pathwise (no stochastic integrals), using the closed-form Riccati
    solution started at ``d2 / eps^2``.
    """
    k = grid.index(tau, rounding="up")
    if k == 0:
        raise ModelError("tau must be positive for the limit Riccati form")
    th = np.asarray(theta, dtype=float)
    X = np.asarray(X, dtype=float)
    head = closed_form_trace(spec, th, grid, derivative=True, upto=k)
    m0, dm0 = pathwise_value(head, X, 0.0, k, derivative=True)
    tail = limit_trace(spec, th, grid, k, derivative=True)
    m = filter_flow(tail, X, m0).m
    dm = tangent_flow(tail, X, m, dm0)
    return SensitivityIII(grid, k, m, dm)


def empirical_fisher_iii(sens: SensitivityIII, spec) -> np.ndarray:
    """``(f/sigma)^2 int_tau^t dm*^2 ds`` on nodes ``start..N``."""
    return (spec.f / spec.sigma) ** 2 * cumtrapz(sens.dm**2, sens.grid.dt)


def exact_limit_path(spec, grid: TimeGrid, theta0: float, y0: float = 1.0) -> np.ndarray:
    """Noiseless observation ``y0 f (exp(theta0 t) - 1) / theta0`` sampled on the grid."""
    return y0 * spec.f * np.expm1(theta0 * grid.t) / theta0


def limit_fisher_iii(spec, theta0: float, tau: float, grid: TimeGrid, eps_limit: float = 1e-9) -> np.ndarray:
    """Deterministic ``J_tau^t(theta0)``: empirical Fisher of the noiseless path with
    ``y0 = 1``, initial values taken in the small-noise limit."""
    lim = replace(spec, eps=eps_limit)
    sens = filter_sensitivity_iii(lim, theta0, exact_limit_path(spec, grid, theta0), grid, tau)
    return empirical_fisher_iii(sens, spec)


@dataclass(frozen=True, eq=False)
class OneStepTraceIII:
    grid: TimeGrid
    start: int
    values: np.ndarray
    raw: np.ndarray
    fisher: np.ndarray
    prelim: np.ndarray
    informative: np.ndarray
    sens: SensitivityIII

    @property
    def t(self):
        return self.grid.t[self.start:]


def one_step_iii(spec, X, grid: TimeGrid, tau: float, prelim: MMEResult | None = None) -> OneStepTraceIII:
    """``theta* = pre + I_emp^{-1} (f / sigma^2) int_tau^t dm* [dX - f m* ds]``.

    The preliminary estimate defaults to the log-ratio at ``tau/2`` and ``3 tau/4``.
    Where the empirical Fisher information is below its floor the preliminary
    value is kept.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if prelim is None:
        prelim = mme_log_ratio(spec, X, grid, *default_points(tau))
    pre = np.asarray(prelim.theta, dtype=float)
    sens = filter_sensitivity_iii(spec, pre, X, grid, tau)
    k = sens.start
    I = empirical_fisher_iii(sens, spec)
    dX = np.diff(X[..., k:], axis=-1)
    incr = spec.f / spec.sigma**2 * sens.dm[..., :-1] * (dX - spec.f * sens.m[..., :-1] * grid.dt)
    score = np.zeros(I.shape)
    np.cumsum(incr, axis=-1, out=score[..., 1:])
    ok = I >= FISHER_FLOOR
    raw = pre[..., None] + np.where(ok, score / np.where(ok, I, 1.0), 0.0)
    return OneStepTraceIII(grid, k, clamp(raw, spec.bounds), raw, I, pre, prelim.informative, sens)
