"""Adaptive Kalman-Bucy filters: estimator processes substituted into the filter.

Every trace is built causally: at node ``t_k`` only the estimate available at
``t_k`` (itself a function of ``X`` up to ``t_k``) enters the step to ``t_{k+1}``.
Initial values use the filter summed by parts at the estimate available at the
start node, so no stochastic integral with a future-dependent integrand is formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError, TimeGrid
from .model1 import DetInitQuantities, EstimatorTraceScalar, quantities
from .model2 import OneStepTrace2D
from .model3 import OneStepTraceIII
from .riccati import _limit, closed_form_trace, filter_flow, pathwise_value, solve_riccati
from .sde import linear_recursion


@dataclass(frozen=True)
class InitialValues:
    """How the adaptive filter was started: node, filter value, Riccati value and method."""

    node: int
    m: np.ndarray
    gamma: np.ndarray | None
    method: str


@dataclass(frozen=True, eq=False)
class AdaptiveFilterTrace:
    """Adaptive filter on nodes ``start..N``.

    ``n`` is the zero-start filter (initial-value model only); ``gamma`` the
    Riccati trace driven by the estimates (joint and random-start models).
    """

    grid: TimeGrid
    start: int
    m: np.ndarray
    gamma: np.ndarray | None
    n: np.ndarray | None
    init: InitialValues

    @property
    def t(self):
        return self.grid.t[self.start:]


def _check_path(X, grid):
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != grid.N + 1:
        raise ModelError("path does not match the grid")
    return X


# ---------------------------------------------------------------------------
# Unknown deterministic initial value
# ---------------------------------------------------------------------------


def adaptive_filter_i(spec, X, grid: TimeGrid, est: EstimatorTraceScalar,
                      q: DetInitQuantities | None = None) -> AdaptiveFilterTrace:
    """``m* = theta_hat_t Phi(0, t) + n_t`` on ``[tau, T]`` with ``n`` the zero-start filter."""
    X = _check_path(X, grid)
    if not est.grid.same_as(grid):
        raise ModelError("estimator trace grid does not match")
    q = quantities(spec, grid) if q is None else q
    n = filter_flow(q.riccati, X, 0.0).H
    k = est.start
    m = est.values * q.riccati.phi0[k:] + n[..., k:]
    init = InitialValues(k, m[..., 0], None, "estimate times transition plus zero-start filter")
    return AdaptiveFilterTrace(grid, k, m, None, n, init)


# ---------------------------------------------------------------------------
# Joint parameter
# ---------------------------------------------------------------------------


def _riccati_step(g, k0, k1, km, a0, a1, am, q0, q1, qm, h):
    def rhs(a, kk, qq, x):
        return 2 * a * x - kk * x * x + qq

    r1 = rhs(a0, k0, q0, g)
    r2 = rhs(am, km, qm, g + 0.5 * h * r1)
    r3 = rhs(am, km, qm, g + 0.5 * h * r2)
    r4 = rhs(a1, k1, q1, g + h * r3)
    return g + h / 6 * (r1 + 2 * r2 + 2 * r3 + r4)


def adaptive_filter_ii(spec, X, grid: TimeGrid, one: OneStepTrace2D,
                       tau_star: float | None = None) -> AdaptiveFilterTrace:
    """Adaptive filter on ``[tau*, T]`` driven by the one-step process.

    Start: the Riccati solution on ``[0, tau*]`` and the pathwise filter value
    at ``tau*``, both at the estimate available at ``tau*``. Then each step uses
    the estimate at its left node: RK4 for the Riccati value and the filter's
    one-step transition for the mean.
    """
    X = _check_path(X, grid)
    if not one.grid.same_as(grid):
        raise ModelError("estimator trace grid does not match")
    tau = grid.t[one.start]
    tau_star = 1.5 * tau if tau_star is None else float(tau_star)
    if not tau_star > tau:
        raise ModelError("tau* must exceed tau")
    ks = grid.index(min(tau_star, grid.T), rounding="up")
    est = one.values[..., ks - one.start:, :]
    th1, th2 = est[..., 0, 0], est[..., 0, 1]

    head_grid = TimeGrid(float(grid.t[ks]), ks)
    head = solve_riccati(spec.system((th1, th2)), head_grid, 0.0)
    m0 = pathwise_value(head, X[..., : ks + 1], th1, ks)
    g0 = head.gamma[..., -1]

    t, tm, h = grid.t, grid.midpoints, grid.dt
    f, fm = spec.f(t), spec.f(tm)
    s, sm = spec.sigma(t), spec.sigma(tm)
    k, km = (f / s) ** 2, (fm / sm) ** 2
    q, qm = spec.b(t) ** 2, spec.b(tm) ** 2
    drift = spec.drift
    dX = np.diff(X, axis=-1)
    n = grid.N - ks
    theta2 = est[..., 1]
    m = np.empty(theta2.shape[:-1] + (n + 1,))
    gam = np.empty_like(m)
    m[..., 0], gam[..., 0] = m0, g0
    for i in range(n):
        j = ks + i
        p = theta2[..., i]
        a0, a1, am = drift.value(p, t[j]), drift.value(p, t[j + 1]), drift.value(p, tm[j])
        g1 = _riccati_step(gam[..., i], k[j], k[j + 1], km[j], a0, a1, am, q[j], q[j + 1], qm[j], h)
        gain = f[j] * gam[..., i] / s[j] ** 2
        step = (1 + a0 * h) / (1 + k[j] * gam[..., i] * h)
        m[..., i + 1] = step * (m[..., i] + gain * dX[..., j])
        gam[..., i + 1] = g1
    init = InitialValues(ks, m0, g0, "Riccati from zero and pathwise filter value at the estimate at tau*")
    return AdaptiveFilterTrace(grid, ks, m, gam, None, init)


# ---------------------------------------------------------------------------
# Random initial value
# ---------------------------------------------------------------------------


def adaptive_filter_iii(spec, X, grid: TimeGrid, one: OneStepTraceIII,
                        tau_start: float | None = None) -> AdaptiveFilterTrace:
    """Adaptive filter on ``[tau_start, T]`` with the limit Riccati form at the running estimate.

    ``tau_start`` defaults to ``1.5 tau`` (``tau`` the start of the one-step
    trace); starting at ``tau`` itself would carry the preliminary estimate's
    ``eps^(1/3)`` error into the filter. The start value is the exact filter at
    ``tau_start`` summed by parts at the estimate available there. Each step
    uses the estimate at its left node in the gain and in the one-step
    transition.
    """
    X = _check_path(X, grid)
    if not one.grid.same_as(grid):
        raise ModelError("estimator trace grid does not match")
    tau = grid.t[one.start]
    tau_start = 1.5 * tau if tau_start is None else float(tau_start)
    if tau_start < tau:
        raise ModelError("the adaptive filter cannot start before the one-step trace")
    k = grid.index(min(tau_start, grid.T), rounding="up")
    if k >= grid.N:
        raise ModelError("adaptive start leaves no interval before T")
    est = np.asarray(one.values, dtype=float)[..., k - one.start:]
    m0 = pathwise_value(closed_form_trace(spec, est[..., 0], grid, upto=k), X, 0.0, k)

    kk = (spec.f / spec.sigma) ** 2
    t = grid.t[k:]
    th = est[..., :-1]
    gamma = _limit(th, kk, spec.b**2, t[:-1], t[0])[0]
    gain = spec.f * gamma / spec.sigma**2
    steps = np.log1p(th * grid.dt) - np.log1p(kk * gamma * grid.dt)
    log_growth = np.concatenate([np.zeros(steps.shape[:-1] + (1,)), np.cumsum(steps, axis=-1)], axis=-1)
    dX = np.diff(X[..., k:], axis=-1)
    m = linear_recursion(log_growth, np.exp(steps) * gain * dX, m0)
    g_last = _limit(est[..., -1:], kk, spec.b**2, t[-1:], t[0])[0]
    gam = np.concatenate([gamma, g_last], axis=-1)
    init = InitialValues(k, m0, gam[..., 0], "exact filter summed by parts at the estimate at the start node")
    return AdaptiveFilterTrace(grid, k, m, gam, None, init)


# ---------------------------------------------------------------------------
# Errors against the oracle filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ErrorTrace:
    """``(m* - m_oracle) / eps`` on the adaptive interval with summaries per replicate."""

    t: np.ndarray
    values: np.ndarray
    sup: np.ndarray
    l2: np.ndarray
    terminal: np.ndarray


def error_process(adaptive: AdaptiveFilterTrace, oracle, eps: float) -> ErrorTrace:
    """Normalized error against an oracle filter (a ``FilterTrace`` or an array on the full grid)."""
    grid = adaptive.grid
    if hasattr(oracle, "m"):
        if not oracle.grid.same_as(grid):
            raise ModelError("oracle grid does not match")
        if oracle.start > adaptive.start:
            raise ModelError("oracle does not cover the adaptive interval")
        ref = oracle.m[..., adaptive.start - oracle.start:]
    else:
        ref = np.asarray(oracle, dtype=float)
        if ref.shape[-1] != grid.N + 1:
            raise ModelError("oracle array does not match the grid")
        ref = ref[..., adaptive.start:]
    if ref.shape[-1] != adaptive.m.shape[-1]:
        raise ModelError("interval mismatch between adaptive and oracle traces")
    if eps <= 0:
        raise ModelError("eps must be positive")
    e = (adaptive.m - ref) / eps
    dt = grid.dt
    l2 = np.sqrt(dt * (np.sum(e * e, axis=-1) - 0.5 * (e[..., 0] ** 2 + e[..., -1] ** 2)))
    return ErrorTrace(adaptive.t, e, np.max(np.abs(e), axis=-1), l2, e[..., -1])
