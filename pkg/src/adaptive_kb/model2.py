"""Estimation of ``theta = (theta1, theta2)``: initial value and drift parameter.

Pipeline: a moment estimator of ``theta1`` on the short window ``eps^(2/3)``, a
minimum-distance estimator of ``theta2`` on ``[0, tau]``, then a one-step
scoring correction that upgrades the preliminary pair to the efficient rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError, TimeGrid, clamp
from .riccati import RiccatiTrace, cumtrapz, filter_flow, solve_riccati, tangent_flow

DET_FLOOR = 1e-10
MDE_COARSE = 256
MDE_TOL = 1e-8
FLAT_TOL = 1e-14
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def golden_section(fun, lo, hi, tol: float = MDE_TOL):
    """Vectorized golden-section minimization; every bracket shrinks in lockstep.

    ``fun`` maps an array of points to an array of values. Ties keep the left
    sub-bracket, so flat stretches resolve toward smaller arguments.
    """
    a, b = np.array(lo, dtype=float), np.array(hi, dtype=float)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while np.max(b - a) > tol:
        left = fc <= fd
        a, b = np.where(left, a, c), np.where(left, d, b)
        c_new = np.where(left, b - GOLDEN * (b - a), d)
        d_new = np.where(left, c, a + GOLDEN * (b - a))
        fnew = fun(np.where(left, c_new, d_new))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = c_new, d_new
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# Preliminary estimators
# ---------------------------------------------------------------------------


def mme_window(eps: float, grid: TimeGrid) -> int:
    """Node index of ``eps^(2/3)`` rounded up; at least two steps are required."""
    k = grid.index(min(eps ** (2.0 / 3.0), grid.T), rounding="up")
    if k < 2:
        raise ModelError("grid too coarse for the moment window eps^(2/3)")
    return k


def mme_theta1(X, spec, grid: TimeGrid, eps: float | None = None):
    """``X_{tau_eps} / (f(0) tau_eps)``, clamped to the parameter set."""
    eps = spec.eps if eps is None else eps
    k = mme_window(eps, grid)
    X = np.asarray(X, dtype=float)
    val = X[..., k] / (float(spec.f(0.0)) * grid.t[k])
    return clamp(val, spec.bounds[0])


def curve_F(spec, theta2, grid: TimeGrid, upto: int | None = None) -> np.ndarray:
    """``F(theta2, t) = int_0^t f(s) exp(int_0^s a(theta2, r) dr) ds`` on nodes ``0..upto``."""
    n = grid.N if upto is None else upto
    t = grid.t[: n + 1]
    a = spec.drift.value(np.asarray(theta2, dtype=float), t)
    return cumtrapz(spec.f(t) * np.exp(cumtrapz(a, grid.dt)), grid.dt)


@dataclass(frozen=True)
class Identifiability:
    value: float
    argmin: float
    ok: bool


def identifiability_g(spec, theta20: float, nu: float, tau: float, grid: TimeGrid,
                      resolution: float = 1e-3) -> Identifiability:
    """``inf_{|theta2 - theta20| >= nu} int_0^tau [F(theta2) - F(theta20)]^2 dt`` over the
    closed parameter interval scanned at ``resolution`` times its width."""
    lo, hi = spec.bounds[1]
    n = int(round(1.0 / resolution))
    cand = np.linspace(lo, hi, n + 1)
    extra = [x for x in (theta20 - nu, theta20 + nu) if lo <= x <= hi]
    cand = np.unique(np.concatenate([cand, extra]))
    cand = cand[np.abs(cand - theta20) >= nu * (1 - 1e-12)]
    if cand.size == 0:
        return Identifiability(float("inf"), float("nan"), True)
    k = grid.index(tau, rounding="up")
    F0 = curve_F(spec, theta20, grid, k)
    Fc = curve_F(spec, cand, grid, k)
    vals = _trapz((Fc - F0) ** 2, grid.dt)
    j = int(np.argmin(vals))
    return Identifiability(float(vals[j]), float(cand[j]), bool(vals[j] > 0))


def _trapz(y, dt):
    return dt * (np.sum(y, axis=-1) - 0.5 * (y[..., 0] + y[..., -1]))


@dataclass(frozen=True, eq=False)
class MDEResult:
    theta2: np.ndarray
    flat: np.ndarray


def mde_theta2(X, theta1, spec, grid: TimeGrid, tau: float) -> MDEResult:
    """Minimize ``int_0^tau [X_t - theta1 F(theta2, t)]^2 dt`` over ``theta2``.

    Coarse scan of 256 points over the clamped interval, then golden-section
    refinement to 1e-8 inside the bracket around the coarse minimizer. Flat
    objectives (spread below 1e-14) are flagged and return the coarse argmin.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    k = grid.index(tau, rounding="up")
    Xw = X[:, : k + 1]
    th1 = np.broadcast_to(np.asarray(theta1, dtype=float), (X.shape[0],))
    lo, hi = spec.bounds[1]
    coarse = np.linspace(lo + 1e-9, hi - 1e-9, MDE_COARSE)
    Fc = curve_F(spec, coarse, grid, k)
    w = np.full(k + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    J = (np.sum(w * Xw**2, axis=1)[:, None] - 2 * th1[:, None] * (Xw * w) @ Fc.T
         + th1[:, None] ** 2 * np.sum(w * Fc**2, axis=1)[None, :])
    j = np.argmin(J, axis=1)
    flat = (np.max(J, axis=1) - np.min(J, axis=1)) <= FLAT_TOL
    a = coarse[np.maximum(j - 1, 0)]
    b = coarse[np.minimum(j + 1, MDE_COARSE - 1)]

    def objective(theta2):
        F = curve_F(spec, theta2, grid, k)
        return _trapz((Xw - th1[:, None] * F) ** 2, grid.dt)

    refined = golden_section(objective, a, b)
    # never accept a refinement that is worse than the coarse point
    better = objective(refined) <= J[np.arange(len(j)), j]
    est = np.where(better & ~flat, refined, coarse[j])
    return MDEResult(clamp(est, (lo, hi)), flat)


@dataclass(frozen=True, eq=False)
class PreliminaryPair:
    theta1: np.ndarray
    theta2: np.ndarray
    flat: np.ndarray
    window: int
    tau_index: int


def preliminary_pair(X, spec, grid: TimeGrid, tau: float, eps: float | None = None) -> PreliminaryPair:
    th1 = np.atleast_1d(mme_theta1(X, spec, grid, eps))
    mde = mde_theta2(X, th1, spec, grid, tau)
    return PreliminaryPair(th1, mde.theta2, mde.flat, mme_window(spec.eps if eps is None else eps, grid),
                           grid.index(tau, rounding="up"))


# ---------------------------------------------------------------------------
# Sensitivities
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FilterSensitivity:
    """Filter mean and its derivatives in ``theta1`` and ``theta2`` on ``[0, T]``."""

    m: np.ndarray
    dm1: np.ndarray
    dm2: np.ndarray
    riccati: RiccatiTrace


def _theta_arrays(theta):
    th1, th2 = theta
    return np.asarray(th1, dtype=float), np.asarray(th2, dtype=float)


def sensitivity_riccati(spec, theta, grid: TimeGrid) -> RiccatiTrace:
    return solve_riccati(spec.system(_theta_arrays(theta)), grid, 0.0, derivative=True)


def filter_sensitivities(spec, theta, X, grid: TimeGrid, trace: RiccatiTrace | None = None) -> FilterSensitivity:
    """``m``, ``dm/dtheta1 = Phi(theta2, 0, t)`` and ``dm/dtheta2`` (exact derivative of
    the discrete filter, driven by the same observation increments)."""
    th1, th2 = _theta_arrays(theta)
    trace = sensitivity_riccati(spec, (th1, th2), grid) if trace is None else trace
    ff = filter_flow(trace, X, th1)
    dm2 = tangent_flow(trace, X, ff.m, 0.0)
    return FilterSensitivity(ff.m, trace.phi0 + np.zeros(ff.m.shape), dm2, trace)


@dataclass(frozen=True, eq=False)
class LimitSensitivity:
    """Noiseless-limit counterparts: ``y(theta, theta0)``, ``dy1``, ``dy2`` and ``y(theta0)``."""

    y: np.ndarray
    dy1: np.ndarray
    dy2: np.ndarray
    y_true: np.ndarray


def limit_sensitivities(spec, theta, theta0, grid: TimeGrid, trace: RiccatiTrace | None = None) -> LimitSensitivity:
    """Quadrature of the limit formulas

    ``y(theta, theta0, t) = theta1 Phi(0,t) + int_0^t Phi(s,t) f B(s) y_s(theta0) ds``,
    ``dy1 = Phi(0, t)``,
    ``dy2 = int_0^t Phi(s,t) [A_dot(s) y_s(theta, theta0) + f B_dot(s) y_s(theta0)] ds``.
    """
    th1, th2 = _theta_arrays(theta)
    trace = sensitivity_riccati(spec, (th1, th2), grid) if trace is None else trace
    t, dt = grid.t, grid.dt
    t01, t02 = _theta_arrays(theta0)
    y_true = t01[..., None] * np.exp(cumtrapz(spec.drift.value(t02, t), dt)) if t01.ndim \
        else t01 * np.exp(cumtrapz(spec.drift.value(t02, t), dt))
    f = spec.f(t)
    E = trace.phi0
    Einv = np.exp(-trace.cumA)
    y = th1[..., None] * E + E * cumtrapz(Einv * f * trace.gain * y_true, dt)
    dy2 = E * cumtrapz(Einv * (trace.dA * y + f * trace.dgain * y_true), dt)
    return LimitSensitivity(y, E + np.zeros(y.shape), dy2, y_true)


@dataclass(frozen=True, eq=False)
class FisherTrace:
    """Running Fisher matrix ``I_tau^t`` on nodes ``start..N`` (shape ``(..., n, 2, 2)``)."""

    start: int
    matrix: np.ndarray

    @property
    def min_eig(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)[..., 0]

    @property
    def det(self) -> np.ndarray:
        I = self.matrix
        return I[..., 0, 0] * I[..., 1, 1] - I[..., 0, 1] ** 2


def fisher_from(dy1, dy2, k_t, start: int, dt: float) -> FisherTrace:
    v1, v2 = dy1[..., start:], dy2[..., start:]
    kk = k_t[start:]
    I11 = cumtrapz(kk * v1 * v1, dt)
    I12 = cumtrapz(kk * v1 * v2, dt)
    I22 = cumtrapz(kk * v2 * v2, dt)
    mat = np.stack([np.stack([I11, I12], -1), np.stack([I12, I22], -1)], -2)
    return FisherTrace(start, mat)


def _k(spec, grid):
    t = grid.t
    return (spec.f(t) / spec.sigma(t)) ** 2


def fisher_matrix(spec, theta, tau: float, grid: TimeGrid, trace: RiccatiTrace | None = None) -> FisherTrace:
    """``I_tau^t(theta) = int_tau^t f^2 dy dy^T / sigma^2 ds`` from limit sensitivities at ``theta``."""
    lim = limit_sensitivities(spec, theta, theta, grid, trace)
    return fisher_from(lim.dy1, lim.dy2, _k(spec, grid), grid.index(tau, rounding="up"), grid.dt)


def inverse_2x2(I: np.ndarray, floor: float = DET_FLOOR):
    """Closed-form inverse; entries with determinant below ``floor`` are returned as NaN."""
    det = I[..., 0, 0] * I[..., 1, 1] - I[..., 0, 1] * I[..., 1, 0]
    ok = det >= floor
    safe = np.where(ok, det, 1.0)
    inv = np.empty(I.shape)
    inv[..., 0, 0] = I[..., 1, 1] / safe
    inv[..., 1, 1] = I[..., 0, 0] / safe
    inv[..., 0, 1] = -I[..., 0, 1] / safe
    inv[..., 1, 0] = -I[..., 1, 0] / safe
    inv[~ok] = np.nan
    return inv, ok


# ---------------------------------------------------------------------------
# One-step MLE-process
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OneStepTrace2D:
    """One-step process on nodes ``start..N``; ``values[..., j, :]`` is ``(theta1, theta2)``.

    ``valid`` marks nodes where the Fisher matrix is invertible; elsewhere the
    preliminary pair is reported.
    """

    grid: TimeGrid
    start: int
    values: np.ndarray
    raw: np.ndarray
    fisher: FisherTrace
    valid: np.ndarray
    prelim: tuple

    @property
    def t(self):
        return self.grid.t[self.start:]


@dataclass(frozen=True, eq=False)
class OneStepParts:
    """Shared ingredients of the integral and recurrent forms."""

    m: np.ndarray
    dm: np.ndarray
    dy: np.ndarray
    fisher: FisherTrace
    riccati: RiccatiTrace


def one_step_parts(spec, X, prelim, tau: float, grid: TimeGrid) -> OneStepParts:
    th1, th2 = _theta_arrays(prelim)
    trace = sensitivity_riccati(spec, (th1, th2), grid)
    sens = filter_sensitivities(spec, (th1, th2), X, grid, trace)
    lim = limit_sensitivities(spec, (th1, th2), (th1, th2), grid, trace)
    fisher = fisher_from(lim.dy1, lim.dy2, _k(spec, grid), grid.index(tau, rounding="up"), grid.dt)
    dm = np.stack([sens.dm1, sens.dm2], -1)
    dy = np.stack([lim.dy1, lim.dy2], -1)
    return OneStepParts(sens.m, dm, dy, fisher, trace)


def _innovation(spec, X, m, grid, start):
    t = grid.t
    f = spec.f(t)
    dX = np.diff(np.asarray(X, dtype=float), axis=-1)
    return (dX - f[:-1] * m[..., :-1] * grid.dt)[..., start:]


def one_step_process(spec, X, prelim, tau: float, grid: TimeGrid, *, sensitivity: str = "filter",
                     parts: OneStepParts | None = None) -> OneStepTrace2D:
    """``theta* = bar + I_tau^t(bar)^{-1} int_tau^t (f s / sigma^2) [dX - f m ds]``.

    ``s`` is the filter sensitivity (``"filter"``) or its noiseless limit
    (``"limit"``); ``m`` is the filter at the preliminary pair.
    """
    X = np.asarray(X, dtype=float)
    parts = one_step_parts(spec, X, prelim, tau, grid) if parts is None else parts
    start = parts.fisher.start
    t = grid.t
    w = spec.f(t) / spec.sigma(t) ** 2
    s = parts.dm if sensitivity == "filter" else parts.dy
    innov = _innovation(spec, X, parts.m, grid, start)
    incr = (w[start:-1, None] * s[..., start:-1, :]) * innov[..., None]
    score = np.zeros(incr.shape[:-2] + (incr.shape[-2] + 1, 2))
    np.cumsum(incr, axis=-2, out=score[..., 1:, :])
    inv, ok = inverse_2x2(parts.fisher.matrix)
    bar = np.stack(_theta_arrays(prelim), -1)[..., None, :]
    raw = bar + np.einsum("...ij,...j->...i", np.where(ok[..., None, None], inv, 0.0), score)
    return OneStepTrace2D(grid, start, _clamp2(spec, raw), raw, parts.fisher, ok, prelim)


def _clamp2(spec, v):
    (a1, b1), (a2, b2) = spec.bounds
    out = np.empty(v.shape)
    out[..., 0] = np.clip(v[..., 0], a1 + 1e-9, b1 - 1e-9)
    out[..., 1] = np.clip(v[..., 1], a2 + 1e-9, b2 - 1e-9)
    return out


def one_step_recurrent(spec, X, prelim, tau: float, grid: TimeGrid, *, start_index: int | None = None,
                       parts: OneStepParts | None = None):
    """Differential form ``d theta* = I^{-1} L (bar - theta*) dt + I^{-1} (f dy / sigma^2)[dX - f m dt]``
    with ``L = f^2 dy dy^T / sigma^2``, integrated by explicit Euler.

    Starts at ``start_index`` (default: the first node at or after ``1.5 tau``
    with an invertible Fisher matrix for every replicate), seeded by the
    integral form with limit sensitivities. Near ``tau`` the drift
    ``I^{-1} L`` grows like ``1/(t - tau)`` and explicit Euler loses accuracy,
    hence the offset. Returns ``(start_index, values)`` unclamped.
    """
    X = np.asarray(X, dtype=float)
    parts = one_step_parts(spec, X, prelim, tau, grid) if parts is None else parts
    integral = one_step_process(spec, X, prelim, tau, grid, sensitivity="limit", parts=parts)
    fs = parts.fisher.start
    ok_all = np.all(integral.valid.reshape(-1, integral.valid.shape[-1]), axis=0)
    if start_index is None:
        first = grid.index(min(1.5 * tau, grid.T), rounding="up") - fs
        good = np.flatnonzero(ok_all & (np.arange(ok_all.size) >= first))
        if good.size == 0:
            raise ModelError("Fisher matrix degenerate on the whole interval")
        start_index = fs + int(good[0])
    j0 = start_index - fs
    t = grid.t
    f, sig = spec.f(t), spec.sigma(t)
    w = f / sig**2
    kk = f * w
    dy = parts.dy
    innov = _innovation(spec, X, parts.m, grid, 0)
    inv, _ = inverse_2x2(parts.fisher.matrix)
    bar = np.stack(_theta_arrays(prelim), -1)
    n = grid.N - start_index
    out = np.empty(bar.shape[:-1] + (n + 1, 2))
    cur = integral.raw[..., j0, :]
    out[..., 0, :] = cur
    dt = grid.dt
    for i in range(n):
        k = start_index + i
        Ik = inv[..., k - fs, :, :]
        v = dy[..., k, :]
        proj = np.einsum("...i,...i->...", v, bar - cur)
        drive = kk[k] * v * proj[..., None] * dt + w[k] * v * innov[..., k, None]
        cur = cur + np.einsum("...ij,...j->...i", Ik, drive)
        out[..., i + 1, :] = cur
    return start_index, out
