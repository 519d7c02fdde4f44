"""Estimation of an unknown deterministic initial value.

With ``m(theta, t) = theta Phi(0, t) + H(t)`` the log-likelihood is quadratic in
``theta``, so the MLE is explicit:

    theta_hat_t = S_t / I_t,   S_t = int_0^t (g / sigma) [dX - f H ds],
    I_t = int_0^t g^2 ds,      g = f Phi(0, .) / sigma.

``I_t`` does not depend on the parameter. Stochastic integrals use left
endpoints, ``ds`` integrals the trapezoid rule, so the discrete MLE maximizes
the discrete log-likelihood exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError, TimeGrid
from .riccati import FilterTrace, RiccatiTrace, cumtrapz, filter_flow, riccati_trace

FISHER_FLOOR = 1e-12


class InsufficientInformation(ModelError):
    """Fisher information below the floor: the estimate would be noise."""


@dataclass(frozen=True, eq=False)
class DetInitQuantities:
    """Parameter-free pieces shared by every estimator of this model."""

    grid: TimeGrid
    riccati: RiccatiTrace
    g: np.ndarray
    fisher: np.ndarray
    f: np.ndarray
    sigma: np.ndarray


def quantities(spec, grid: TimeGrid) -> DetInitQuantities:
    trace = riccati_trace(spec, grid, 0.0)
    t = grid.t
    f, s = spec.f(t), spec.sigma(t)
    g = f * trace.phi0 / s
    return DetInitQuantities(grid, trace, g, cumtrapz(g * g, grid.dt), f, s)


def fisher_info(spec, grid: TimeGrid, t: float | None = None, q: DetInitQuantities | None = None):
    """``I_t = int_0^t f^2 Phi(0,s)^2 / sigma^2 ds``; the whole running trace when ``t`` is None."""
    q = quantities(spec, grid) if q is None else q
    return q.fisher if t is None else float(q.fisher[grid.index(t)])


def score_process(spec, X, grid: TimeGrid, q: DetInitQuantities | None = None):
    """Running numerator ``S`` and the zero-start filter term ``H``."""
    q = quantities(spec, grid) if q is None else q
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != grid.N + 1:
        raise ModelError("path does not match the grid")
    H = filter_flow(q.riccati, X, 0.0).H
    drift = cumtrapz(q.g * q.f * H / q.sigma, grid.dt)
    stoch = np.zeros(X.shape)
    np.cumsum((q.g / q.sigma)[:-1] * np.diff(X, axis=-1), axis=-1, out=stoch[..., 1:])
    return stoch - drift, H


def _check_info(I):
    if np.any(I < FISHER_FLOOR):
        raise InsufficientInformation("insufficient information: Fisher information below floor")


def mle_batch(spec, X, grid: TimeGrid, t: float, q: DetInitQuantities | None = None):
    """Explicit MLE ``S_t / I_t`` at time ``t`` (unclamped)."""
    q = quantities(spec, grid) if q is None else q
    k = grid.index(t)
    I = q.fisher[k]
    _check_info(I)
    S, _ = score_process(spec, X, grid, q)
    return S[..., k] / I


def mle_preliminary(spec, X, grid: TimeGrid, tau: float, q: DetInitQuantities | None = None):
    """Learning-interval estimate: the batch formula on ``[0, tau]``."""
    return mle_batch(spec, X, grid, tau, q)


def log_likelihood(spec, X, grid: TimeGrid, theta, t: float, q: DetInitQuantities | None = None):
    """Rescaled log-likelihood ``int f m / sigma^2 dX - 1/2 int f^2 m^2 / sigma^2 ds`` on ``[0, t]``."""
    q = quantities(spec, grid) if q is None else q
    X = np.asarray(X, dtype=float)
    k = grid.index(t)
    _, H = score_process(spec, X, grid, q)
    m = np.asarray(theta, float)[..., None] * q.riccati.phi0 + H
    w = q.f / q.sigma**2
    stoch = np.sum((w * m)[..., :k] * np.diff(X, axis=-1)[..., :k], axis=-1)
    quad = cumtrapz(q.f**2 * m**2 / q.sigma**2, grid.dt)[..., k]
    return stoch - 0.5 * quad


def phi_tilde_steps(q: DetInitQuantities, start: int, nodes: int = 4) -> np.ndarray:
    """Per-step factors ``exp(-int g^2 / I dr)`` on ``[t_k, t_{k+1}]``, ``k >= start``.

    ``g^2`` is taken piecewise linear (the representation integrated by the
    trapezoid rule), so ``I`` is piecewise quadratic; each step integral uses
    Gauss-Legendre quadrature.
    """
    x, w = np.polynomial.legendre.leggauss(nodes)
    x, w = 0.5 * (x + 1), 0.5 * w
    dt = q.grid.dt
    g2 = q.g[start:] ** 2
    I0 = q.fisher[start:-1]
    g2a, g2b = g2[:-1], g2[1:]
    s = x[:, None] * dt
    integrand = (g2a + (g2b - g2a) * x[:, None]) / (I0 + g2a * s + (g2b - g2a) * s * x[:, None] / 2)
    return np.exp(-dt * np.sum(w[:, None] * integrand, axis=0))


def phi_tilde(q: DetInitQuantities, s: float, t: float) -> float:
    """Transition of the recurrent estimator between two nodes ``s <= t`` (``I_s > 0``)."""
    i, j = q.grid.index(s), q.grid.index(t)
    if i > j:
        raise ModelError("phi_tilde requires s <= t")
    _check_info(q.fisher[i])
    return float(np.prod(phi_tilde_steps(q, i)[: j - i]))


@dataclass(frozen=True, eq=False)
class EstimatorTraceScalar:
    """Estimator process on nodes ``start..N`` (``start`` is the node of ``tau``)."""

    grid: TimeGrid
    start: int
    values: np.ndarray
    raw: np.ndarray
    fisher: np.ndarray
    S: np.ndarray

    @property
    def t(self):
        return self.grid.t[self.start:]

    @property
    def tau(self):
        return self.grid.t[self.start]


def mle_recurrent(spec, X, grid: TimeGrid, tau: float, q: DetInitQuantities | None = None) -> EstimatorTraceScalar:
    """Recurrent MLE-process on ``[tau, T]`` seeded by the learning-interval estimate.

    Exponential Euler step ``theta_{k+1} = Phi~_k (theta_k + u_k / I_k)`` with
    ``u_k`` the increment of ``S`` and ``Phi~_k`` from ``phi_tilde_steps``.
    """
    q = quantities(spec, grid) if q is None else q
    k0 = grid.index(tau, rounding="up")
    if k0 == 0:
        raise ModelError("the recurrence cannot start at t = 0")
    _check_info(q.fisher[k0])
    S, _ = score_process(spec, X, grid, q)
    S = S[..., k0:]
    I = q.fisher[k0:]
    p = phi_tilde_steps(q, k0)
    u = np.diff(S, axis=-1)
    est = np.empty(S.shape)
    est[..., 0] = S[..., 0] / I[0]
    for j in range(p.size):
        est[..., j + 1] = p[j] * (est[..., j] + u[..., j] / I[j])
    return EstimatorTraceScalar(grid, k0, spec.clamp(est), est, I, S)


def efficiency_bound(spec, grid: TimeGrid, t: float, q: DetInitQuantities | None = None) -> float:
    """``Phi(0,t)^2 / I_t``, the best attainable normalized filter risk; ``inf`` at ``I_t = 0``."""
    q = quantities(spec, grid) if q is None else q
    k = grid.index(t)
    I = q.fisher[k]
    return float("inf") if I <= 0 else float(q.riccati.phi0[k] ** 2 / I)


def oracle_filter(spec, X, grid: TimeGrid, theta, q: DetInitQuantities | None = None) -> FilterTrace:
    """Filter at a known initial value, sharing the parameter-free trace."""
    q = quantities(spec, grid) if q is None else q
    return filter_flow(q.riccati, X, theta)
