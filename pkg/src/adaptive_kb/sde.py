"""Euler-Maruyama simulation, Ito sums and the discrete Gaussian-conditioning oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelError, TimeGrid

STREAMS = {"W": 0, "V": 1, "Y0": 2}


@dataclass(frozen=True)
class SeedPolicy:
    """Counter-based stream derivation: one Philox stream per (master, replicate, stream)."""

    master: int

    def __post_init__(self):
        if not 0 <= int(self.master) < 2**64:
            raise ModelError("master seed must be an unsigned 64-bit integer")

    def generator(self, replicate: int, stream: str) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.master), spawn_key=(int(replicate), STREAMS[stream]))
        return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True, eq=False)
class PathPair:
    """Observed ``X`` and hidden ``Y`` (rows are replicates) with their noise increments."""

    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    dW: np.ndarray
    dV: np.ndarray
    master: int
    replicates: np.ndarray
    y0: np.ndarray

    def row(self, i: int) -> "PathPair":
        sl = slice(i, i + 1)
        return PathPair(self.grid, self.X[sl], self.Y[sl], self.dW[sl], self.dV[sl],
                        self.master, self.replicates[sl], self.y0[sl])

    def __len__(self):
        return self.X.shape[0]


def linear_recursion(log_growth: np.ndarray, drive: np.ndarray, z0) -> np.ndarray:
    """Solve ``z_{k+1} = p_k z_k + u_k`` given ``log_growth[..., k] = sum_{j<k} log p_j``.

    ``log_growth`` has one more entry than ``drive`` along the last axis and
    starts at 0. Uses ``z_k = P_k (z_0 + sum_{j<k} u_j / P_{j+1})`` and falls
    back to a plain loop when the growth range would overflow.
    """
    L = np.asarray(log_growth, dtype=float)
    u = np.asarray(drive, dtype=float)
    shape = np.broadcast_shapes(L.shape[:-1], u.shape[:-1], np.shape(z0))
    n = u.shape[-1] + 1
    if np.ptp(L) < 600.0:
        P = np.exp(L)
        acc = np.zeros(shape + (n,))
        acc[..., 1:] = np.cumsum(u / P[..., 1:], axis=-1)
        return P * (np.asarray(z0, dtype=float)[..., None] + acc)
    p = np.exp(np.diff(L, axis=-1))
    p = np.broadcast_to(p, shape + (n - 1,))
    u = np.broadcast_to(u, shape + (n - 1,))
    z = np.empty(shape + (n,))
    z[..., 0] = z0
    for k in range(n - 1):
        z[..., k + 1] = p[..., k] * z[..., k] + u[..., k]
    return z


def _as_indices(replicates) -> np.ndarray:
    return np.atleast_1d(np.asarray(replicates, dtype=np.int64))


def draw_y0(spec, master: int, replicates) -> np.ndarray:
    """Initial values ``N(0, d2)`` from the dedicated sub-stream of each replicate."""
    policy = SeedPolicy(master)
    return np.array([policy.generator(r, "Y0").standard_normal() for r in _as_indices(replicates)]) * spec.d


def _start_values(spec, theta, master, reps, y0):
    M = reps.size
    if spec.kind == "random_init":
        if y0 is None:
            return draw_y0(spec, master, reps)
        return np.broadcast_to(np.asarray(y0, float), (M,)).copy()
    if spec.kind == "joint":
        return np.full(M, float(theta[0]))
    return np.full(M, float(theta))


def euler_paths(spec, grid: TimeGrid, dW, dV, y0, *, theta=None, eps: float | None = None):
    """Euler-Maruyama ``(X, Y)`` driven by given Brownian increments (rows are replicates)."""
    theta = spec.theta if theta is None else theta
    if theta is None:
        raise ModelError("a true parameter value is required for simulation")
    eps = spec.eps if eps is None else float(eps)
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    dV = np.atleast_2d(np.asarray(dV, dtype=float))
    if dW.shape != dV.shape or dW.shape[-1] != grid.N:
        raise ModelError("increments do not match the grid")
    sys = spec.system(theta)
    t, dt = grid.t, grid.dt
    a = np.asarray(sys.a(t), dtype=float) + np.zeros(grid.N + 1)
    if np.max(np.abs(a)) * dt >= 1.0:
        raise ModelError("step too large for the drift: need dt * sup|a| < 1")
    f, sig, b = sys.f(t), sys.sigma(t), sys.b(t)
    start = np.broadcast_to(np.asarray(y0, dtype=float), dW.shape[:1])
    log_growth = np.concatenate([[0.0], np.cumsum(np.log1p(a[:-1] * dt))])
    Y = linear_recursion(log_growth, eps * b[:-1] * dV, start)
    dX = f[:-1] * Y[:, :-1] * dt + eps * sig[:-1] * dW
    X = np.zeros(Y.shape)
    np.cumsum(dX, axis=1, out=X[:, 1:])
    return X, Y


def coarsen(increments, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` increments (same Brownian path on a coarser grid)."""
    z = np.asarray(increments, dtype=float)
    n = z.shape[-1]
    if factor < 1 or n % factor:
        raise ModelError("coarsening factor must divide the number of steps")
    return z.reshape(z.shape[:-1] + (n // factor, factor)).sum(axis=-1)


def simulate(spec, grid: TimeGrid, master: int, replicates: Sequence[int] = (0,), *,
             theta=None, y0=None, eps: float | None = None) -> PathPair:
    """Euler-Maruyama paths for a batch of replicates of one model.

    ``theta`` defaults to the spec's true value. For the random-initial-value
    model ``y0`` is drawn per replicate unless given explicitly.
    """
    reps = _as_indices(replicates)
    M, N = reps.size, grid.N
    theta = spec.theta if theta is None else theta
    if theta is None:
        raise ModelError("a true parameter value is required for simulation")
    policy = SeedPolicy(master)
    sq = np.sqrt(grid.dt)
    dW = np.empty((M, N))
    dV = np.empty((M, N))
    for i, r in enumerate(reps):
        dW[i] = policy.generator(r, "W").standard_normal(N) * sq
        dV[i] = policy.generator(r, "V").standard_normal(N) * sq
    start = _start_values(spec, theta, master, reps, y0)
    X, Y = euler_paths(spec, grid, dW, dV, start, theta=theta, eps=eps)
    return PathPair(grid, X, Y, dW, dV, int(master), reps, start)


def ito_sum(h, increments) -> np.ndarray:
    """Left-endpoint sum ``sum_k h(t_k) dZ_k``.

    ``h`` may carry one value per node (N+1) or per step (N); ``increments`` has N.
    """
    h = np.asarray(h, dtype=float)
    dz = np.asarray(increments, dtype=float)
    n = dz.shape[-1]
    if h.shape[-1] == n + 1:
        h = h[..., :-1]
    elif h.shape[-1] != n:
        raise ModelError(f"integrand length {h.shape[-1]} does not match {n} increments")
    return np.sum(h * dz, axis=-1)


@dataclass(frozen=True, eq=False)
class OracleTrace:
    mean: np.ndarray
    var: np.ndarray


def oracle_discrete_kalman(spec, X, grid: TimeGrid, theta=None, *, prior_mean=None,
                           prior_var=None) -> OracleTrace:
    """Exact Gaussian conditioning for the Euler-discretized state-space model.

    State ``Y_{k+1} = (1 + a_k dt) Y_k + eps b_k dV_k``, observation
    ``dX_k = f_k Y_k dt + eps sigma_k dW_k``. Returns ``E[Y_k | dX_0..dX_{k-1}]``
    and its variance at every node.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[-1] != grid.N + 1:
        raise ModelError("path does not match the grid")
    theta = spec.theta if theta is None else theta
    sys = spec.system(theta)
    t, dt, eps = grid.t, grid.dt, spec.eps
    a = np.broadcast_to(np.asarray(sys.a(t), float), (grid.N + 1,))
    f, sig, b = sys.f(t), sys.sigma(t), sys.b(t)
    if prior_mean is None:
        prior_mean = sys.init_mean
    if prior_var is None:
        prior_var = sys.init_var
    dX = np.diff(X, axis=-1)
    M = X.shape[0]
    mean = np.empty((M, grid.N + 1))
    var = np.empty(grid.N + 1)
    mu = np.broadcast_to(np.asarray(prior_mean, float), (M,)).astype(float)
    P = float(prior_var)
    mean[:, 0], var[0] = mu, P
    for k in range(grid.N):
        h = f[k] * dt
        r = (eps * sig[k]) ** 2 * dt
        s = h * h * P + r
        if not s > 0:
            raise ModelError("non-positive innovation variance")
        gain = P * h / s
        mu = mu + gain * (dX[:, k] - h * mu)
        P = P * r / s
        phi = 1.0 + a[k] * dt
        mu = phi * mu
        P = phi * phi * P + (eps * b[k]) ** 2 * dt
        if P < 0:
            raise ModelError("negative conditional variance")
        mean[:, k + 1], var[k + 1] = mu, P
    return OracleTrace(mean, var)
