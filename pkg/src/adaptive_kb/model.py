"""Model specifications, coefficient functions and the noiseless limit system.

Three observation models share the structure

    dX = f(t) Y dt + eps sigma(t) dW,      X_0 = 0,
    dY = a(t) Y dt + eps b(t) dV,

and differ in what is unknown:

* ``DetInitModel``: the deterministic initial value ``Y_0 = theta``.
* ``JointModel``: ``theta = (theta1, theta2)`` with ``Y_0 = theta1`` and a drift
  ``a(theta2, t)`` depending on ``theta2``.
* ``RandomInitModel``: constant coefficients, drift ``a = theta`` and a random
  hidden start ``Y_0 ~ N(0, d2)``.

Everything here is immutable; operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

CLAMP_MARGIN = 1e-9


class ModelError(ValueError):
    """Structurally malformed input (bad table, wrong shapes, bad grid)."""


# ---------------------------------------------------------------------------
# Time grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / N`` on ``[0, T]``."""

    T: float
    N: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ModelError(f"horizon must be positive, got T={self.T}")
        if int(self.N) != self.N or self.N < 2:
            raise ModelError(f"need at least 2 steps, got N={self.N}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.dt

    def index(self, t: float, *, rounding: str = "nearest") -> int:
        """Node index of time ``t``.

        ``rounding="nearest"`` requires ``t`` to sit on a node (to 1e-9 of a step);
        ``"up"`` returns the first node at or after ``t``.
        """
        if t < -1e-12 * self.T or t > self.T * (1 + 1e-12):
            raise ModelError(f"time {t} outside [0, {self.T}]")
        x = t / self.dt
        if rounding == "up":
            k = int(np.ceil(x - 1e-9))
        else:
            k = int(round(x))
            if abs(x - k) > 1e-6:
                raise ModelError(f"time {t} is not a grid node (dt={self.dt})")
        return min(max(k, 0), self.N)

    def same_as(self, other: "TimeGrid") -> bool:
        return self.N == other.N and abs(self.T - other.T) <= 1e-12 * self.T


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Coefficient:
    """A scalar time function with its derivative.

    ``kind`` is one of ``"const"``, ``"table"`` (linear interpolation),
    ``"poly"`` (``sum c_i t^i``) or ``"exp"`` (``scale * exp(rate * t)``).
    """

    kind: str
    params: tuple

    @classmethod
    def constant(cls, value: float) -> "Coefficient":
        value = float(value)
        if not np.isfinite(value):
            raise ModelError("constant coefficient must be finite")
        return cls("const", (value,))

    @classmethod
    def table(cls, times: Sequence[float], values: Sequence[float]) -> "Coefficient":
        t = np.asarray(times, dtype=float)
        v = np.asarray(values, dtype=float)
        if t.ndim != 1 or v.ndim != 1 or t.size != v.size:
            raise ModelError("coefficient table needs equal-length 1-D times and values")
        if t.size < 2:
            raise ModelError("coefficient table needs at least two points")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ModelError("coefficient table contains non-finite entries")
        if np.any(np.diff(t) <= 0):
            raise ModelError("coefficient table times must be strictly increasing")
        t.setflags(write=False)
        v.setflags(write=False)
        return cls("table", (t, v))

    @classmethod
    def poly(cls, coeffs: Sequence[float]) -> "Coefficient":
        c = tuple(float(x) for x in coeffs)
        if not c or not all(np.isfinite(c)):
            raise ModelError("polynomial coefficient needs finite coefficients")
        return cls("poly", c)

    @classmethod
    def exponential(cls, scale: float, rate: float) -> "Coefficient":
        if not (np.isfinite(scale) and np.isfinite(rate)):
            raise ModelError("exponential coefficient needs finite scale and rate")
        return cls("exp", (float(scale), float(rate)))

    @classmethod
    def parse(cls, obj) -> "Coefficient":
        """Build from a number or a one-key mapping (config representation)."""
        if isinstance(obj, Coefficient):
            return obj
        if isinstance(obj, (int, float)) and not isinstance(obj, bool):
            return cls.constant(obj)
        if isinstance(obj, dict) and len(obj) == 1:
            (key, val), = obj.items()
            if key == "const":
                return cls.constant(val)
            if key == "poly":
                return cls.poly(val)
            if key == "exp":
                return cls.exponential(val["scale"], val["rate"])
            if key == "table":
                return cls.table(val["t"], val["v"])
        raise ModelError(f"cannot interpret coefficient {obj!r}")

    def to_config(self):
        if self.kind == "const":
            return self.params[0]
        if self.kind == "poly":
            return {"poly": list(self.params)}
        if self.kind == "exp":
            return {"exp": {"scale": self.params[0], "rate": self.params[1]}}
        return {"table": {"t": self.params[0].tolist(), "v": self.params[1].tolist()}}

    @property
    def is_constant(self) -> bool:
        if self.kind == "const":
            return True
        if self.kind == "poly":
            return all(c == 0.0 for c in self.params[1:])
        if self.kind == "exp":
            return self.params[1] == 0.0 or self.params[0] == 0.0
        return bool(np.all(self.params[1] == self.params[1][0]))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "const":
            return np.full_like(t, self.params[0])
        if self.kind == "table":
            return np.interp(t, self.params[0], self.params[1])
        if self.kind == "poly":
            return np.polynomial.polynomial.polyval(t, self.params) + 0.0 * t
        scale, rate = self.params
        return scale * np.exp(rate * t)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "const":
            return np.zeros_like(t)
        if self.kind == "table":
            tt, vv = self.params
            slopes = np.diff(vv) / np.diff(tt)
            k = np.clip(np.searchsorted(tt, t, side="right") - 1, 0, slopes.size - 1)
            out = slopes[k]
            return np.where((t < tt[0]) | (t > tt[-1]), 0.0, out)
        if self.kind == "poly":
            d = np.polynomial.polynomial.polyder(self.params) if len(self.params) > 1 else [0.0]
            return np.polynomial.polynomial.polyval(t, d) + 0.0 * t
        scale, rate = self.params
        return scale * rate * np.exp(rate * t)

    def scalar(self) -> float:
        """Value of a constant coefficient."""
        if not self.is_constant:
            raise ModelError("coefficient is not constant")
        return float(self(0.0))


def _coef(x) -> Coefficient:
    return x if isinstance(x, Coefficient) else Coefficient.parse(x)


@dataclass(frozen=True, eq=False)
class ParametricDrift:
    """Drift ``a(theta, t) = sum_i theta**i * c_i(t)``, polynomial in the parameter."""

    terms: tuple

    def __post_init__(self):
        terms = tuple(_coef(c) for c in self.terms)
        if not terms:
            raise ModelError("drift needs at least one term")
        object.__setattr__(self, "terms", terms)

    @staticmethod
    def _broadcast(theta, t):
        theta = np.asarray(theta, dtype=float)
        t = np.asarray(t, dtype=float)
        if theta.ndim > 0 and t.ndim > 0:
            theta = theta[..., None]
        return theta, t

    def value(self, theta, t):
        theta, t = self._broadcast(theta, t)
        out = np.zeros(np.broadcast_shapes(theta.shape, t.shape))
        for i, c in enumerate(self.terms):
            out = out + theta**i * c(t)
        return out

    def d1(self, theta, t):
        theta, t = self._broadcast(theta, t)
        out = np.zeros(np.broadcast_shapes(theta.shape, t.shape))
        for i, c in enumerate(self.terms[1:], start=1):
            out = out + i * theta ** (i - 1) * c(t)
        return out

    def d2(self, theta, t):
        theta, t = self._broadcast(theta, t)
        out = np.zeros(np.broadcast_shapes(theta.shape, t.shape))
        for i, c in enumerate(self.terms[2:], start=2):
            out = out + i * (i - 1) * theta ** (i - 2) * c(t)
        return out

    @property
    def depends_on_theta(self) -> bool:
        return any(not (c.is_constant and c.scalar() == 0.0) for c in self.terms[1:])


# ---------------------------------------------------------------------------
# Linear system view used by simulation and filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Coefficients of one fully specified system.

    ``a`` may depend on a batch of parameters, in which case ``a(t)`` returns an
    array of shape ``batch + t.shape``; ``da`` is its parameter derivative.
    """

    f: Callable
    sigma: Callable
    a: Callable
    b: Callable
    eps: float
    da: Callable | None = None
    init_mean: object = 0.0
    init_var: float = 0.0


def _zero_da(t):
    return np.zeros_like(np.asarray(t, dtype=float))


# ---------------------------------------------------------------------------
# Model specifications
# ---------------------------------------------------------------------------


def _check_interval(lo, hi, name):
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ModelError(f"{name} must be a finite interval with lower < upper")


@dataclass(frozen=True, eq=False)
class DetInitModel:
    """Unknown deterministic initial value ``Y_0 = theta``."""

    f: Coefficient
    sigma: Coefficient
    a: Coefficient
    b: Coefficient
    eps: float
    bounds: tuple[float, float]
    theta: float | None = None
    floors: dict = field(default_factory=dict)

    kind = "det_init"

    def __post_init__(self):
        for name in ("f", "sigma", "a", "b"):
            object.__setattr__(self, name, _coef(getattr(self, name)))
        lo, hi = (float(x) for x in self.bounds)
        _check_interval(lo, hi, "theta_bounds")
        object.__setattr__(self, "bounds", (lo, hi))

    def system(self, theta=None) -> LinearSystem:
        theta = self.theta if theta is None else theta
        return LinearSystem(self.f, self.sigma, self.a, self.b, self.eps, _zero_da,
                            init_mean=0.0 if theta is None else theta)

    def clamp(self, theta):
        return clamp(theta, self.bounds)


@dataclass(frozen=True, eq=False)
class JointModel:
    """Unknown ``(theta1, theta2)``: initial value and drift parameter."""

    f: Coefficient
    sigma: Coefficient
    b: Coefficient
    drift: ParametricDrift
    eps: float
    bounds: tuple
    theta: tuple | None = None
    floors: dict = field(default_factory=dict)

    kind = "joint"

    def __post_init__(self):
        for name in ("f", "sigma", "b"):
            object.__setattr__(self, name, _coef(getattr(self, name)))
        if not isinstance(self.drift, ParametricDrift):
            object.__setattr__(self, "drift", ParametricDrift(tuple(self.drift)))
        try:
            (a1, b1), (a2, b2) = self.bounds
        except (TypeError, ValueError) as exc:
            raise ModelError("joint model bounds must be ((lo1, hi1), (lo2, hi2))") from exc
        _check_interval(a1, b1, "theta1 bounds")
        _check_interval(a2, b2, "theta2 bounds")
        object.__setattr__(self, "bounds", ((float(a1), float(b1)), (float(a2), float(b2))))
        if self.theta is not None:
            object.__setattr__(self, "theta", tuple(float(x) for x in self.theta))

    def system(self, theta=None) -> LinearSystem:
        theta = self.theta if theta is None else theta
        th1, th2 = theta
        th2 = np.asarray(th2, dtype=float)
        drift = self.drift
        return LinearSystem(
            self.f, self.sigma,
            lambda t: drift.value(th2, t),
            self.b, self.eps,
            lambda t: drift.d1(th2, t),
            init_mean=th1,
        )

    def clamp(self, theta1, theta2):
        return clamp(theta1, self.bounds[0]), clamp(theta2, self.bounds[1])


@dataclass(frozen=True, eq=False)
class RandomInitModel:
    """Constant coefficients, drift ``theta`` and random ``Y_0 ~ N(0, d2)``."""

    f: float
    sigma: float
    b: float
    d2: float
    eps: float
    bounds: tuple[float, float]
    theta: float | None = None
    floors: dict = field(default_factory=dict)

    kind = "random_init"

    def __post_init__(self):
        for name in ("f", "sigma", "b", "d2"):
            v = getattr(self, name)
            if isinstance(v, Coefficient):
                v = v.scalar()
            object.__setattr__(self, name, float(v))
        lo, hi = (float(x) for x in self.bounds)
        _check_interval(lo, hi, "theta_bounds")
        object.__setattr__(self, "bounds", (lo, hi))

    @property
    def d(self) -> float:
        return float(np.sqrt(self.d2))

    def system(self, theta=None) -> LinearSystem:
        theta = self.theta if theta is None else theta
        drift = ParametricDrift((0.0, 1.0))
        th = np.asarray(theta, dtype=float)
        return LinearSystem(
            Coefficient.constant(self.f), Coefficient.constant(self.sigma),
            lambda t: drift.value(th, t),
            Coefficient.constant(self.b), self.eps,
            lambda t: drift.d1(th, t),
            init_mean=0.0, init_var=self.d2,
        )

    def clamp(self, theta):
        return clamp(theta, self.bounds)


ModelSpec = DetInitModel | JointModel | RandomInitModel


def clamp(x, bounds):
    """Clamp into ``[lo + 1e-9, hi - 1e-9]``; returns a float for scalar input."""
    lo, hi = bounds
    out = np.clip(x, lo + CLAMP_MARGIN, hi - CLAMP_MARGIN)
    return float(out) if np.ndim(out) == 0 else out


def with_eps(spec, eps: float):
    return replace(spec, eps=float(eps))


def with_theta(spec, theta):
    return replace(spec, theta=theta)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Validation:
    ok: bool
    violations: tuple[str, ...]
    floors: dict
    bounds: dict

    def raise_if_invalid(self):
        if not self.ok:
            raise ModelError("; ".join(self.violations))


SYMBOLS = {"sigma": "σ"}


def _scan(coef: Coefficient, T: float, n: int) -> np.ndarray:
    return np.asarray(coef(np.linspace(0.0, T, n)), dtype=float)


def _check_separated(name, coef, T, n, violations, floors, floor):
    vals = _scan(coef, T, n)
    m = float(np.min(np.abs(vals)))
    floors[name] = m
    if not m > floor or (np.any(vals > 0) and np.any(vals < 0)):
        violations.append(f"{SYMBOLS.get(name, name)} not separated from 0")


def _check_table_span(name, coef, T, violations):
    if isinstance(coef, Coefficient) and coef.kind == "table":
        tt = coef.params[0]
        if tt[0] > 0.0 or tt[-1] < T * (1 - 1e-12):
            violations.append(f"{name} table does not cover [0, T]")


def validate_model(spec, grid: TimeGrid, *, floor: float = 1e-8) -> Validation:
    """Check the regularity conditions on a refined (4x) scan of the grid.

    Returns a ``Validation`` listing every violated condition by name; the
    list is empty for an accepted spec. Malformed tables raise ``ModelError``
    at construction time instead.
    """
    n = 4 * grid.N + 1
    T = grid.T
    violations: list[str] = []
    floors: dict = {}
    bounds: dict = {}
    if not (np.isfinite(spec.eps) and 0.0 <= spec.eps <= 1.0):
        violations.append("eps must lie in [0, 1]")

    if spec.kind == "random_init":
        for name in ("f", "sigma", "b", "d2"):
            v = getattr(spec, name)
            floors[name] = abs(v)
            if not v > 0:
                violations.append(f"{name} > 0 required")
        if not spec.bounds[0] > 0:
            violations.append("alpha > 0 required")
    else:
        for name in ("f", "sigma", "b"):
            _check_table_span(name, getattr(spec, name), T, violations)
        _check_separated("f", spec.f, T, n, violations, floors, floor)
        _check_separated("sigma", spec.sigma, T, n, violations, floors, floor)
        for name in ("f", "sigma", "b"):
            vals = _scan(getattr(spec, name), T, n)
            if not np.all(np.isfinite(vals)):
                violations.append(f"{name} not bounded on [0, T]")
            else:
                bounds[name] = float(np.max(np.abs(vals)))

    if spec.kind == "det_init":
        _check_table_span("a", spec.a, T, violations)
        vals = _scan(spec.a, T, n)
        if not np.all(np.isfinite(vals)):
            violations.append("a not bounded on [0, T]")
        else:
            bounds["a"] = float(np.max(np.abs(vals)))

    if spec.kind == "joint":
        (a1, _), (a2, b2) = spec.bounds
        if not a1 > 0:
            violations.append("α₁ > 0 required")
        for c in spec.drift.terms:
            _check_table_span("drift", c, T, violations)
        th = np.linspace(a2, b2, 33)
        t = np.linspace(0.0, T, min(n, 4097))
        for name, fn in (("drift", spec.drift.value), ("drift derivative", spec.drift.d1),
                         ("drift second derivative", spec.drift.d2)):
            vals = fn(th, t)
            if not np.all(np.isfinite(vals)):
                violations.append(f"{name} not bounded on the parameter set")
            else:
                bounds[name] = float(np.max(np.abs(vals)))

    if spec.theta is not None:
        if spec.kind == "joint":
            for i, (x, (lo, hi)) in enumerate(zip(spec.theta, spec.bounds), start=1):
                if not lo < x < hi:
                    violations.append(f"true theta{i} outside parameter set")
        elif not spec.bounds[0] < spec.theta < spec.bounds[1]:
            violations.append("true theta outside parameter set")

    return Validation(not violations, tuple(violations), floors, bounds)


# ---------------------------------------------------------------------------
# Noiseless limit system
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LimitSystem:
    grid: TimeGrid
    x: np.ndarray
    y: np.ndarray


def limit_system(spec, grid: TimeGrid, theta0=None, y0: float | None = None) -> LimitSystem:
    """RK4 solution of ``y' = a y``, ``x' = f y`` with ``x(0) = 0``.

    The initial value is ``theta`` (det_init), ``theta1`` (joint) or ``y0``
    (random_init, default 1).
    """
    theta0 = spec.theta if theta0 is None else theta0
    if spec.kind == "random_init":
        start = 1.0 if y0 is None else float(y0)
        sys = spec.system(theta0)
    elif spec.kind == "joint":
        start = float(theta0[0])
        sys = spec.system(theta0)
    else:
        start = float(theta0)
        sys = spec.system(theta0)
    t, h = grid.t, grid.dt
    tm = grid.midpoints
    a0, am, f0, fm = sys.a(t), sys.a(tm), sys.f(t), sys.f(tm)
    y = np.empty(grid.N + 1)
    x = np.empty(grid.N + 1)
    y[0], x[0] = start, 0.0
    for k in range(grid.N):
        yk, xk = y[k], x[k]
        k1y, k1x = a0[k] * yk, f0[k] * yk
        y2 = yk + 0.5 * h * k1y
        k2y, k2x = am[k] * y2, fm[k] * y2
        y3 = yk + 0.5 * h * k2y
        k3y, k3x = am[k] * y3, fm[k] * y3
        y4 = yk + h * k3y
        k4y, k4x = a0[k + 1] * y4, f0[k + 1] * y4
        y[k + 1] = yk + h / 6 * (k1y + 2 * k2y + 2 * k3y + k4y)
        x[k + 1] = xk + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
    return LimitSystem(grid, x, y)
