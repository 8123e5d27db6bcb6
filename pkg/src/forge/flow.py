"""Neural ODE with piecewise-constant tanh fields.

The velocity on each constant-control interval is

    v(x) = sum_i a_i * tanh(w_i . x + b_i),   a_i, w_i in R^N, b_i in R.

Flow maps are integrated with classical RK4 at a fixed step that never
crosses an interval boundary, and fitted to a target map by seeded
least squares.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import least_squares


class FlowBlowUp(FloatingPointError):
    def __init__(self, t: float):
        super().__init__(f"flow state became non-finite at t={t:.6g}")
        self.t = t


@dataclass(frozen=True, eq=False)
class PiecewiseConstantField:
    """Controls ``a, w`` of shape (intervals, M, N) and ``b`` of shape (intervals, M).

    ``breaks`` holds the interval endpoints ``0 = t_0 < ... < t_I = tau``.
    """

    a: np.ndarray
    w: np.ndarray
    b: np.ndarray
    breaks: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        w = np.array(self.w, dtype=float)
        b = np.array(self.b, dtype=float)
        breaks = np.array(self.breaks, dtype=float)
        if a.ndim != 3 or a.shape != w.shape or b.shape != a.shape[:2]:
            raise ValueError(f"control shapes disagree: a {a.shape}, w {w.shape}, b {b.shape}")
        if breaks.shape != (a.shape[0] + 1,) or breaks[0] != 0.0 or np.any(np.diff(breaks) <= 0):
            raise ValueError("breaks must increase from 0 and bound every interval")
        for arr in (a, w, b):
            if not np.all(np.isfinite(arr)):
                raise ValueError("field coefficients must be finite")
            arr.setflags(write=False)
        breaks.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "breaks", breaks)

    @classmethod
    def uniform(cls, a, w, b, tau: float = 1.0) -> "PiecewiseConstantField":
        n_int = np.shape(a)[0]
        return cls(a, w, b, np.linspace(0.0, tau, n_int + 1))

    @classmethod
    def zero(cls, dim: int, terms: int = 1, intervals: int = 1, tau: float = 1.0):
        shape = (intervals, terms, dim)
        return cls.uniform(np.zeros(shape), np.zeros(shape), np.zeros(shape[:2]), tau)

    @property
    def dim(self) -> int:
        return self.a.shape[2]

    @property
    def terms(self) -> int:
        return self.a.shape[1]

    @property
    def n_intervals(self) -> int:
        return self.a.shape[0]

    @property
    def tau(self) -> float:
        return float(self.breaks[-1])

    def interval_at(self, t: float) -> int:
        """Index of the right-open interval containing ``t`` (the last one is closed)."""
        k = int(np.searchsorted(self.breaks, t, side="right")) - 1
        return min(max(k, 0), self.n_intervals - 1)

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        k = self.interval_at(t)
        return _velocity(x, self.a[k], self.w[k], self.b[k])

    def __eq__(self, other):
        if not isinstance(other, PiecewiseConstantField):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("a", "w", "b", "breaks")
        )

    __hash__ = None


def _velocity(x, a, w, b):
    return np.tanh(x @ w.T + b) @ a


@dataclass(frozen=True)
class FlowResult:
    z: np.ndarray
    steps: int
    local_error: float


def _rk4_interval(x, a, w, b, h, steps):
    for _ in range(steps):
        k1 = _velocity(x, a, w, b)
        k2 = _velocity(x + 0.5 * h * k1, a, w, b)
        k3 = _velocity(x + 0.5 * h * k2, a, w, b)
        k4 = _velocity(x + h * k3, a, w, b)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def flow_map(
    field: PiecewiseConstantField,
    x0,
    steps_per_interval: int = 16,
    t0: float = 0.0,
    t1: float | None = None,
) -> np.ndarray:
    """Integrate from ``t0`` to ``t1`` (default ``tau``); ``t1 < t0`` runs backwards.

    Each constant interval is covered with ``steps_per_interval`` equal
    steps; a partially covered interval uses proportionally many.
    """
    if steps_per_interval < 1:
        raise ValueError("steps_per_interval must be >= 1")
    t1 = field.tau if t1 is None else t1
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x).copy()
    if x.shape[1] != field.dim:
        raise ValueError(f"state has dimension {x.shape[1]}, field has {field.dim}")
    sign = 1.0 if t1 >= t0 else -1.0
    lo, hi = min(t0, t1), max(t0, t1)
    order = range(field.n_intervals) if sign > 0 else reversed(range(field.n_intervals))
    for k in order:
        s0, s1 = max(field.breaks[k], lo), min(field.breaks[k + 1], hi)
        if s1 <= s0:
            continue
        full = field.breaks[k + 1] - field.breaks[k]
        steps = max(1, int(math.ceil(steps_per_interval * (s1 - s0) / full - 1e-9)))
        h = sign * (s1 - s0) / steps
        # overflow surfaces as FlowBlowUp below
        with np.errstate(over="ignore", invalid="ignore"):
            x = _rk4_interval(x, field.a[k], field.w[k], field.b[k], h, steps)
        if not np.all(np.isfinite(x)):
            raise FlowBlowUp(s1 if sign > 0 else s0)
    return x[0] if single else x


def integrate(
    field: PiecewiseConstantField, x0, steps_per_interval: int = 16, estimate_error: bool = True
) -> FlowResult:
    """Terminal state of the flow started at ``x0``.

    The local error estimate compares against a run at twice the step
    (Richardson factor 1/15 for a fourth-order method).
    """
    z = flow_map(field, x0, steps_per_interval)
    err = 0.0
    if estimate_error:
        coarse = flow_map(field, x0, max(1, steps_per_interval // 2))
        err = float(np.max(np.abs(z - coarse))) / 15.0
    return FlowResult(z=z, steps=steps_per_interval * field.n_intervals, local_error=err)


def inverse_flow(field: PiecewiseConstantField, y, steps_per_interval: int = 16) -> np.ndarray:
    """Integrate the time-reversed field from ``tau`` back to 0."""
    return flow_map(field, y, steps_per_interval, t0=field.tau, t1=0.0)


# --- fitting ----------------------------------------------------------------


class BudgetExhausted(RuntimeError):
    """Optimizer budget ran out; carries the best result found."""

    def __init__(self, message: str, best=None, error: float = math.inf):
        super().__init__(message)
        self.best = best
        self.error = error


def _pack(field: PiecewiseConstantField) -> np.ndarray:
    return np.concatenate([field.a.ravel(), field.w.ravel(), field.b.ravel()])


def _unpack(theta: np.ndarray, shape, breaks) -> PiecewiseConstantField:
    n_int, m, n = shape
    k = n_int * m * n
    return PiecewiseConstantField(
        theta[:k].reshape(shape), theta[k : 2 * k].reshape(shape), theta[2 * k :].reshape(n_int, m), breaks
    )


@dataclass(frozen=True)
class FlowFit:
    field: PiecewiseConstantField
    sup_error: float
    rms_error: float
    evaluations: int
    converged: bool


def fit_flow(
    target: Callable[[np.ndarray], np.ndarray],
    points: np.ndarray,
    terms: int = 8,
    intervals: int = 4,
    seed: int = 0,
    budget: int = 200,
    steps_per_interval: int = 8,
    tau: float = 1.0,
    init_scale: float = 1.0,
    weights: np.ndarray | None = None,
) -> FlowFit:
    """Fit controls so the time-``tau`` flow map matches ``target`` on ``points``.

    ``points`` are the sample states (e.g. a box grid or the lifted image of
    a domain).  Controls start at ``a = 0`` (identity flow) with seeded
    Gaussian ``w, b``; least squares with a forward-difference Jacobian then
    runs for at most ``budget`` iterations.  The achieved sup error on
    ``points`` is reported, not guaranteed.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    goal = np.atleast_2d(np.asarray(target(points), dtype=float))
    if goal.shape != points.shape:
        raise ValueError("target must map the sample points into the same dimension")
    n = points.shape[1]
    rng = np.random.default_rng(seed)
    shape = (intervals, terms, n)
    breaks = np.linspace(0.0, tau, intervals + 1)
    theta0 = np.concatenate(
        [
            np.zeros(intervals * terms * n),
            init_scale * rng.standard_normal(intervals * terms * n),
            init_scale * rng.standard_normal(intervals * terms),
        ]
    )
    wts = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    def residual(theta):
        f = _unpack(theta, shape, breaks)
        return ((_flow_fast(f, points, steps_per_interval) - goal) * wts).ravel()

    r0 = residual(theta0)
    if np.max(np.abs(r0)) == 0.0:
        f = _unpack(theta0, shape, breaks)
        return FlowFit(f, 0.0, 0.0, 1, True)
    sol = least_squares(
        residual, theta0, jac="2-point", method="trf", x_scale="jac", max_nfev=budget
    )
    field = _unpack(sol.x, shape, breaks)
    diff = flow_map(field, points, steps_per_interval) - goal
    return FlowFit(
        field=field,
        sup_error=float(np.max(np.abs(diff))),
        rms_error=float(np.sqrt(np.mean(diff**2))),
        evaluations=int(sol.nfev),
        converged=sol.status > 0,
    )


def _flow_fast(field, points, steps_per_interval):
    x = points
    for k in range(field.n_intervals):
        h = (field.breaks[k + 1] - field.breaks[k]) / steps_per_interval
        x = _rk4_interval(x, field.a[k], field.w[k], field.b[k], h, steps_per_interval)
    return np.where(np.isfinite(x), x, 1e6)


# --- persistence ------------------------------------------------------------


def field_to_dict(field: PiecewiseConstantField) -> dict:
    intervals = []
    for k in range(field.n_intervals):
        terms = []
        for i in range(field.terms):
            a, w, b = field.a[k, i], field.w[k, i], float(field.b[k, i])
            terms.append(
                {
                    "a": a.tolist(),
                    "w": w.tolist(),
                    "b": b,
                    "a_hex": [float(v).hex() for v in a],
                    "w_hex": [float(v).hex() for v in w],
                    "b_hex": b.hex(),
                }
            )
        t0, t1 = float(field.breaks[k]), float(field.breaks[k + 1])
        intervals.append({"t0": t0, "t1": t1, "t0_hex": t0.hex(), "t1_hex": t1.hex(), "terms": terms})
    return {"N": field.dim, "tau": field.tau, "tau_hex": field.tau.hex(), "intervals": intervals}


def field_from_dict(doc: dict) -> PiecewiseConstantField:
    def num(obj, key):
        return float.fromhex(obj[key + "_hex"]) if key + "_hex" in obj else float(obj[key])

    def vec(obj, key):
        if key + "_hex" in obj:
            return [float.fromhex(v) for v in obj[key + "_hex"]]
        return [float(v) for v in obj[key]]

    try:
        ivs = doc["intervals"]
        a = np.array([[vec(t, "a") for t in iv["terms"]] for iv in ivs], dtype=float)
        w = np.array([[vec(t, "w") for t in iv["terms"]] for iv in ivs], dtype=float)
        b = np.array([[num(t, "b") for t in iv["terms"]] for iv in ivs], dtype=float)
        breaks = [num(ivs[0], "t0")] + [num(iv, "t1") for iv in ivs]
        for k in range(1, len(ivs)):
            if num(ivs[k], "t0") != breaks[k]:
                raise ValueError("intervals do not tile [0, tau]")
        if a.ndim != 3 or a.shape[2] != int(doc["N"]):
            raise ValueError("term vectors do not match N")
        return PiecewiseConstantField(a, w, b, breaks)
    except (KeyError, TypeError, IndexError) as exc:
        raise ValueError(f"field document violates schema: {exc}") from exc


def serialize_field(field: PiecewiseConstantField) -> str:
    return json.dumps(field_to_dict(field), indent=1)


def deserialize_field(text: str) -> PiecewiseConstantField:
    return field_from_dict(json.loads(text))
