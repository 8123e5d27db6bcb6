"""Lie-Trotter splitting of a tanh field and compilation into width-N blocks.

A split step changes exactly one coordinate,

    T(x) = x + dt * a_j * tanh(w . x + b) * e_j,

and the schedule composes the steps with ``j`` fastest, then the term
index ``i``, then the time index ``k``.

Compilation (``backend="chain"``) is exact up to a scalar approximation.
In the coordinates ``(u, x_{-j})`` with ``u = w . x + b`` the step acts
only on ``u``, through the increasing scalar map ``g(u) = u + kappa *
tanh(u)`` with ``kappa = dt * a_j * w_j``.  The other channels are
shifted into the positive orthant so the activation leaves them alone,
and ``g`` is replaced by a chain of leaky-ReLU kinks on the ``u``
channel.  Each kink multiplies the slope by ``alpha`` or ``1/alpha``, so
the chain is a monotone piecewise-linear map whose slopes lie on the
grid ``lam * alpha**k``.  A step with ``w_j = 0`` is a shear along its own
level sets and is built from pairs of folds instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .flow import PiecewiseConstantField, flow_map
from .nn_core import AffineMap, BoxDomain, NarrowNet, compose_many, eval_net, net_from_affines


class CompileError(RuntimeError):
    pass


class ToleranceUnreachable(CompileError):
    def __init__(self, message: str, best_error: float, best=None):
        super().__init__(f"{message} (best error {best_error:.3e})")
        self.best_error = best_error
        self.best = best


class BudgetExceeded(RuntimeError):
    def __init__(self, stage_errors: dict, end_to_end: float, total: float):
        parts = ", ".join(f"{k}={v:.4g}" for k, v in stage_errors.items())
        super().__init__(
            f"error budget exceeded: end-to-end {end_to_end:.4g} vs total {total:.4g} ({parts})"
        )
        self.stage_errors = dict(stage_errors)
        self.end_to_end = end_to_end
        self.total = total


# --- schedule -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SplitStep:
    """One coordinate update; ``k``, ``i``, ``j`` are 1-based labels."""

    k: int
    i: int
    j: int
    dt: float
    a: float
    w: np.ndarray
    b: float

    @property
    def coeff(self) -> float:
        return self.dt * self.a

    @property
    def is_identity(self) -> bool:
        return self.coeff == 0.0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.array(x, dtype=float, copy=True)
        y[..., self.j - 1] = x[..., self.j - 1] + self.coeff * np.tanh(x @ self.w + self.b)
        return y


@dataclass(frozen=True)
class SplitSchedule:
    steps: tuple
    n: int
    dim: int
    terms: int
    dt: float

    def __len__(self):
        return len(self.steps)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        for step in self.steps:
            x = step(x)
        return x


def make_schedule(field: PiecewiseConstantField, n: int) -> SplitSchedule:
    """Split ``field`` into ``n`` time steps, coefficients frozen at the left endpoint."""
    if n < 1:
        raise ValueError("n must be >= 1")
    dt = field.tau / n
    cuts = field.breaks / dt
    if not np.allclose(cuts, np.round(cuts), atol=1e-9):
        raise ValueError(f"n={n} does not align with the {field.n_intervals} control intervals")
    steps = []
    for k in range(1, n + 1):
        # interval containing the open step ((k-1)dt, k dt); immune to rounding at the cut
        q = field.interval_at((k - 0.5) * dt)
        for i in range(field.terms):
            for j in range(field.dim):
                steps.append(
                    SplitStep(k, i + 1, j + 1, dt, float(field.a[q, i, j]), field.w[q, i].copy(), float(field.b[q, i]))
                )
    return SplitSchedule(tuple(steps), n, field.dim, field.terms, dt)


# --- scalar kink chains -----------------------------------------------------


@dataclass(frozen=True)
class KinkChain:
    """Monotone PL map with slope ``lam * r**level``; each kink moves the level by ``+-1``.

    ``r = 1/alpha``.  ``t`` are the kink abscissae (sorted), ``e`` the
    level increments, ``lo`` the left end of the fitted interval where
    the map takes the value ``mu``.
    """

    t: np.ndarray
    e: np.ndarray
    lam: float
    mu: float
    r: float
    lo: float

    def _tables(self):
        pts = np.concatenate([[self.lo], self.t])
        levels = np.concatenate([[0.0], np.cumsum(self.e)])
        slopes = self.lam * self.r**levels
        vals = self.mu + np.concatenate([[0.0], np.cumsum(slopes[:-1] * np.diff(pts))])
        return pts, slopes, vals

    def __call__(self, u) -> np.ndarray:
        pts, slopes, vals = self._tables()
        u = np.asarray(u, dtype=float)
        idx = np.clip(np.searchsorted(pts, u, side="right") - 1, 0, len(pts) - 1)
        return vals[idx] + slopes[idx] * (u - pts[idx])


def _chain_from_params(t, e, lam, mu, r, lo):
    order = np.argsort(t, kind="stable")
    return KinkChain(np.asarray(t, float)[order], np.asarray(e, float)[order], float(lam), float(mu), r, lo)


def _dither_pattern(slope, lo, hi, lam, r, band, grid=4001):
    """Error-diffusion choice of slope levels; returns kink positions and increments."""
    u = np.linspace(lo, hi, grid)
    du = u[1] - u[0]
    mids = slope(u[:-1] + 0.5 * du)
    floors = np.floor(np.log(mids / lam) / math.log(r)).astype(int)
    level = int(round(math.log(float(slope(u[:1])[0]) / lam) / math.log(r)))
    err = 0.0
    t, e = [], []
    for n in range(grid - 1):
        s_mid = mids[n]
        fl = int(floors[n])
        cands = (fl, fl + 1)
        if err > band:
            want = fl
        elif err < -band:
            want = fl + 1
        else:
            want = level if level in cands else min(cands, key=lambda c: abs(c - level))
        while level != want:
            step = 1 if want > level else -1
            level += step
            t.append(u[n])
            e.append(step)
        err += (lam * r**level - s_mid) * du
    return np.array(t, float), np.array(e, float)


def fit_kink_chain(g, slope, lo, hi, alpha, tol, max_kinks=400, grid=2001):
    """Approximate increasing ``g`` on ``[lo, hi]`` by a :class:`KinkChain`.

    Returns the chain with the fewest kinks found whose sup error on a
    dense grid is below ``tol``; otherwise the most accurate attempt.
    """
    r = 1.0 / alpha if alpha < 1 else alpha
    uu = np.linspace(lo, hi, grid)
    gv = g(uu)
    lam0 = float(slope(np.array([lo]))[0])
    best = None
    band = 2.0 * tol
    # coarsen the band until the pattern fits under the kink cap
    for _ in range(16):
        t, e = _dither_pattern(slope, lo, hi, lam0, r, band)
        if len(t) <= max_kinks:
            break
        band *= 1.25
    for _ in range(12):
        if len(t) > max_kinks:
            break
        chain = _polish(_chain_from_params(t, e, lam0, float(gv[0]), r, lo), uu, gv)
        err = float(np.max(np.abs(chain(uu) - gv)))
        if best is None or err < best[1]:
            best = (chain, err)
        if err <= tol:
            break
        band *= 0.5
        t, e = _dither_pattern(slope, lo, hi, lam0, r, band)
    if best is None:
        chain = _chain_from_params(np.zeros(0), np.zeros(0), lam0, float(gv[0]), r, lo)
        best = (chain, float(np.max(np.abs(chain(uu) - gv))))
    return best


def _polish(chain: KinkChain, uu, gv) -> KinkChain:
    """Least-squares refinement of kink positions, scale and offset."""
    n = len(chain.t)
    e, r, lo = chain.e, chain.r, chain.lo

    def build(p):
        return _chain_from_params(p[:n], e, p[n], p[n + 1], r, lo)

    def res(p):
        return build(p)(uu) - gv

    def jac(p):
        c = build(p)
        levels = np.concatenate([[0.0], np.cumsum(c.e)])
        slopes = c.lam * r**levels
        J = np.empty((len(uu), n + 2))
        order = np.argsort(p[:n], kind="stable")
        for pos, k in enumerate(order):
            J[:, k] = (slopes[pos] - slopes[pos + 1]) * (uu > c.t[pos])
        J[:, n] = (c(uu) - c.mu) / c.lam
        J[:, n + 1] = 1.0
        return J

    p0 = np.concatenate([chain.t, [chain.lam, chain.mu]])
    sol = least_squares(res, p0, jac=jac, method="lm" if len(uu) > n + 2 else "trf", max_nfev=50)
    polished = build(sol.x)
    before = np.max(np.abs(chain(uu) - gv))
    after = np.max(np.abs(polished(uu) - gv))
    return polished if after < before else chain


def chain_layers(chain: KinkChain, alpha: float):
    """Per-kink affine parameters ``(sign, shift)`` realising ``chain`` on one channel.

    The channel value ``U`` passes through ``sign*(U - shift)``, the
    activation, and back through ``sign*h + shift``; the returned
    ``(scale, offset)`` maps the final ``U`` to ``chain(u)``.
    """
    # sign +1 gives right/left slope ratio 1/alpha, sign -1 gives alpha
    up = 1.0 if alpha < 1 else -1.0
    probe = np.concatenate([chain.t, [chain.lo]])  # current U at every kink and at lo
    layers = []
    left_slope = 1.0
    for k, ek in enumerate(chain.e):
        sign = up if ek > 0 else -up
        shift = float(probe[k])
        layers.append((sign, shift))
        probe = _kink(probe, sign, shift, alpha)
        if sign > 0:
            left_slope *= alpha
    scale = chain.lam / left_slope
    # no kink is active at lo, so matching there fixes the offset
    offset = chain.mu - scale * float(probe[-1])
    return layers, scale, offset


def _kink(U, sign, shift, alpha):
    s = sign * (U - shift)
    return sign * np.where(s > 0, s, alpha * s) + shift


# --- block compilation --------------------------------------------------------


@dataclass(frozen=True)
class CompiledBlock:
    net: NarrowNet
    error: float
    depth: int
    backend: str


def _box_samples(box: BoxDomain, w, b, rng, max_grid=4096, line=2001):
    n = box.dim
    per = max(2, int(max_grid ** (1.0 / n)))
    pts = [box.grid(per)]
    # segment between the corners minimising and maximising w.x covers the full u range
    c_lo = np.where(w >= 0, box.lo, box.hi)
    c_hi = np.where(w >= 0, box.hi, box.lo)
    s = np.linspace(0.0, 1.0, line)[:, None]
    pts.append(c_lo + s * (c_hi - c_lo))
    pts.append(box.lo + rng.random((512, n)) * (box.hi - box.lo))
    return np.vstack(pts)


def _u_range(box: BoxDomain, w, b):
    lo = b + float(np.sum(np.minimum(w * box.lo, w * box.hi)))
    hi = b + float(np.sum(np.maximum(w * box.lo, w * box.hi)))
    return lo, hi


def _identity_block(n, alpha):
    return net_from_affines([AffineMap.identity(n)], n, alpha)


def _chain_block(step: SplitStep, box: BoxDomain, alpha: float, tol: float, max_depth: int):
    n = len(step.w)
    j = step.j - 1
    w, b, c = np.asarray(step.w, float), step.b, step.coeff
    wj = w[j]
    kappa = c * wj
    if 1.0 + kappa <= 0.0:
        raise CompileError("step is not injective (1 + dt*a_j*w_j <= 0)")
    ulo, uhi = _u_range(box, w, b)
    pad = 1e-6 * max(1.0, uhi - ulo)
    ulo, uhi = ulo - pad, uhi + pad
    chain, _ = fit_kink_chain(
        lambda u: u + kappa * np.tanh(u),
        lambda u: 1.0 + kappa / np.cosh(u) ** 2,
        ulo,
        uhi,
        alpha,
        tol * abs(wj),
        max_kinks=max_depth,
    )
    layers, scale, offset = chain_layers(chain, alpha)
    # pass-through channels sit at least `margin` above zero on the box
    span = box.hi - box.lo
    K = -box.lo + 0.5 * span + 1.0
    K[j] = 0.0
    # entry: channel j <- u, others shifted
    W0 = np.eye(n)
    W0[j] = w
    b0 = K.copy()
    b0[j] = b
    affines = []
    pre = AffineMap(W0, b0)
    for sign, shift in layers:
        W = np.eye(n)
        W[j, j] = sign
        bb = np.zeros(n)
        bb[j] = -sign * shift
        step_in = AffineMap(W, bb)
        affines.append(pre.then(step_in))
        # back out of the kink coordinates after the activation
        pre = AffineMap(W, np.where(np.arange(n) == j, shift, 0.0))
    # exit: G = scale*U + offset; y_j = (G - b - sum_{l != j} w_l x_l)/w_j; x_l = z_l - K_l
    Wf = np.eye(n)
    bf = -K.copy()
    Wf[j] = -w / wj
    Wf[j, j] = scale / wj
    bf[j] = (offset - b + float(np.dot(np.delete(w, j), np.delete(K, j)))) / wj
    affines.append(pre.then(AffineMap(Wf, bf)))
    return net_from_affines(affines, n, alpha)


def _pl_knots(f, ulo, uhi, tol, max_layers):
    """Uniform knots whose interpolant of ``f`` is within ``tol``, using at most ``max_layers`` fold layers."""
    uu = np.linspace(ulo, uhi, 4001)
    knots = 2
    while True:
        xs = np.linspace(ulo, uhi, knots)
        err = np.max(np.abs(np.interp(uu, xs, f(xs)) - f(uu)))
        if err <= tol or 2 * (knots - 1) > max_layers:
            break
        knots += max(1, knots // 2)
    while 2 * (knots - 2) > max_layers and knots > 2:
        knots -= 1
    return np.linspace(ulo, uhi, knots)


def _shear_offsets(box: BoxDomain, c: float, j: int, m: int):
    span = box.hi - box.lo
    K = -box.lo + 0.5 * span + 1.0
    K[j] = -box.lo[j] + 0.5 * span[j] + 2.0 * abs(c) + 1.0
    K[m] = 0.0
    return K


def _fold_layers(pre: AffineMap, xs, ys, j, m, n, alpha, ulo, uhi):
    """Fold pairs adding the interpolant of ``(xs, ys)`` at channel ``m`` to channel ``j``.

    Returns the emitted affines, the pending affine (channel ``m`` back at
    ``u``) and the linear correction ``(slope, const)`` still owed to ``j``.
    """
    slopes = np.diff(ys) / np.diff(xs)
    ds = np.diff(slopes)
    affines = []
    lin = 0.0
    const = 0.0
    for tk, dsk in zip(xs[1:-1], ds):
        mu = dsk / (1.0 - alpha)
        extra = abs(mu) * (uhi - ulo) + 1.0
        # fold: channel m <- l = u - tk, channel j <- (x_j + K_j) - mu*l + extra
        W1 = np.eye(n)
        W1[j, m] = -mu
        b1 = np.zeros(n)
        b1[m] = -tk
        b1[j] = mu * tk + extra
        affines.append(pre.then(AffineMap(W1, b1)))
        # channel j <- z_j - extra + mu*sigma(l); channel m <- -sigma(l) for the unfold
        W2 = np.eye(n)
        W2[j, m] = mu
        W2[m, m] = -1.0
        b2 = np.zeros(n)
        b2[j] = -extra
        affines.append(AffineMap(W2, b2))
        # unfold: -sigma(-sigma(l))/alpha = l, then u = l + tk
        W3 = np.eye(n)
        W3[m, m] = -1.0 / alpha
        b3 = np.zeros(n)
        b3[m] = tk
        pre = AffineMap(W3, b3)
        # mu*(sigma(l) - l) = dsk*relu(l) - dsk*l
        lin += dsk
        const -= dsk * tk
    return affines, pre, (slopes[0] + lin, ys[0] - slopes[0] * xs[0] + const)


def _shear_block(step: SplitStep, box: BoxDomain, alpha: float, tol: float, max_depth: int):
    """``w_j == 0``: add a PL interpolant of ``c*tanh(u)`` to ``x_j`` with fold pairs.

    A fold on the channel holding ``l = u - t`` while channel ``j`` carries
    ``x_j - mu*l`` adds ``mu*(sigma(l) - l) = (1-alpha)*mu*relu(l) - ...``
    to ``x_j``; a second activation with the sign flipped unfolds ``l``.
    Two activation layers per interior knot.
    """
    n = len(step.w)
    j = step.j - 1
    w, b, c = np.asarray(step.w, float), step.b, step.coeff
    others = [l for l in range(n) if l != j]
    if not others or np.all(w[others] == 0.0):
        # u is constant: a pure translation of x_j
        A = AffineMap(np.eye(n), np.where(np.arange(n) == j, c * math.tanh(b), 0.0))
        return net_from_affines([A], n, alpha)
    m = max(others, key=lambda l: abs(w[l]))
    ulo, uhi = _u_range(box, w, b)
    f = lambda u: c * np.tanh(u)  # noqa: E731
    xs = _pl_knots(f, ulo, uhi, tol, max_depth)
    K = _shear_offsets(box, c, j, m)
    # inner coordinates: channel m holds u, every other channel x_l + K_l
    W0 = np.eye(n)
    W0[m] = w
    b0 = K.copy()
    b0[m] = b
    affines, pre, (slope, const) = _fold_layers(AffineMap(W0, b0), xs, f(xs), j, m, n, alpha, ulo, uhi)
    # exit: x_j = z_j - K_j + slope*u + const;
    # x_m = (u - b - sum_{l != m} w_l x_l)/w_m with x_l = z_l - K_l (w_j = 0 here)
    Wf = np.eye(n)
    bf = -K.copy()
    Wf[j, m] = slope
    bf[j] = -K[j] + const
    Wf[m] = 0.0
    Wf[m, m] = 1.0 / w[m]
    bf[m] = -b / w[m]
    for l in others:
        if l == m:
            continue
        Wf[m, l] = -w[l] / w[m]
        bf[m] += w[l] * K[l] / w[m]
    affines.append(pre.then(AffineMap(Wf, bf)))
    return net_from_affines(affines, n, alpha)


def _shear_chain_block(step: SplitStep, box: BoxDomain, alpha: float, tol: float, max_depth: int):
    """Small ``w_j``: fold ``c*tanh(u)`` into ``x_j``, then push ``u`` through a kink chain.

    Channel ``m`` (largest ``|w_m|``, ``m != j``) holds ``u``.  After the
    folds it is mapped to ``u + c*w_j*tanh(u)``, which equals ``w.x' + b``
    for the updated state, so ``x_m`` is recovered by dividing by ``w_m``
    rather than by the small ``w_j``.
    """
    n = len(step.w)
    j = step.j - 1
    w, b, c = np.asarray(step.w, float), step.b, step.coeff
    others = [l for l in range(n) if l != j]
    if not others or np.all(w[others] == 0.0):
        raise CompileError("shear_chain needs a nonzero off-coordinate weight")
    m = max(others, key=lambda l: abs(w[l]))
    kappa = c * w[j]
    if 1.0 + kappa <= 0.0:
        raise CompileError("step is not injective (1 + dt*a_j*w_j <= 0)")
    ulo, uhi = _u_range(box, w, b)
    pad = 1e-6 * max(1.0, uhi - ulo)
    ulo, uhi = ulo - pad, uhi + pad
    f = lambda u: c * np.tanh(u)  # noqa: E731
    xs = _pl_knots(f, ulo, uhi, 0.5 * tol, max_depth // 2)
    folds = 2 * (len(xs) - 2)
    chain, _ = fit_kink_chain(
        lambda u: u + kappa * np.tanh(u),
        lambda u: 1.0 + kappa / np.cosh(u) ** 2,
        ulo,
        uhi,
        alpha,
        0.5 * tol * abs(w[m]),
        max_kinks=max(1, max_depth - folds),
    )
    K = _shear_offsets(box, c, j, m)
    W0 = np.eye(n)
    W0[m] = w
    b0 = K.copy()
    b0[m] = b
    affines, pre, (slope, const) = _fold_layers(AffineMap(W0, b0), xs, f(xs), j, m, n, alpha, ulo, uhi)
    # settle the linear part now: channel j becomes x_j' + K_j before the chain
    L = np.eye(n)
    L[j, m] = slope
    pre = pre.then(AffineMap(L, np.where(np.arange(n) == j, const, 0.0)))
    layers, scale, offset = chain_layers(chain, alpha)
    for sign, shift in layers:
        W = np.eye(n)
        W[m, m] = sign
        bb = np.zeros(n)
        bb[m] = -sign * shift
        affines.append(pre.then(AffineMap(W, bb)))
        pre = AffineMap(W, np.where(np.arange(n) == m, shift, 0.0))
    # exit: G = scale*U + offset = w.x' + b, so x_m = (G - b - sum_{l != m} w_l x'_l)/w_m
    Wf = np.eye(n)
    bf = -K.copy()
    Wf[m] = -w / w[m]
    Wf[m, m] = scale / w[m]
    bf[m] = (offset - b + float(np.dot(np.delete(w, m), np.delete(K, m)))) / w[m]
    affines.append(pre.then(AffineMap(Wf, bf)))
    return net_from_affines(affines, n, alpha)


FIT_MAX_DEPTH = 16


def _fit_block(step: SplitStep, box, alpha, depth, seed, samples, goal, init: NarrowNet | None, budget=200):
    """Seeded least-squares fit of a width-N, ``depth``-layer block."""
    n = len(step.w)
    rng = np.random.default_rng(seed)
    if init is not None and init.depth == depth:
        affs = [(aff.W, aff.b) for aff, _ in init.layers]
    else:
        span = box.hi - box.lo
        K = -box.lo + 0.5 * span + 1.0
        affs = [(np.eye(n) + 0.01 * rng.standard_normal((n, n)), K)]
        affs += [(np.eye(n) + 0.01 * rng.standard_normal((n, n)), np.zeros(n)) for _ in range(depth - 1)]
        affs += [(np.eye(n), -K)]
    m = n * n + n
    theta0 = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in affs])
    L = len(affs)

    def forward(theta):
        h = samples
        for q in range(L):
            blk = theta[q * m : (q + 1) * m]
            h = h @ blk[: n * n].reshape(n, n).T + blk[n * n :]
            if q < L - 1:
                h = np.where(h > 0, h, alpha * h)
        return h

    def res(theta):
        return (forward(theta) - goal).ravel()

    sol = least_squares(res, theta0, method="trf", max_nfev=budget)
    out = [AffineMap(sol.x[q * m : q * m + n * n].reshape(n, n), sol.x[q * m + n * n : (q + 1) * m]) for q in range(L)]
    return net_from_affines(out, n, alpha)


def compile_step(
    step: SplitStep,
    box: BoxDomain,
    alpha: float = 0.99,
    tol: float = 1e-3,
    max_depth: int = 400,
    seed: int = 0,
    backend: str = "auto",
) -> CompiledBlock:
    """Compile one split step into a width-N leaky-ReLU block verified on ``box``.

    The constructive backends are tried first with progressively tighter
    internal targets: ``shear`` when ``w_j == 0``, ``shear_chain`` when
    ``|w_j|`` is below some other ``|w_l|``, and ``chain`` otherwise (or as
    the second choice).  A least-squares ``fit`` of a shallow block is the
    fallback.  Raises
    :class:`ToleranceUnreachable` (carrying the best block) when nothing
    reaches ``tol`` within ``max_depth`` activation layers.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if backend not in ("auto", "chain", "fit"):
        raise ValueError(f"unknown backend {backend!r}")
    n = len(step.w)
    if step.is_identity:
        return CompiledBlock(_identity_block(n, alpha), 0.0, 0, "identity")
    rng = np.random.default_rng(seed)
    samples = _box_samples(box, np.asarray(step.w, float), step.b, rng)
    goal = step(samples)

    def measure(net):
        return float(np.max(np.abs(eval_net(net, samples) - goal)))

    candidates = []
    if backend in ("auto", "chain"):
        w = np.abs(np.asarray(step.w, float))
        wj = w[step.j - 1]
        if wj == 0.0:
            builders = [(_shear_block, "shear")]
        elif wj < np.max(np.delete(w, step.j - 1), initial=0.0):
            # dividing by a small w_j amplifies chain error; recover via the largest weight instead
            builders = [(_shear_chain_block, "shear_chain"), (_chain_block, "chain")]
        else:
            builders = [(_chain_block, "chain")]
        for build, name in builders:
            for factor in (1.0, 0.5, 0.25):
                try:
                    net = build(step, box, alpha, factor * tol, max_depth)
                except CompileError:
                    break
                if net.depth > max_depth:
                    break
                candidates.append((measure(net), net, name))
                if candidates[-1][0] <= tol:
                    break
            if candidates and min(cd[0] for cd in candidates) <= tol:
                break
    best = min(candidates, key=lambda c: c[0]) if candidates else None
    if backend in ("auto", "fit") and (best is None or best[0] > tol):
        init = best[1] if best is not None and 1 <= best[1].depth <= FIT_MAX_DEPTH else None
        depth = init.depth if init is not None else min(max_depth, 4)
        if 1 <= depth <= min(max_depth, FIT_MAX_DEPTH):
            net = _fit_block(step, box, alpha, depth, seed, samples, goal, init)
            candidates.append((measure(net), net, "fit"))
    if not candidates:
        raise ToleranceUnreachable("no backend produced a block", math.inf)
    err, net, name = min(candidates, key=lambda c: c[0])
    block = CompiledBlock(net, err, net.depth, name)
    if err > tol:
        raise ToleranceUnreachable(f"step {step.k},{step.i},{step.j} misses tol {tol:g}", err, block)
    return block


# --- budget and assembly ------------------------------------------------------


@dataclass(frozen=True)
class ErrorBudget:
    total: float
    lift: float
    flow: float
    discretization: float

    def __post_init__(self):
        if self.total <= 0:
            raise ValueError("total budget must be positive")
        if self.lift + self.flow + self.discretization > self.total * (1 + 1e-12):
            raise ValueError("stage allocations exceed the total budget")


def plan_budget(eps: float, proportions: Sequence[float] = (1 / 3, 1 / 3, 1 / 3)) -> ErrorBudget:
    """Split ``eps`` over the lift, flow and discretization stages."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.asarray(proportions, dtype=float)
    if p.shape != (3,) or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("need three nonnegative proportions")
    p = p / p.sum()
    return ErrorBudget(eps, eps * p[0], eps * p[1], eps * p[2])


def check_budget(stage_errors: dict, budget: ErrorBudget, end_to_end: float | None = None) -> None:
    """Raise :class:`BudgetExceeded` if the measured errors do not fit ``budget.total``."""
    total = sum(stage_errors.values())
    e2e = total if end_to_end is None else end_to_end
    if total > budget.total or e2e > budget.total:
        raise BudgetExceeded(stage_errors, e2e, budget.total)


def assemble(
    alpha_map: AffineMap,
    blocks: Sequence[NarrowNet],
    beta_map: AffineMap,
    width: int,
    leaky_alpha: float,
) -> NarrowNet:
    """``beta o blocks[-1] o ... o blocks[0] o alpha`` as one width-``width`` net.

    Adjacent affine maps are merged, so the depth is the sum of block depths.
    """
    head = net_from_affines([alpha_map], width, leaky_alpha)
    tail = net_from_affines([beta_map], width, leaky_alpha)
    return compose_many([head, *blocks, tail], width)


def schedule_boxes(schedule: SplitSchedule, points: np.ndarray, inflate: float = 0.1) -> list[BoxDomain]:
    """Bounding box of the propagated samples at each step, inflated by ``inflate``."""
    boxes = []
    x = np.asarray(points, dtype=float)
    for step in schedule.steps:
        lo, hi = x.min(axis=0), x.max(axis=0)
        pad = inflate * (hi - lo) + 1e-3
        boxes.append(BoxDomain(lo - pad, hi + pad))
        x = step(x)
    return boxes


def splitting_error(schedule: SplitSchedule, field: PiecewiseConstantField, points, steps_per_interval=64):
    ref = flow_map(field, points, steps_per_interval)
    return float(np.max(np.abs(schedule(points) - ref)))
