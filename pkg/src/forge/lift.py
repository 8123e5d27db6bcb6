"""Lifts ``p = beta o Phi o alpha`` with ``Phi`` a map of one extra dimension.

Three backends are provided:

``paper_faithful``
    ``Phi(x, s) = (p(x) + kappa * 1 * s, s)``; exact but not always a
    diffeomorphism, so it must pass :func:`verify_diffeo`.
``verified_1d``
    ``Phi(z, s) = (p~(z) + kappa * z, s)`` with ``p~`` the clamped extension
    of ``p``; a monotone bijection whenever ``kappa > max |p'|``.
``coupling_fit``
    A fitted :class:`CouplingMap`, orientation preserving by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .flow import BudgetExhausted
from .nn_core import AffineMap, BoxDomain
from .poly_approx import PolySurrogate

__all__ = [
    "VerificationFailed",
    "VerificationRecord",
    "LiftTriple",
    "PaperPhi",
    "ClampedPhi",
    "CouplingMap",
    "IdentityPhi",
    "lift_alpha",
    "lifted_box",
    "build_lift_paper",
    "build_lift_1d",
    "build_lift_coupling",
    "verify_diffeo",
    "select_lift",
    "BACKENDS",
]

BACKENDS = ("paper_faithful", "verified_1d", "coupling_fit")
INJECTIVITY_PAIRS = 2000
MIN_SEPARATION = 1e-3


class VerificationFailed(RuntimeError):
    def __init__(self, message: str, record: "VerificationRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass
class VerificationRecord:
    accepted: bool
    min_det: float
    injective: bool
    reproduction_error: float = 0.0
    fit_error: float | None = None
    points: int = 0
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "min_det": self.min_det,
            "injective": self.injective,
            "reproduction_error": self.reproduction_error,
            "fit_error": self.fit_error,
            "points": self.points,
            "reason": self.reason,
        }


def _batch(Z):
    Z = np.asarray(Z, float)
    return np.atleast_2d(Z), Z.ndim == 1


class IdentityPhi:
    def __init__(self, n: int):
        self.dim = n

    def __call__(self, Z):
        return np.array(Z, float)

    def jacobian(self, Z):
        Z, single = _batch(Z)
        J = np.broadcast_to(np.eye(self.dim), (len(Z), self.dim, self.dim)).copy()
        return J[0] if single else J

    def inverse(self, Y):
        return np.array(Y, float)


class PaperPhi:
    """``(x, s) -> (p(x) + kappa * 1 * s, s)``."""

    def __init__(self, p: PolySurrogate, kappa: float):
        if p.d_y != p.d_x:
            raise ValueError("the lift needs d_x = d_y")
        self.p, self.kappa, self.dim = p, float(kappa), p.d_x + 1

    def __call__(self, Z):
        Z, single = _batch(Z)
        d = self.dim - 1
        out = np.empty_like(Z)
        out[:, :d] = self.p(Z[:, :d]) + self.kappa * Z[:, d:]
        out[:, d] = Z[:, d]
        return out[0] if single else out

    def jacobian(self, Z):
        Z, single = _batch(Z)
        d = self.dim - 1
        J = np.zeros((len(Z), self.dim, self.dim))
        J[:, :d, :d] = self.p.jacobian(Z[:, :d])
        J[:, :d, d] = self.kappa
        J[:, d, d] = 1.0
        return J[0] if single else J


class ClampedPhi:
    """``(z, s) -> (p(clip(z)) + kappa * z, s)`` for scalar ``p``."""

    def __init__(self, p: PolySurrogate, kappa: float):
        if p.d_x != 1 or p.d_y != 1:
            raise ValueError("ClampedPhi is one-dimensional")
        self.p, self.kappa, self.dim = p, float(kappa), 2
        self.lo, self.hi = float(p.box.lo[0]), float(p.box.hi[0])

    def _g(self, z):
        return self.p(np.clip(z, self.lo, self.hi)[:, None])[:, 0] + self.kappa * z

    def __call__(self, Z):
        Z, single = _batch(Z)
        out = np.column_stack([self._g(Z[:, 0]), Z[:, 1]])
        return out[0] if single else out

    def jacobian(self, Z):
        Z, single = _batch(Z)
        z = Z[:, 0]
        inside = (z >= self.lo) & (z <= self.hi)
        dp = self.p.jacobian(np.clip(z, self.lo, self.hi)[:, None])[:, 0, 0] * inside
        J = np.zeros((len(Z), 2, 2))
        J[:, 0, 0] = dp + self.kappa
        J[:, 1, 1] = 1.0
        return J[0] if single else J

    def inverse(self, Y):
        """Invert the monotone first component by bracketing bisection."""
        Y, single = _batch(Y)
        y = Y[:, 0]
        p_lo = self.p(np.array([[self.lo]]))[0, 0]
        p_hi = self.p(np.array([[self.hi]]))[0, 0]
        # outside [lo, hi] the map is affine with slope kappa
        z = np.where(
            y < p_lo + self.kappa * self.lo,
            (y - p_lo) / self.kappa,
            np.where(y > p_hi + self.kappa * self.hi, (y - p_hi) / self.kappa, np.nan),
        )
        mid = np.isnan(z)
        if np.any(mid):
            a = np.full(mid.sum(), self.lo)
            b = np.full(mid.sum(), self.hi)
            target = y[mid]
            for _ in range(80):
                c = 0.5 * (a + b)
                up = self._g(c) > target
                b = np.where(up, c, b)
                a = np.where(up, a, c)
            z[mid] = 0.5 * (a + b)
        out = np.column_stack([z, Y[:, 1]])
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class CouplingLayer:
    """Updates coordinate ``j`` as ``x_j * exp(s) + t`` with ``s``, ``t`` bounded in the others."""

    j: int
    U: np.ndarray  # (H, N), column j ignored
    c: np.ndarray  # (H,)
    vs: np.ndarray  # (H,)
    bs: float
    vt: np.ndarray  # (H,)
    bt: float
    smax: float = 2.0

    def _cond(self, X):
        U = self.U.copy()
        U[:, self.j] = 0.0
        h = np.tanh(X @ U.T + self.c)
        r = np.tanh(h @ self.vs + self.bs)
        s = self.smax * r
        t = h @ self.vt + self.bt
        return U, h, r, s, t

    def forward(self, X):
        _, _, _, s, t = self._cond(X)
        Y = X.copy()
        Y[:, self.j] = X[:, self.j] * np.exp(s) + t
        return Y, s

    def inverse(self, Y):
        _, _, _, s, t = self._cond(Y)
        X = Y.copy()
        X[:, self.j] = (Y[:, self.j] - t) * np.exp(-s)
        return X

    def jacobian(self, X):
        U, h, r, s, _ = self._cond(X)
        dh = (1.0 - h * h)[:, :, None] * U[None]  # (n, H, N)
        ds = self.smax * (1.0 - r * r)[:, None] * np.einsum("h,nhk->nk", self.vs, dh)
        dt = np.einsum("h,nhk->nk", self.vt, dh)
        n, N = X.shape
        J = np.broadcast_to(np.eye(N), (n, N, N)).copy()
        e = np.exp(s)
        J[:, self.j, :] = (X[:, self.j] * e)[:, None] * ds + dt
        J[:, self.j, self.j] = e
        return J


class CouplingMap:
    """Composition of :class:`CouplingLayer` objects (first layer applied first)."""

    def __init__(self, dim: int, layers=()):
        self.dim = dim
        self.layers = tuple(layers)

    def __call__(self, Z):
        Z, single = _batch(Z)
        for layer in self.layers:
            Z, _ = layer.forward(Z)
        return Z[0] if single else Z

    def log_det(self, Z):
        Z, single = _batch(Z)
        total = np.zeros(len(Z))
        for layer in self.layers:
            Z, s = layer.forward(Z)
            total += s
        return total[0] if single else total

    def jacobian(self, Z):
        Z, single = _batch(Z)
        J = np.broadcast_to(np.eye(self.dim), (len(Z), self.dim, self.dim)).copy()
        for layer in self.layers:
            J = layer.jacobian(Z) @ J
            Z, _ = layer.forward(Z)
        return J[0] if single else J

    def inverse(self, Y):
        Y, single = _batch(Y)
        for layer in reversed(self.layers):
            Y = layer.inverse(Y)
        return Y[0] if single else Y

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "layers": [
                {
                    "j": L.j,
                    "U": L.U.tolist(),
                    "c": L.c.tolist(),
                    "vs": L.vs.tolist(),
                    "bs": L.bs,
                    "vt": L.vt.tolist(),
                    "bt": L.bt,
                    "smax": L.smax,
                }
                for L in self.layers
            ],
        }


@dataclass(eq=False)
class LiftTriple:
    alpha_map: AffineMap
    phi: object
    beta_map: AffineMap
    backend: str
    record: VerificationRecord | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.alpha_map.out_dim

    def __call__(self, X):
        X = np.asarray(X, float)
        single = X.ndim == 1
        Y = self.beta_map(self.phi(self.alpha_map(np.atleast_2d(X))))
        return Y[0] if single else Y


def lift_alpha(d: int) -> AffineMap:
    """``x -> (x, 1^T x)``."""
    return AffineMap(np.vstack([np.eye(d), np.ones((1, d))]), np.zeros(d + 1))


def _beta_shear(d: int, kappa: float) -> AffineMap:
    return AffineMap(np.hstack([np.eye(d), -kappa * np.ones((d, 1))]), np.zeros(d))


def _beta_project(d: int) -> AffineMap:
    return AffineMap(np.hstack([np.eye(d), np.zeros((d, 1))]), np.zeros(d))


def lifted_box(alpha_map: AffineMap, box: BoxDomain) -> BoxDomain:
    """Bounding box of ``alpha(box)`` computed from the corners."""
    corners = np.array(np.meshgrid(*zip(box.lo, box.hi), indexing="ij")).reshape(box.dim, -1).T
    img = alpha_map(corners)
    return BoxDomain(img.min(axis=0), img.max(axis=0))


def _reproduction_error(triple: LiftTriple, p: PolySurrogate, per: int = 65) -> float:
    X = p.box.grid(per if p.d_x == 1 else max(9, int(4000 ** (1 / p.d_x))))
    return float(np.max(np.abs(triple(X) - p(X))))


def build_lift_paper(p: PolySurrogate, kappa: float) -> LiftTriple:
    """Explicit lift with ``Phi(x, s) = (p(x) + kappa * 1 * s, s)``; unverified."""
    d = p.d_x
    t = LiftTriple(lift_alpha(d), PaperPhi(p, kappa), _beta_shear(d, kappa), "paper_faithful")
    t.meta["kappa"] = float(kappa)
    t.meta["reproduction_error"] = _reproduction_error(t, p)
    return t


def build_lift_1d(p: PolySurrogate, kappa: float, samples: int = 2000, seed: int = 0) -> LiftTriple:
    """Monotone one-dimensional lift; raises :class:`VerificationFailed` if not accepted."""
    if p.d_x != 1 or p.d_y != 1:
        raise ValueError("build_lift_1d needs a scalar surrogate")
    X = p.box.grid(p.grid_per_dim)
    slope = float(np.max(np.abs(p.jacobian(X))))
    if kappa <= slope:
        raise VerificationFailed(f"kappa={kappa:g} does not exceed max |p'|={slope:g}")
    t = LiftTriple(lift_alpha(1), ClampedPhi(p, kappa), _beta_shear(1, kappa), "verified_1d")
    t.meta["kappa"] = float(kappa)
    rec = verify_diffeo(t.phi, lifted_box(t.alpha_map, p.box), samples, seed)
    rec.reproduction_error = _reproduction_error(t, p)
    t.record = rec
    if not rec.accepted:
        raise VerificationFailed(f"verified_1d lift rejected: {rec.reason}", rec)
    return t


def verify_diffeo(phi, box: BoxDomain, samples: int = 2000, seed: int = 0, inflate: float = 0.1) -> VerificationRecord:
    """Check ``det(grad Phi) > 0`` on a grid and injectivity on sampled pairs.

    ``box`` is the lifted domain; it is inflated by ``inflate`` on each side.
    """
    big = box.inflate(inflate)
    per = max(5, int(round(samples ** (1.0 / big.dim))))
    Z = big.grid(per)
    dets = np.linalg.det(phi.jacobian(Z))
    min_det = float(np.min(dets))
    rng = np.random.default_rng(seed)
    A = big.sample(rng, INJECTIVITY_PAIRS)
    B = big.sample(rng, INJECTIVITY_PAIRS)
    far = np.linalg.norm(A - B, axis=1) >= MIN_SEPARATION
    gaps = np.linalg.norm(phi(A[far]) - phi(B[far]), axis=1)
    injective = bool(np.all(gaps > 0))
    accepted = min_det > 0 and injective
    if min_det <= 0:
        reason = f"lift verification rejected (det<0): min det {min_det:.6g}" if min_det < 0 else "lift verification rejected (det=0)"
    elif not injective:
        reason = "lift verification rejected (collision in sampled pairs)"
    else:
        reason = "accepted"
    return VerificationRecord(accepted, min_det, injective, points=len(Z), reason=reason)


def _layer_sizes(n: int, hidden: int) -> int:
    return hidden * n + hidden + hidden + 1 + hidden + 1


def _layers_from_vector(theta, n_layers, n, hidden, smax):
    layers, k = [], 0
    for l in range(n_layers):
        U = theta[k : k + hidden * n].reshape(hidden, n)
        k += hidden * n
        c = theta[k : k + hidden]
        k += hidden
        vs = theta[k : k + hidden]
        k += hidden
        bs = float(theta[k])
        k += 1
        vt = theta[k : k + hidden]
        k += hidden
        bt = float(theta[k])
        k += 1
        layers.append(CouplingLayer(l % n, U, c, vs, bs, vt, bt, smax))
    return layers


def build_lift_coupling(
    p: PolySurrogate,
    layers: int,
    seed: int = 0,
    budget: int = 60,
    hidden: int = 8,
    smax: float = 2.0,
    tol: float | None = None,
    samples: int = 2000,
) -> LiftTriple:
    """Fit a :class:`CouplingMap` so that its first ``d`` outputs along ``alpha(K)`` match ``p``.

    Parameters
    ----------
    layers : int
        Number of coupling layers; layer ``l`` updates coordinate ``l mod (d+1)``.
    budget : int
        Maximum residual evaluations passed to the least-squares solver.
    tol : float, optional
        If given and the achieved grid sup error exceeds it,
        :class:`BudgetExhausted` is raised carrying the best triple.
    """
    d = p.d_x
    if p.d_y != d:
        raise ValueError("the lift needs d_x = d_y")
    n = d + 1
    alpha, beta = lift_alpha(d), _beta_project(d)
    X = p.box.grid(max(5, int(round(400 ** (1.0 / d)))))
    Z = alpha(X)
    target = p(X)
    if layers == 0:
        phi = CouplingMap(n)
    else:
        rng = np.random.default_rng(seed)
        size = _layer_sizes(n, hidden)
        theta0 = np.zeros(layers * size)
        for l in range(layers):
            base = l * size
            theta0[base : base + hidden * n] = rng.normal(0.0, 1.0, hidden * n)
            theta0[base + hidden * n : base + hidden * n + hidden] = rng.normal(0.0, 0.5, hidden)

        def residual(theta):
            cm = CouplingMap(n, _layers_from_vector(theta, layers, n, hidden, smax))
            return (beta(cm(Z)) - target).ravel()

        sol = least_squares(residual, theta0, method="trf", jac="2-point", max_nfev=budget)
        phi = CouplingMap(n, _layers_from_vector(sol.x, layers, n, hidden, smax))
    t = LiftTriple(alpha, phi, beta, "coupling_fit")
    fit_err = float(np.max(np.abs(beta(phi(Z)) - target))) if len(Z) else 0.0
    rec = verify_diffeo(phi, lifted_box(alpha, p.box), samples, seed)
    rec.fit_error = fit_err
    rec.reproduction_error = fit_err
    t.record = rec
    t.meta.update(layers=layers, hidden=hidden, seed=seed, budget=budget)
    if tol is not None and fit_err > tol:
        raise BudgetExhausted(f"coupling fit reached {fit_err:.3g} > tol {tol:g}", t, fit_err)
    return t


def select_lift(
    p: PolySurrogate,
    kappa: float | None = None,
    policy: str = "auto",
    coupling_layers: int = 6,
    seed: int = 0,
    budget: int = 60,
    samples: int = 2000,
) -> tuple[LiftTriple, list[VerificationRecord]]:
    """Pick a lift backend.

    ``auto`` uses ``verified_1d`` in one dimension; otherwise it tries
    ``paper_faithful`` and falls back to ``coupling_fit`` on rejection.
    Returns the chosen triple and the records of every attempt.
    """
    kappa = p.kappa if kappa is None else kappa
    attempts: list[VerificationRecord] = []
    if policy not in ("auto",) + BACKENDS:
        raise ValueError(f"unknown lift policy {policy!r}")
    if policy == "verified_1d" or (policy == "auto" and p.d_x == 1):
        t = build_lift_1d(p, kappa, samples, seed)
        return t, [t.record]
    if policy in ("auto", "paper_faithful"):
        t = build_lift_paper(p, kappa)
        rec = verify_diffeo(t.phi, lifted_box(t.alpha_map, p.box), samples, seed)
        rec.reproduction_error = t.meta["reproduction_error"]
        t.record = rec
        attempts.append(rec)
        if rec.accepted:
            return t, attempts
        if policy == "paper_faithful":
            raise VerificationFailed(rec.reason, rec)
    t = build_lift_coupling(p, coupling_layers, seed, budget, samples=samples)
    attempts.append(t.record)
    if not t.record.accepted:
        raise VerificationFailed(f"coupling lift rejected: {t.record.reason}", t.record)
    return t, attempts
