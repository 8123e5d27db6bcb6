"""Geometric witnesses for the width obstructions.

Covers self-intersection of polylines (with an exact rational fallback for
degenerate orientation tests), the forced crossing of curves near the
'4'-shape, its removal by a small lift into three dimensions, and the
monotonicity of width-1 leaky-ReLU nets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .nn_core import NarrowNet, eval_net, net_from_affines, AffineMap
from .target_lang import four_vertices

__all__ = [
    "Polyline",
    "Intersection",
    "Verdict",
    "PreconditionViolated",
    "four_curve",
    "orient2d",
    "segments_intersect",
    "self_intersections",
    "matched_distance",
    "perturb_curve",
    "forced_intersection_check",
    "monotone_width1_probe",
    "random_width1_net",
    "search_width1",
    "read_polyline_csv",
    "write_polyline_csv",
    "write_rows_csv",
]

# relative error bound for the float orientation determinant
_ORIENT_EPS = 3.3306690738754716e-16


class PreconditionViolated(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Polyline:
    """Vertices in R^2 or R^3 with uniform parameterization over [0, 1]."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] not in (2, 3):
            raise ValueError("a polyline needs at least two vertices in R^2 or R^3")
        if not np.all(np.isfinite(v)):
            raise ValueError("polyline vertices must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_segments(self) -> int:
        return len(self.vertices) - 1

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        s = np.clip(t, 0.0, 1.0) * self.n_segments
        idx = np.minimum(np.floor(s).astype(int), self.n_segments - 1)
        frac = (s - idx)[:, None]
        return self.vertices[idx] * (1 - frac) + self.vertices[idx + 1] * frac

    def params(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.vertices))

    def reversed(self) -> "Polyline":
        return Polyline(self.vertices[::-1])

    def restrict(self, t0: float, t1: float) -> tuple[np.ndarray, np.ndarray]:
        """Vertices and parameters of the sub-curve over ``[t0, t1]``."""
        p = self.params()
        inner = (p > t0) & (p < t1)
        ts = np.concatenate([[t0], p[inner], [t1]])
        return self(ts), ts


@dataclass(frozen=True)
class Intersection:
    s: float
    t: float
    point: tuple


@dataclass(frozen=True)
class Verdict:
    intersects: bool
    point: tuple | None
    params: tuple | None
    distance: float

    def __str__(self):
        return "INTERSECTS" if self.intersects else "NO_INTERSECTION"


def four_curve(dim: int = 2, z_lift: float = 0.1) -> Polyline:
    """The '4'-shaped polyline; in 3-D the first vertex is lifted by ``z_lift``."""
    return Polyline(four_vertices(dim, z_lift))


# --- exact-fallback predicates --------------------------------------------------


def _orient_exact(a, b, c) -> int:
    ax, ay = Fraction(a[0]), Fraction(a[1])
    det = (Fraction(b[0]) - ax) * (Fraction(c[1]) - ay) - (Fraction(b[1]) - ay) * (Fraction(c[0]) - ax)
    return (det > 0) - (det < 0)


def orient2d(a, b, c) -> int:
    """Sign of the signed area of ``(a, b, c)``, exact for float inputs."""
    left = (b[0] - a[0]) * (c[1] - a[1])
    right = (b[1] - a[1]) * (c[0] - a[0])
    det = left - right
    if abs(det) > _ORIENT_EPS * (abs(left) + abs(right)):
        return int(np.sign(det))
    return _orient_exact(a, b, c)


def _on_segment(a, b, p) -> bool:
    """``p`` collinear with ``a b`` lies within its bounding box."""
    return min(a[0], b[0]) <= p[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])


def segments_intersect(p1, p2, q1, q2) -> bool:
    """Closed 2-D segments ``p1 p2`` and ``q1 q2`` share a point."""
    o1, o2 = orient2d(p1, p2, q1), orient2d(p1, p2, q2)
    o3, o4 = orient2d(q1, q2, p1), orient2d(q1, q2, p2)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True
    return (
        (o1 == 0 and _on_segment(p1, p2, q1))
        or (o2 == 0 and _on_segment(p1, p2, q2))
        or (o3 == 0 and _on_segment(q1, q2, p1))
        or (o4 == 0 and _on_segment(q1, q2, p2))
    )


def _closest_params(p1, p2, q1, q2):
    """Parameters ``(u, v)`` in [0, 1]^2 minimizing ``|p(u) - q(v)|``."""
    d1, d2, r = p2 - p1, q2 - q1, p1 - q1
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    c = d1 @ r
    b = d1 @ d2
    denom = a * e - b * b
    u = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-300 else 0.0
    v = (b * u + f) / e if e > 0 else 0.0
    if v < 0.0:
        v, u = 0.0, np.clip(-c / a, 0.0, 1.0) if a > 0 else 0.0
    elif v > 1.0:
        v, u = 1.0, np.clip((b - c) / a, 0.0, 1.0) if a > 0 else 0.0
    return float(u), float(v)


def _crossing_params(p1, p2, q1, q2):
    """Intersection parameters of two 2-D segments known to intersect."""
    d1, d2 = p2 - p1, q2 - q1
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if den != 0.0:
        r = q1 - p1
        u = (r[0] * d2[1] - r[1] * d2[0]) / den
        v = (r[0] * d1[1] - r[1] * d1[0]) / den
        return float(np.clip(u, 0, 1)), float(np.clip(v, 0, 1))
    # collinear overlap: the lexicographically smallest shared endpoint, so the
    # witness does not depend on traversal direction
    shared = [x for x in (p1, p2) if _on_segment(q1, q2, x)] + [x for x in (q1, q2) if _on_segment(p1, p2, x)]
    x = min(shared, key=lambda z: (z[0], z[1]))
    return _param_on(p1, p2, x), _param_on(q1, q2, x)


def _param_on(a, b, x) -> float:
    d = b - a
    dd = float(d @ d)
    return float(np.clip((x - a) @ d / dd, 0.0, 1.0)) if dd > 0 else 0.0


def _segment_hit(p1, p2, q1, q2, tol):
    if len(p1) == 2 and segments_intersect(p1, p2, q1, q2):
        return _crossing_params(p1, p2, q1, q2)
    u, v = _closest_params(p1, p2, q1, q2)
    gap = np.linalg.norm(p1 + u * (p2 - p1) - (q1 + v * (q2 - q1)))
    if len(p1) == 3 and gap == 0.0:
        return u, v
    return (u, v) if tol > 0 and gap <= tol else None


def _candidate_pairs(V: np.ndarray, tol: float, skip_adjacent: bool = True):
    """Segment index pairs whose inflated bounding boxes overlap."""
    lo = np.minimum(V[:-1], V[1:]) - tol
    hi = np.maximum(V[:-1], V[1:]) + tol
    S = len(lo)
    i, j = np.triu_indices(S, k=2 if skip_adjacent else 1)
    keep = np.all((lo[i] <= hi[j]) & (lo[j] <= hi[i]), axis=1)
    return i[keep], j[keep]


def self_intersections(c: Polyline, tol: float = 0.0) -> list[Intersection]:
    """Intersections between non-adjacent segments of ``c``.

    Segments closer than ``tol`` count as intersecting.  Parameters are
    reported on the curve's uniform ``[0, 1]`` scale with ``s < t``.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    V = c.vertices
    S = c.n_segments
    out = []
    for i, j in zip(*_candidate_pairs(V, tol)):
        # first and last segment of a closed loop share a vertex too
        if i == 0 and j == S - 1 and np.array_equal(V[0], V[-1]):
            continue
        hit = _segment_hit(V[i], V[i + 1], V[j], V[j + 1], tol)
        if hit is None:
            continue
        u, v = hit
        point = V[i] + u * (V[i + 1] - V[i])
        out.append(Intersection(float((i + u) / S), float((j + v) / S), tuple(float(x) for x in point)))
    return out


def _strand_crossings(A, tA, B, tB, tol=0.0):
    hits = []
    for i in range(len(A) - 1):
        for j in range(len(B) - 1):
            lo1, hi1 = np.minimum(A[i], A[i + 1]), np.maximum(A[i], A[i + 1])
            lo2, hi2 = np.minimum(B[j], B[j + 1]), np.maximum(B[j], B[j + 1])
            if np.any(hi1 < lo2) or np.any(hi2 < lo1):
                continue
            hit = _segment_hit(A[i], A[i + 1], B[j], B[j + 1], tol)
            if hit is not None:
                u, v = hit
                hits.append((A[i] + u * (A[i + 1] - A[i]), tA[i] + u * (tA[i + 1] - tA[i]), tB[j] + v * (tB[j + 1] - tB[j])))
    return hits


def matched_distance(h: Polyline, g: Polyline) -> float:
    """Exact ``sup_t |h(t) - g(t)|`` for polylines with uniform parameterization.

    The difference is piecewise linear between the union of breakpoints, so
    its norm peaks at a breakpoint.
    """
    ts = np.union1d(h.params(), g.params())
    return float(np.max(np.linalg.norm(h(ts) - g(ts), axis=1)))


def perturb_curve(g: Polyline, rng: np.random.Generator, amplitude: float, samples_per_segment: int = 24, modes: int = 6) -> Polyline:
    """Smooth random perturbation of ``g`` with matched distance at most ``amplitude``."""
    ts = np.linspace(0.0, 1.0, g.n_segments * samples_per_segment + 1)
    k = np.arange(1, modes + 1)
    coef = rng.normal(size=(modes, g.dim)) / k[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=(modes, g.dim))
    delta = np.einsum("md,tmd->td", coef, np.sin(2 * np.pi * k[None, :, None] * ts[:, None, None] + phase[None]))
    delta *= amplitude * rng.uniform(0.5, 1.0) / np.max(np.linalg.norm(delta, axis=1))
    return Polyline(g(ts) + delta)


def forced_intersection_check(h: Polyline, eps0: float, g: Polyline | None = None) -> Verdict:
    """Look for the crossing every curve close to the planar '4'-shape must have.

    The strand of ``h`` over the parameters of the horizontal bar of ``g`` is
    tested against the strand over the vertical bar.

    Raises
    ------
    PreconditionViolated
        If the matched distance from ``h`` to ``g`` is not below ``eps0``.
    """
    g = four_curve(2) if g is None else g
    if h.dim != 2:
        raise PreconditionViolated("the crossing argument is planar")
    dist = matched_distance(h, g)
    if not dist < eps0:
        raise PreconditionViolated(f"curve is {dist:.4g} from the reference, needs < {eps0:g}")
    S = g.n_segments
    A, tA = h.restrict(0.0, 1.0 / S)
    B, tB = h.restrict((S - 1) / S, 1.0)
    hits = _strand_crossings(A, tA, B, tB)
    inside = [hp for hp in hits if np.all(np.abs(hp[0]) <= 1.0)]
    if not inside:
        return Verdict(False, None, None, dist)
    point, s, t = min(inside, key=lambda hp: float(np.linalg.norm(hp[0])))
    return Verdict(True, tuple(float(x) for x in point), (float(s), float(t)), dist)


# --- width-1 nets ------------------------------------------------------------------


def monotone_width1_probe(net: NarrowNet, points: int = 1001) -> tuple[bool, float]:
    """Monotonicity on a sorted grid of ``[-1, 1]`` and sup error against ``x^2``."""
    if net.input_dim != 1 or net.output_dim != 1 or net.declared_width != 1:
        raise ValueError("probe expects a scalar width-1 net")
    x = np.linspace(-1.0, 1.0, points)
    y = eval_net(net, x[:, None])[:, 0]
    inc = np.diff(y)
    monotone = bool(np.all(inc >= 0) or np.all(inc <= 0))
    return monotone, float(np.max(np.abs(y - x * x)))


def _random_alpha(rng) -> float:
    a = float(rng.uniform(0.05, 0.95))
    return a if rng.random() < 0.5 else 1.0 / a


def random_width1_net(rng: np.random.Generator, depth: int, alpha: float | None = None) -> NarrowNet:
    alpha = _random_alpha(rng) if alpha is None else alpha
    affs = [AffineMap([[rng.normal()]], [rng.normal()]) for _ in range(depth + 1)]
    return net_from_affines(affs, 1, alpha)


def _forward_scalar(theta, x, alpha):
    h = x
    L = len(theta) // 2
    for q in range(L):
        h = theta[2 * q] * h + theta[2 * q + 1]
        if q < L - 1:
            h = np.where(h > 0, h, alpha * h)
    return h


def search_width1(seed: int, iterations: int = 10_000, max_depth: int = 10, points: int = 1001) -> tuple[NarrowNet, float]:
    """Seeded random search with local refinement for the best width-1 fit of ``x^2``.

    Half the iterations sample fresh nets; the rest perturb the incumbent.
    """
    rng = np.random.default_rng(seed)
    x = np.linspace(-1.0, 1.0, points)
    y = x * x
    best = None
    for it in range(iterations):
        if best is None or it % 2 == 0:
            depth = int(rng.integers(1, max_depth + 1))
            alpha = _random_alpha(rng)
            theta = rng.normal(size=2 * (depth + 1))
        else:
            theta = best[1] + rng.normal(scale=0.1, size=best[1].shape)
            alpha = best[2]
        with np.errstate(all="ignore"):
            err = float(np.max(np.abs(_forward_scalar(theta, x, alpha) - y)))
        if np.isfinite(err) and (best is None or err < best[0]):
            best = (err, theta, alpha)
    err, theta, alpha = best
    affs = [AffineMap([[theta[2 * q]]], [theta[2 * q + 1]]) for q in range(len(theta) // 2)]
    net = net_from_affines(affs, 1, alpha)
    return net, monotone_width1_probe(net, points)[1]


# --- CSV --------------------------------------------------------------------------


def write_polyline_csv(path, c: Polyline) -> None:
    names = ["x", "y", "z"][: c.dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in c.vertices:
            w.writerow([repr(float(v)) for v in row])


def read_polyline_csv(path) -> Polyline:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty polyline file")
    body = rows[1:] if rows[0] and not _is_number(rows[0][0]) else rows
    return Polyline(np.array([[float(v) for v in r] for r in body if r]))


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_rows_csv(path, header, rows) -> None:
    """Write a witness table; ``path`` of ``-`` or ``None`` is not allowed here."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
