"""Leaky-ReLU feedforward networks of bounded width.

A network alternates affine maps and the elementwise leaky-ReLU

    sigma_alpha(s) = s        if s > 0
                   = alpha*s  otherwise

and never applies the activation after its final affine map.  Every
intermediate dimension is bounded by the declared width ``N``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

#: relative determinant threshold below which a square matrix is treated as singular
SINGULAR_RTOL = 1e-12


class NetworkError(ValueError):
    """Structural problem with a network (dimensions, width bound, schema)."""


class NonInvertible(NetworkError):
    """Raised when a network cannot be inverted layer by layer."""


def leaky_relu(s, alpha: float):
    """Apply the leaky-ReLU with slope ``alpha`` on the nonpositive side."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if np.ndim(s) == 0:
        s = float(s)
        return s if s > 0 else alpha * s
    s = np.asarray(s, dtype=float)
    return np.where(s > 0, s, alpha * s)


def leaky_relu_inverse(s, alpha: float):
    """Exact inverse of :func:`leaky_relu`."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if np.ndim(s) == 0:
        s = float(s)
        return s if s > 0 else s / alpha
    s = np.asarray(s, dtype=float)
    return np.where(s > 0, s, s / alpha)


def min_width(d_x: int, d_y: int) -> int:
    """Minimum width of leaky-ReLU networks that are uniformly dense in C(K, R^d_y).

    >>> min_width(1, 2)
    3
    """
    if d_x < 1 or d_y < 1:
        raise ValueError("dimensions must be positive")
    return max(d_x + 1, d_y) + (1 if d_y == d_x + 1 else 0)


@dataclass(frozen=True)
class Activation:
    alpha: float

    def __post_init__(self):
        a = float(self.alpha)
        if not (a > 0 and math.isfinite(a)) or a == 1.0:
            raise ValueError(f"leaky-ReLU slope must be positive and != 1, got {self.alpha}")
        object.__setattr__(self, "alpha", a)

    def __call__(self, s):
        return leaky_relu(s, self.alpha)

    def inverse(self, s):
        return leaky_relu_inverse(s, self.alpha)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BoxDomain:
    """Product of closed intervals ``[lo_j, hi_j]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _frozen(np.atleast_1d(self.lo))
        hi = _frozen(np.atleast_1d(self.hi))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError(f"box needs lo < hi in every dimension, got {lo} / {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, dim: int, lo: float = -1.0, hi: float = 1.0) -> "BoxDomain":
        return cls(np.full(dim, lo), np.full(dim, hi))

    @property
    def dim(self) -> int:
        return self.lo.size

    def grid(self, per_dim: int) -> np.ndarray:
        """Tensor grid with ``per_dim`` equispaced points per axis, shape (per_dim**d, d)."""
        axes = [np.linspace(l, h, per_dim) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo + rng.random((n, self.dim)) * (self.hi - self.lo)

    def inflate(self, frac: float) -> "BoxDomain":
        pad = frac * (self.hi - self.lo)
        return BoxDomain(self.lo - pad, self.hi + pad)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    def __eq__(self, other):
        if not isinstance(other, BoxDomain):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``x -> W x + b``; ``W`` has shape (out, in)."""

    W: np.ndarray
    b: np.ndarray
    nonsingular: bool = field(init=False)

    def __post_init__(self):
        W = np.atleast_2d(np.array(self.W, dtype=float))
        b = np.atleast_1d(np.array(self.b, dtype=float)).ravel()
        if W.ndim != 2 or b.shape[0] != W.shape[0]:
            raise NetworkError(f"affine shapes disagree: W {W.shape}, b {b.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NetworkError("affine map has non-finite entries")
        object.__setattr__(self, "W", _frozen(W))
        object.__setattr__(self, "b", _frozen(b))
        object.__setattr__(self, "nonsingular", _is_nonsingular(W))

    @classmethod
    def identity(cls, n: int) -> "AffineMap":
        return cls(np.eye(n), np.zeros(n))

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W.T + self.b

    def then(self, other: "AffineMap") -> "AffineMap":
        """Return ``other o self`` as a single affine map."""
        return AffineMap(other.W @ self.W, other.W @ self.b + other.b)

    def solve(self, y: np.ndarray) -> np.ndarray:
        if not self.nonsingular:
            raise NonInvertible("affine map is singular or not square")
        return np.linalg.solve(self.W, (y - self.b).T).T

    def __eq__(self, other):
        if not isinstance(other, AffineMap):
            return NotImplemented
        return np.array_equal(self.W, other.W) and np.array_equal(self.b, other.b)

    __hash__ = None


def _is_nonsingular(W: np.ndarray) -> bool:
    n, m = W.shape
    if n != m:
        return False
    scale = float(np.max(np.abs(W))) if W.size else 0.0
    if scale == 0.0:
        return False
    # compare on the scaled matrix to avoid overflow/underflow of scale**n
    return abs(np.linalg.det(W / scale)) >= SINGULAR_RTOL


@dataclass(frozen=True, eq=False)
class NarrowNet:
    """Alternating affine maps and leaky-ReLU activations.

    ``layers`` is a sequence of ``(AffineMap, activated)`` pairs; the last
    pair must have ``activated=False``.
    """

    input_dim: int
    output_dim: int
    layers: tuple
    declared_width: int
    alpha: float = 0.5

    def __post_init__(self):
        layers = tuple((aff, bool(act)) for aff, act in self.layers)
        object.__setattr__(self, "layers", layers)
        Activation(self.alpha)  # validates the slope
        if not layers:
            raise NetworkError("network needs at least one affine map")
        if layers[-1][1]:
            raise NetworkError("final affine map must not be followed by an activation")
        if layers[0][0].in_dim != self.input_dim:
            raise NetworkError(
                f"first layer consumes {layers[0][0].in_dim} inputs, expected {self.input_dim}"
            )
        if layers[-1][0].out_dim != self.output_dim:
            raise NetworkError(
                f"last layer produces {layers[-1][0].out_dim} outputs, expected {self.output_dim}"
            )
        for k in range(len(layers) - 1):
            if layers[k + 1][0].in_dim != layers[k][0].out_dim:
                raise NetworkError(f"layer {k + 1} does not compose with layer {k}")
            if layers[k][0].out_dim > self.declared_width:
                raise NetworkError(
                    f"intermediate dimension {layers[k][0].out_dim} exceeds declared width "
                    f"{self.declared_width}"
                )

    @property
    def depth(self) -> int:
        """Number of activation layers."""
        return sum(act for _, act in self.layers)

    @property
    def widths(self) -> list[int]:
        return [aff.out_dim for aff, _ in self.layers[:-1]]

    def __call__(self, x) -> np.ndarray:
        return eval_net(self, x)

    def __eq__(self, other):
        if not isinstance(other, NarrowNet):
            return NotImplemented
        return (
            self.input_dim == other.input_dim
            and self.output_dim == other.output_dim
            and self.declared_width == other.declared_width
            and self.alpha == other.alpha
            and len(self.layers) == len(other.layers)
            and all(a == b and x == y for (a, x), (b, y) in zip(self.layers, other.layers))
        )

    __hash__ = None


def net_from_affines(
    affines: Sequence[AffineMap], width: int, alpha: float, activated: Iterable[bool] | None = None
) -> NarrowNet:
    """Build a net that activates after every affine map except the last."""
    affines = list(affines)
    if activated is None:
        activated = [True] * (len(affines) - 1) + [False]
    return NarrowNet(
        input_dim=affines[0].in_dim,
        output_dim=affines[-1].out_dim,
        layers=tuple(zip(affines, activated)),
        declared_width=width,
        alpha=alpha,
    )


def eval_net(net: NarrowNet, x) -> np.ndarray:
    """Evaluate ``net`` on a single point (shape ``(d_x,)``) or a batch ``(n, d_x)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != net.input_dim:
        raise NetworkError(f"input has dimension {h.shape[1]}, network expects {net.input_dim}")
    a = net.alpha
    for aff, act in net.layers:
        h = h @ aff.W.T + aff.b
        if act:
            h = np.where(h > 0, h, a * h)
    return h[0] if single else h


def invert_net(net: NarrowNet, y) -> np.ndarray:
    """Return ``x`` with ``eval_net(net, x) == y`` for a constant-width nonsingular net."""
    n = net.declared_width
    if net.input_dim != n or net.output_dim != n:
        raise NonInvertible("inversion needs d_x = d_y = declared width")
    for k, (aff, _) in enumerate(net.layers):
        if aff.in_dim != n or aff.out_dim != n or not aff.nonsingular:
            raise NonInvertible(f"layer {k} is not square and nonsingular")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    h = np.atleast_2d(y)
    a = net.alpha
    for aff, act in reversed(net.layers):
        if act:
            h = np.where(h > 0, h, h / a)
        h = aff.solve(h)
    return h[0] if single else h


def compose(outer: NarrowNet, inner: NarrowNet, width: int | None = None) -> NarrowNet:
    """Return the net computing ``outer(inner(x))``.

    The last affine map of ``inner`` and the first of ``outer`` are merged
    into one, so the depth is the sum of the two depths.
    """
    if inner.output_dim != outer.input_dim:
        raise NetworkError("nets do not compose: dimension mismatch")
    if inner.alpha != outer.alpha:
        raise NetworkError("nets use different leaky-ReLU slopes")
    (last, _), (first, first_act) = inner.layers[-1], outer.layers[0]
    merged = last.then(first)
    layers = inner.layers[:-1] + ((merged, first_act),) + outer.layers[1:]
    return NarrowNet(
        input_dim=inner.input_dim,
        output_dim=outer.output_dim,
        layers=layers,
        declared_width=width if width is not None else max(inner.declared_width, outer.declared_width),
        alpha=inner.alpha,
    )


def compose_many(nets, width: int | None = None) -> NarrowNet:
    """Compose ``nets`` in application order (``nets[0]`` first) in one pass."""
    nets = list(nets)
    if not nets:
        raise NetworkError("nothing to compose")
    alpha = nets[0].alpha
    layers = list(nets[0].layers)
    for prev, net in zip(nets, nets[1:]):
        if prev.output_dim != net.input_dim:
            raise NetworkError("nets do not compose: dimension mismatch")
        if net.alpha != alpha:
            raise NetworkError("nets use different leaky-ReLU slopes")
        last, _ = layers.pop()
        first, first_act = net.layers[0]
        layers.append((last.then(first), first_act))
        layers.extend(net.layers[1:])
    return NarrowNet(
        input_dim=nets[0].input_dim,
        output_dim=nets[-1].output_dim,
        layers=tuple(layers),
        declared_width=width if width is not None else max(n.declared_width for n in nets),
        alpha=alpha,
    )


def affine_net(aff: AffineMap, width: int, alpha: float) -> NarrowNet:
    return NarrowNet(aff.in_dim, aff.out_dim, ((aff, False),), width, alpha)


def random_net(
    rng: np.random.Generator,
    d_in: int,
    d_out: int,
    width: int,
    depth: int,
    alpha: float = 0.5,
    scale: float = 1.0,
) -> NarrowNet:
    """Seeded random net with ``depth`` activation layers, all hidden dims equal ``width``."""
    dims = [d_in] + [width] * depth + [d_out]
    affines = [
        AffineMap(scale * rng.standard_normal((dims[k + 1], dims[k])), scale * rng.standard_normal(dims[k + 1]))
        for k in range(len(dims) - 1)
    ]
    return net_from_affines(affines, width, alpha)


# --- serialization -------------------------------------------------------


def _hex(a: np.ndarray):
    if a.ndim == 1:
        return [float(v).hex() for v in a]
    return [[float(v).hex() for v in row] for row in a]


def _unhex(a):
    if a and isinstance(a[0], list):
        return [[float.fromhex(v) for v in row] for row in a]
    return [float.fromhex(v) for v in a]


def net_to_dict(net: NarrowNet) -> dict:
    return {
        "alpha": net.alpha,
        "alpha_hex": float(net.alpha).hex(),
        "declared_width": net.declared_width,
        "input_dim": net.input_dim,
        "output_dim": net.output_dim,
        "layers": [
            {
                "W": aff.W.tolist(),
                "b": aff.b.tolist(),
                "W_hex": _hex(aff.W),
                "b_hex": _hex(aff.b),
                "activated": act,
            }
            for aff, act in net.layers
        ],
    }


def net_from_dict(doc: dict) -> NarrowNet:
    try:
        alpha = float.fromhex(doc["alpha_hex"]) if "alpha_hex" in doc else float(doc["alpha"])
        layers = []
        for layer in doc["layers"]:
            W = _unhex(layer["W_hex"]) if "W_hex" in layer else layer["W"]
            b = _unhex(layer["b_hex"]) if "b_hex" in layer else layer["b"]
            W = np.array(W, dtype=float).reshape(len(b), -1) if len(b) else np.zeros((0, 0))
            layers.append((AffineMap(W, b), bool(layer["activated"])))
        return NarrowNet(
            input_dim=int(doc["input_dim"]),
            output_dim=int(doc["output_dim"]),
            layers=tuple(layers),
            declared_width=int(doc["declared_width"]),
            alpha=alpha,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkError(f"network document violates schema: {exc}") from exc


def serialize_net(net: NarrowNet) -> str:
    return json.dumps(net_to_dict(net), indent=1)


def deserialize_net(text: str) -> NarrowNet:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"network document is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise NetworkError("network document must be a JSON object")
    return net_from_dict(doc)
