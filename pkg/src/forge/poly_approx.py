"""Tensor Chebyshev surrogates with certified-on-a-grid sup error."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C

from .nn_core import BoxDomain
from .target_lang import TargetFunction, eval_target

__all__ = ["PolySurrogate", "fit_polynomial", "lipschitz_bound", "verification_grid", "MAX_COEFFS"]

MAX_COEFFS = 2_000_000
MAX_GRID = 5_000_000
MIN_GRID = 33


def _to_ref(box: BoxDomain, X):
    return (2.0 * np.asarray(X, float) - box.lo - box.hi) / (box.hi - box.lo)


def _tensor_eval(coef: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Evaluate one coefficient tensor at reference points ``T`` of shape (n, d)."""
    d = T.shape[1]
    # contract the last axis first so the remaining axes keep their order
    out = None
    for ax in range(d - 1, -1, -1):
        V = C.chebvander(T[:, ax], coef.shape[ax] - 1)  # (n, deg+1)
        if out is None:
            out = np.tensordot(coef, V, axes=([ax], [1]))  # (..., n)
        else:
            # out has shape (k0..k_ax, n); contract k_ax with V pointwise in n
            out = np.einsum("...kn,nk->...n", out, V)
    return out


@dataclass(frozen=True, eq=False)
class PolySurrogate:
    """Per-output Chebyshev coefficient tensors on ``box``.

    Attributes
    ----------
    coeffs : tuple of ndarray
        One tensor per output with shape ``(deg_1+1, ..., deg_d+1)``.
    eps_p : float
        Sup error against the target on the verification grid.
    kappa : float
        Lipschitz bound, see :func:`lipschitz_bound`.
    grid_per_dim : int
        Points per axis of the verification grid used for both estimates.
    """

    coeffs: tuple
    box: BoxDomain
    degree: tuple
    eps_p: float = 0.0
    kappa: float = 1.0
    grid_per_dim: int = MIN_GRID
    refinement_delta: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def d_x(self) -> int:
        return self.box.dim

    @property
    def d_y(self) -> int:
        return len(self.coeffs)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        single = X.ndim == 1
        T = _to_ref(self.box, np.atleast_2d(X))
        Y = np.stack([_tensor_eval(c, T) for c in self.coeffs], axis=1)
        return Y[0] if single else Y

    def jacobian(self, X) -> np.ndarray:
        """Analytic Jacobian, shape ``(n, d_y, d_x)`` (or ``(d_y, d_x)`` for one point)."""
        X = np.asarray(X, float)
        single = X.ndim == 1
        T = _to_ref(self.box, np.atleast_2d(X))
        scale = 2.0 / (self.box.hi - self.box.lo)
        J = np.empty((T.shape[0], self.d_y, self.d_x))
        for o, c in enumerate(self.coeffs):
            for ax in range(self.d_x):
                if c.shape[ax] == 1:
                    J[:, o, ax] = 0.0
                    continue
                J[:, o, ax] = scale[ax] * _tensor_eval(C.chebder(c, axis=ax), T)
        return J[0] if single else J

    def to_dict(self) -> dict:
        return {
            "degree": list(self.degree),
            "box": self.box.to_dict(),
            "coeffs": [c.tolist() for c in self.coeffs],
            "coeffs_hex": [[float(v).hex() for v in c.ravel()] for c in self.coeffs],
            "eps_p": self.eps_p,
            "kappa": self.kappa,
            "grid_per_dim": self.grid_per_dim,
            "refinement_delta": self.refinement_delta,
        }


def verification_grid(box: BoxDomain, per_dim: int) -> np.ndarray:
    return box.grid(per_dim)


def _interp_coeffs(values: np.ndarray, degree) -> np.ndarray:
    """Chebyshev coefficients from samples on the tensor grid of first-kind points."""
    c = values
    for ax, n in enumerate(degree):
        pts = C.chebpts1(n + 1)
        V = C.chebvander(pts, n)
        c = np.moveaxis(np.tensordot(np.linalg.inv(V), c, axes=([1], [ax])), 0, ax)
    return c


def fit_polynomial(f: TargetFunction, box: BoxDomain, degree, max_refine: int = 3) -> PolySurrogate:
    """Interpolate ``f`` at tensor Chebyshev points of ``box``.

    ``degree`` is an int (same in every dimension) or one int per dimension.
    The sup error is measured on an equispaced grid with at least 33 points
    per axis and more than the node count; the grid is doubled until the
    estimate moves by less than 10% or the grid budget is hit.
    """
    if f.d_x != box.dim:
        raise ValueError(f"target has d_x={f.d_x} but box has dimension {box.dim}")
    deg = (int(degree),) * box.dim if np.ndim(degree) == 0 else tuple(int(k) for k in degree)
    if len(deg) != box.dim or min(deg) < 0:
        raise ValueError("need one non-negative degree per dimension")
    if np.prod([k + 1 for k in deg], dtype=float) * f.d_y > MAX_COEFFS:
        raise MemoryError("coefficient tensor exceeds the memory budget")
    axes = [(box.lo[a] + box.hi[a]) / 2 + (box.hi[a] - box.lo[a]) / 2 * C.chebpts1(n + 1) for a, n in enumerate(deg)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    vals = eval_target(f, nodes)
    if not np.all(np.isfinite(vals)):
        raise ValueError("target is not finite at the interpolation nodes")
    shape = tuple(k + 1 for k in deg)
    coeffs = tuple(_interp_coeffs(vals[:, o].reshape(shape), deg) for o in range(f.d_y))
    surrogate = PolySurrogate(coeffs, box, deg)

    per = max(MIN_GRID, 2 * max(deg) + 3)
    eps, grad_max, delta = _grid_stats(surrogate, f, per)
    for _ in range(max_refine):
        finer = 2 * per - 1
        if finer**box.dim > MAX_GRID:
            break
        eps2, grad2, _ = _grid_stats(surrogate, f, finer)
        delta = abs(eps2 - eps) / max(eps2, 1e-300) if eps2 > 0 else 0.0
        per, eps, grad_max = finer, max(eps, eps2), max(grad_max, grad2)
        if delta < 0.1:
            break
    kappa = max(1.0, 1.1 * grad_max)
    return PolySurrogate(coeffs, box, deg, float(eps), float(kappa), per, float(delta))


def _grid_stats(p: PolySurrogate, f: TargetFunction, per: int):
    X = verification_grid(p.box, per)
    err = float(np.max(np.abs(p(X) - eval_target(f, X))))
    return err, _max_grad_norm(p, X), 0.0


def _max_grad_norm(p: PolySurrogate, X) -> float:
    J = p.jacobian(X)
    if J.shape[1] == 1 or J.shape[2] == 1:
        norms = np.sqrt(np.sum(J * J, axis=(1, 2)))
    else:
        norms = np.linalg.norm(J, ord=2, axis=(1, 2))
    return float(np.max(norms))


def lipschitz_bound(p: PolySurrogate, per_dim: int | None = None) -> float:
    """``1.1 * max ||grad p||_2`` over the verification grid, floored at 1."""
    X = verification_grid(p.box, per_dim or p.grid_per_dim)
    return max(1.0, 1.1 * _max_grad_norm(p, X))
