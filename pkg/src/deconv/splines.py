"""B-spline bases, knot construction, and the second-difference penalty.

The variance-function model is ``v(x) = sum_j b_{q,j}(x) exp(xi_j)`` on a
clamped knot sequence over ``[A, B]``: boundary knots repeated ``q + 1``
times, ``L`` equal-width interior intervals, giving ``J = q + L`` bases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfSupport, TooFewCoefficients

DEFAULT_DEGREE = 2
DEFAULT_INTERVALS = 5  # 2q + L + 1 = 10 knot points at q = 2


@dataclass(frozen=True)
class KnotVector:
    """Clamped knot sequence with equidistant interior knots on [lo, hi]."""

    degree: int
    intervals: int
    lo: float
    hi: float
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.intervals < 1:
            raise ValueError("need at least one interior interval")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        q, L = self.degree, self.intervals
        interior = np.linspace(self.lo, self.hi, L + 1)
        knots = np.concatenate(
            [np.full(q, self.lo), interior, np.full(q, self.hi)]
        )
        object.__setattr__(self, "knots", knots)

    @property
    def n_basis(self) -> int:
        return self.degree + self.intervals

    def __len__(self) -> int:
        return 2 * self.degree + self.intervals + 1


def bspline_basis(x, knots: KnotVector) -> np.ndarray:
    """Evaluate all ``J`` bases at ``x`` by the Cox-de Boor recursion.

    Scalar ``x`` gives shape ``(J,)``; an array gives ``(n, J)``.  Raises
    :class:`OutOfSupport` outside ``[lo, hi]``.  The right endpoint is closed.
    """
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < knots.lo) or np.any(x > knots.hi):
        raise OutOfSupport(
            f"x outside support [{knots.lo}, {knots.hi}]"
        )
    t = knots.knots
    q = knots.degree
    n_b = knots.n_basis
    # Degree-0 indicators over [t_i, t_{i+1}); close the final interval on
    # the right so x == hi is supported.
    n_k = len(t)
    b = np.zeros((x.shape[0], n_k - 1))
    for i in range(n_k - 1):
        if t[i + 1] > t[i]:
            b[:, i] = (x >= t[i]) & (x < t[i + 1])
    last = np.searchsorted(t, knots.hi, side="left") - 1
    b[x == knots.hi, last] = 1.0
    for d in range(1, q + 1):
        nb = np.zeros((x.shape[0], n_k - d - 1))
        for i in range(n_k - d - 1):
            den1 = t[i + d] - t[i]
            if den1 > 0:
                nb[:, i] += (x - t[i]) / den1 * b[:, i]
            den2 = t[i + d + 1] - t[i + 1]
            if den2 > 0:
                nb[:, i] += (t[i + d + 1] - x) / den2 * b[:, i + 1]
        b = nb
    out = b[:, :n_b]
    return out[0] if scalar else out


def second_difference_matrix(n_coef: int) -> np.ndarray:
    """The (J-2) x J operator whose rows compute second differences."""
    if n_coef < 3:
        raise TooFewCoefficients(f"need J >= 3, got {n_coef}")
    d = np.zeros((n_coef - 2, n_coef))
    for i in range(n_coef - 2):
        d[i, i : i + 3] = (1.0, -2.0, 1.0)
    return d


def second_difference_penalty(n_coef: int) -> np.ndarray:
    """PSD penalty ``P = D^T D`` with ``xi^T P xi = sum (delta^2 xi_j)^2``."""
    d = second_difference_matrix(n_coef)
    return d.T @ d


@dataclass
class VarianceFunction:
    """Log-linear B-spline variance function ``v(x) = B(x) . exp(xi)``."""

    knots: KnotVector
    xi: np.ndarray
    sigma_xi_sq: float = 1.0

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.xi.shape != (self.knots.n_basis,):
            raise ValueError(
                f"xi must have length {self.knots.n_basis}, got {self.xi.shape}"
            )
        if not self.sigma_xi_sq > 0:
            raise ValueError("sigma_xi_sq must be > 0")

    def variance_at(self, x):
        basis = bspline_basis(x, self.knots)
        return basis @ np.exp(self.xi)

    def scale_at(self, x):
        return np.sqrt(self.variance_at(x))


def variance_at(vf: VarianceFunction, x):
    """Module-level alias for :meth:`VarianceFunction.variance_at`."""
    return vf.variance_at(x)
