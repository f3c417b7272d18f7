"""Mean-restricted mixture for the (scaled) errors.

The component means carry the identifiability constraint
``sum_k pi_k mu_k = 0``, enforced by sampling the first K-1 blocks from the
Gaussian conditional of the unconstrained conjugate posterior and closing
the last block deterministically.  The multiplicative heteroscedastic
structure enters through :class:`ScaleField`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

import numpy.typing as npt

from .errors import DegenerateWeight, ScaleUnderflow
from .mixture import HyperParams, MixtureState
from .splines import VarianceFunction
from .stats_core import RngStream, chol_factor, symmetrize

_SCALE_FLOOR = 1e-8
_WEIGHT_FLOOR = 1e-12


@dataclass
class RestrictedMixture:
    """Mixture for the error density with the zero-mean restriction."""

    inner: MixtureState

    @property
    def constraint_residual(self) -> np.ndarray:
        return self.inner.weights @ self.inner.means

    def center(self) -> None:
        """Shift all component means so the constraint holds exactly."""
        self.inner.means = self.inner.means - self.constraint_residual


class ScaleField:
    """Per-coordinate scale functions s_l(x) = sqrt(v_l(x)); None = identity."""

    def __init__(self, functions: list[VarianceFunction] | None):
        self.functions = functions

    @classmethod
    def identity(cls) -> "ScaleField":
        return cls(None)

    @property
    def is_identity(self) -> bool:
        return self.functions is None

    def scale_at(self, x: npt.ArrayLike) -> np.ndarray:
        """Matrix of s_l(x_il) matching the shape of ``x`` (n, p)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.functions is None:
            return np.ones_like(x)
        if x.shape[1] != len(self.functions):
            raise ValueError(
                f"x has {x.shape[1]} coordinates, field has {len(self.functions)}"
            )
        out = np.empty_like(x)
        for j, vf in enumerate(self.functions):
            out[:, j] = vf.scale_at(x[:, j])
        return out

    def support(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self.functions is None:
            return None
        lo = np.array([vf.knots.lo for vf in self.functions])
        hi = np.array([vf.knots.hi for vf in self.functions])
        return lo, hi


def scaled_residuals(
    w: np.ndarray, x_rows: np.ndarray, field: ScaleField | None = None
) -> np.ndarray:
    """Scaled errors eps_ij = (W_ij - X_i) / s(X_i), rowwise.

    ``x_rows`` must already be expanded to align with the replicate rows of
    ``w``.  An identity (or None) field returns the raw residuals.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
    if field is None or field.is_identity:
        return w - x_rows
    scales = field.scale_at(x_rows)
    if np.any(scales < _SCALE_FLOOR):
        raise ScaleUnderflow(
            f"scale function fell below {_SCALE_FLOOR}"
        )
    return (w - x_rows) / scales


def unconstrained_mean_conditional(
    residuals: np.ndarray,
    labels: np.ndarray,
    covariances: np.ndarray,
    hyper: HyperParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Blocks of the unconstrained conjugate posterior of the stacked means.

    Returns ``(mu0, sigma0)`` with shapes (K, p) and (K, p, p); the joint is
    block diagonal because the components are conditionally independent.
    """
    n_comp = covariances.shape[0]
    p = hyper.dim
    chol0 = chol_factor(hyper.sigma0)
    prec0 = cho_solve((chol0, True), np.eye(p))
    rhs0 = cho_solve((chol0, True), hyper.mu0)
    mu_blocks = np.empty((n_comp, p))
    sigma_blocks = np.empty((n_comp, p, p))
    for k in range(n_comp):
        members = labels == k
        n_k = int(members.sum())
        chol_k = chol_factor(covariances[k])
        prec_k = cho_solve((chol_k, True), np.eye(p))
        prec_post = symmetrize(prec0 + n_k * prec_k)
        chol_prec = chol_factor(prec_post)
        sigma_blocks[k] = symmetrize(cho_solve((chol_prec, True), np.eye(p)))
        rhs = rhs0 + (prec_k @ residuals[members].sum(axis=0) if n_k else 0.0)
        mu_blocks[k] = sigma_blocks[k] @ rhs
    return mu_blocks, sigma_blocks


def sample_constrained_means(
    mu0: np.ndarray,
    sigma0: np.ndarray,
    weights: np.ndarray,
    rng: RngStream,
) -> np.ndarray:
    """Draw component means subject to ``sum_k pi_k mu_k = 0``.

    Samples the non-singular conditional of the first K-1 blocks given the
    weighted sum, then closes the last block.  Raises
    :class:`DegenerateWeight` when the closing weight is below 1e-12; the
    caller may rotate which component closes (label exchangeability makes
    the choice irrelevant).
    """
    mu0 = np.asarray(mu0, dtype=float)
    sigma0 = np.asarray(sigma0, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n_comp, p = mu0.shape
    if weights[-1] < _WEIGHT_FLOOR:
        raise DegenerateWeight(
            f"closing weight {weights[-1]:.3e} below {_WEIGHT_FLOOR}"
        )
    if n_comp == 1:
        return np.zeros((1, p))
    mu_r = weights @ mu0  # E of the weighted sum
    sigma_rr = np.einsum("k,kpq->pq", weights**2, sigma0)
    chol_rr = chol_factor(symmetrize(sigma_rr))
    solve_rr = lambda b: cho_solve((chol_rr, True), b)
    m = n_comp - 1
    cond_mean = np.empty((m, p))
    cond_cov = np.empty((m * p, m * p))
    adj = solve_rr(mu_r)
    for k in range(m):
        cond_mean[k] = mu0[k] - weights[k] * sigma0[k] @ adj
        for j in range(m):
            blk = -weights[k] * weights[j] * sigma0[k] @ solve_rr(sigma0[j])
            if j == k:
                blk = blk + sigma0[k]
            cond_cov[k * p : (k + 1) * p, j * p : (j + 1) * p] = blk
    chol_cond = chol_factor(symmetrize(cond_cov))
    z = rng.gen.standard_normal(m * p)
    head = (cond_mean.ravel() + chol_cond @ z).reshape(m, p)
    closing = -(weights[:m] @ head) / weights[-1]
    return np.vstack([head, closing[None, :]])


def draw_constrained_means(
    mu0: np.ndarray,
    sigma0: np.ndarray,
    weights: np.ndarray,
    rng: RngStream,
) -> np.ndarray:
    """Constrained mean draw, rotating the closing component when needed."""
    weights = np.asarray(weights, dtype=float)
    n_comp = weights.shape[0]
    closing = n_comp - 1
    if weights[closing] < _WEIGHT_FLOOR:
        closing = int(np.argmax(weights))
    order = [k for k in range(n_comp) if k != closing] + [closing]
    order = np.asarray(order)
    drawn = sample_constrained_means(mu0[order], sigma0[order], weights[order], rng)
    out = np.empty_like(drawn)
    out[order] = drawn
    return out


def update_error_means(
    rmix: RestrictedMixture,
    residuals: np.ndarray,
    labels: np.ndarray,
    hyper: HyperParams,
    rng: RngStream,
) -> None:
    """Constrained conjugate update of the error-component means in place."""
    covs = rmix.inner.materialized_covs()
    mu0, sigma0 = unconstrained_mean_conditional(residuals, labels, covs, hyper)
    rmix.inner.means = draw_constrained_means(
        mu0, sigma0, rmix.inner.weights, rng
    )
