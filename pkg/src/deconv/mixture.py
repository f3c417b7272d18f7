"""Finite mixture of multivariate normals with two covariance back-ends.

The component covariances are either a stack of dense SPD matrices updated
by conjugate inverse-Wishart draws, or a latent-factor decomposition
``Sigma_k = Lambda_k Lambda_k^T + Omega`` with multiplicative-gamma shrinkage
on the loading columns.  All Gibbs full-conditional updates live here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import AllResponsibilitiesUnderflow, LabelOutOfRange
from .stats_core import (
    RngStream,
    chol_factor,
    mvn_logpdf,
    sample_dirichlet,
    sample_inverse_wishart,
    sample_mvn,
    symmetrize,
)


@dataclass
class HyperParams:
    """Prior hyper-parameters for one mixture block.

    ``alpha`` is the total Dirichlet concentration (symmetric alpha/K per
    component).  ``nu0``/``psi0`` drive the inverse-Wishart back-end;
    ``a1``/``ah``/``nu_shrink`` the column shrinkage of the factor back-end.
    """

    alpha: float
    mu0: np.ndarray
    sigma0: np.ndarray
    nu0: float
    psi0: np.ndarray
    a1: float = 1.0
    ah: float = 2.0
    nu_shrink: float = 1.0
    a_sigma: float = 1.1
    b_sigma: float = 1.0
    a_xi: float = 0.01
    b_xi: float = 0.01

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.sigma0 = np.asarray(self.sigma0, dtype=float)
        self.psi0 = np.asarray(self.psi0, dtype=float)
        p = self.mu0.shape[0]
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.nu0 > p + 1:
            raise ValueError(f"nu0 must exceed p + 1 = {p + 1}")

    @property
    def dim(self) -> int:
        return self.mu0.shape[0]


def default_truncation(p: int) -> int:
    """Factor truncation max(2, floor((p + 1) / 2))."""
    return max(2, (p + 1) // 2)


@dataclass
class FactorBlock:
    """Per-component loadings with shrinkage hyper-variables.

    ``eta`` holds one latent factor row per modeled observation.  ``omega``
    is the shared diagonal of idiosyncratic variances; in the per-component
    variant (``sigma_comp_sq`` set) each component uses a spherical
    ``sigma_k^2 I`` instead.
    """

    loadings: np.ndarray  # (K, p, q)
    phi: np.ndarray  # (K, p, q)
    delta: np.ndarray  # (K, q)
    eta: np.ndarray  # (n_obs, q)
    omega: np.ndarray | None = None  # (p,) shared diagonal
    sigma_comp_sq: np.ndarray | None = None  # (K,) spherical per component

    def __post_init__(self):
        if (self.omega is None) == (self.sigma_comp_sq is None):
            raise ValueError("set exactly one of omega / sigma_comp_sq")

    @property
    def per_component(self) -> bool:
        return self.sigma_comp_sq is not None

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[2]

    @property
    def tau(self) -> np.ndarray:
        """Cumulative-product global shrinkage, shape (K, q)."""
        return np.cumprod(self.delta, axis=1)

    def omega_diag(self, k: int) -> np.ndarray:
        p = self.loadings.shape[1]
        if self.per_component:
            return np.full(p, self.sigma_comp_sq[k])
        return self.omega

    def materialize(self) -> np.ndarray:
        """Dense covariances Lambda_k Lambda_k^T + Omega_k, shape (K, p, p)."""
        k_comp, p, _ = self.loadings.shape
        covs = np.einsum("kpq,krq->kpr", self.loadings, self.loadings)
        for k in range(k_comp):
            covs[k][np.diag_indices(p)] += self.omega_diag(k)
        return covs

    @staticmethod
    def initial(
        n_comp: int, p: int, n_obs: int, omega: np.ndarray, per_component: bool
    ) -> "FactorBlock":
        """Zero loadings/factors, unit shrinkage, given idiosyncratic scale."""
        q = default_truncation(p)
        if per_component:
            kwargs = {"sigma_comp_sq": np.full(n_comp, float(np.mean(omega)))}
        else:
            kwargs = {"omega": np.asarray(omega, dtype=float).copy()}
        return FactorBlock(
            loadings=np.zeros((n_comp, p, q)),
            phi=np.ones((n_comp, p, q)),
            delta=np.ones((n_comp, q)),
            eta=np.zeros((n_obs, q)),
            **kwargs,
        )


@dataclass
class MixtureState:
    """Weights, means and a covariance representation for one mixture."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray | None = None  # (K, p, p) for the inverse-Wishart back-end
    factor: FactorBlock | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        if (self.covs is None) == (self.factor is None):
            raise ValueError("set exactly one of covs / factor")
        if self.covs is not None:
            self.covs = np.asarray(self.covs, dtype=float)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def backend(self) -> str:
        return "miw" if self.covs is not None else "factor"

    def materialized_covs(self) -> np.ndarray:
        if self.covs is not None:
            return self.covs
        return self.factor.materialize()


def component_log_densities(points: np.ndarray, state: MixtureState) -> np.ndarray:
    """Log N(x_i | mu_k, Sigma_k) for all points and components, shape (n, K)."""
    points = np.atleast_2d(points)
    covs = state.materialized_covs()
    out = np.empty((points.shape[0], state.n_components))
    for k in range(state.n_components):
        out[:, k] = mvn_logpdf(points, state.means[k], chol_factor(covs[k]))
    return out


def mixture_density(state: MixtureState, x) -> np.ndarray | float:
    """Mixture density at ``x``; accepts one point (p,) or a batch (n, p).

    Terms are sorted before summation so the value is exactly invariant
    under permutations of the component labels.
    """
    single = np.ndim(x) == 1
    log_comp = component_log_densities(x, state)
    terms = np.exp(log_comp) * state.weights
    vals = np.sort(terms, axis=1).sum(axis=1)
    return float(vals[0]) if single else vals


def sample_categorical_rows(log_weights: np.ndarray, rng: RngStream) -> np.ndarray:
    """One categorical draw per row of unnormalized log weights."""
    finite = np.isfinite(log_weights)
    if np.any(~finite.any(axis=1)):
        raise AllResponsibilitiesUnderflow(
            "a point has no finite component log density"
        )
    shifted = log_weights - log_weights.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.gen.random((log_weights.shape[0], 1))
    return (np.cumsum(probs, axis=1) < u).sum(axis=1)


def update_weights(
    labels: np.ndarray, alpha: float, n_comp: int, rng: RngStream
) -> np.ndarray:
    """Dirichlet(alpha/K + n_1, ..., alpha/K + n_K) draw from label counts."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_comp):
        raise LabelOutOfRange(f"labels must lie in [0, {n_comp})")
    counts = np.bincount(labels, minlength=n_comp)
    return sample_dirichlet(alpha / n_comp + counts, rng)


def update_labels(
    points: np.ndarray, state: MixtureState, rng: RngStream
) -> np.ndarray:
    """Categorical labels from log-space responsibilities."""
    with np.errstate(divide="ignore"):
        log_resp = component_log_densities(points, state) + np.log(state.weights)
    return sample_categorical_rows(log_resp, rng)


def update_means_miw(
    points: np.ndarray,
    labels: np.ndarray,
    covariances: np.ndarray,
    hyper: HyperParams,
    rng: RngStream,
) -> np.ndarray:
    """Conjugate MVN draws of the component means given dense covariances."""
    n_comp = covariances.shape[0]
    p = hyper.dim
    chol0 = chol_factor(hyper.sigma0)
    prec0 = cho_solve((chol0, True), np.eye(p))
    rhs0 = cho_solve((chol0, True), hyper.mu0)
    means = np.empty((n_comp, p))
    for k in range(n_comp):
        members = labels == k
        n_k = int(members.sum())
        chol_k = chol_factor(covariances[k])
        prec_k = cho_solve((chol_k, True), np.eye(p))
        prec_post = prec0 + n_k * prec_k
        rhs = rhs0 + prec_k @ points[members].sum(axis=0) if n_k else rhs0.copy()
        chol_prec = chol_factor(symmetrize(prec_post))
        cov_post = cho_solve((chol_prec, True), np.eye(p))
        mean_post = cov_post @ rhs
        means[k] = sample_mvn(mean_post, chol_factor(symmetrize(cov_post)), rng)
    return means


def update_covs_miw(
    points: np.ndarray,
    labels: np.ndarray,
    means: np.ndarray,
    hyper: HyperParams,
    rng: RngStream,
) -> np.ndarray:
    """Conjugate inverse-Wishart draws of the component covariances."""
    n_comp = means.shape[0]
    p = hyper.dim
    covs = np.empty((n_comp, p, p))
    for k in range(n_comp):
        dev = points[labels == k] - means[k]
        scatter = dev.T @ dev if dev.size else np.zeros((p, p))
        covs[k] = sample_inverse_wishart(
            hyper.nu0 + dev.shape[0], hyper.psi0 + scatter, rng
        )
    return covs


def _update_factors(points, labels, means, block, rng):
    n_comp = means.shape[0]
    q = block.n_factors
    eta = np.zeros((points.shape[0], q))
    for k in range(n_comp):
        members = np.flatnonzero(labels == k)
        if members.size == 0:
            continue
        omega = block.omega_diag(k)
        lam_w = block.loadings[k] / omega[:, None]  # Omega^{-1} Lambda
        prec = np.eye(q) + block.loadings[k].T @ lam_w
        chol_prec = chol_factor(symmetrize(prec))
        rhs = (points[members] - means[k]) @ lam_w  # (n_k, q)
        mean = cho_solve((chol_prec, True), rhs.T)  # (q, n_k)
        z = rng.gen.standard_normal((q, members.size))
        shift = solve_triangular(chol_prec.T, z, lower=False, check_finite=False)
        eta[members] = (mean + shift).T
    block.eta = eta


def _update_loadings(points, labels, means, block, hyper, rng):
    n_comp, p, q = block.loadings.shape
    tau = block.tau
    for k in range(n_comp):
        members = np.flatnonzero(labels == k)
        eta_k = block.eta[members]
        gram = eta_k.T @ eta_k if members.size else np.zeros((q, q))
        dev = points[members] - means[k] if members.size else None
        omega = block.omega_diag(k)
        for j in range(p):
            d_inv = block.phi[k, j] * tau[k]
            prec = np.diag(d_inv) + gram / omega[j]
            chol_prec = chol_factor(symmetrize(prec))
            if members.size:
                rhs = eta_k.T @ dev[:, j] / omega[j]
            else:
                rhs = np.zeros(q)
            mean = cho_solve((chol_prec, True), rhs)
            z = rng.gen.standard_normal(q)
            shift = solve_triangular(
                chol_prec.T, z, lower=False, check_finite=False
            )
            block.loadings[k, j] = mean + shift


def _update_idiosyncratic(points, labels, means, block, hyper, rng):
    n_obs, p = points.shape
    fitted = means[labels] + np.einsum(
        "ipq,iq->ip", block.loadings[labels], block.eta
    )
    resid_sq = (points - fitted) ** 2
    if block.per_component:
        n_comp = means.shape[0]
        for k in range(n_comp):
            members = labels == k
            shape = hyper.a_sigma + members.sum() * p / 2.0
            rate = hyper.b_sigma + 0.5 * resid_sq[members].sum()
            block.sigma_comp_sq[k] = 1.0 / rng.gen.gamma(shape, 1.0 / rate)
    else:
        shape = hyper.a_sigma + n_obs / 2.0
        rates = hyper.b_sigma + 0.5 * resid_sq.sum(axis=0)
        block.omega = 1.0 / rng.gen.gamma(shape, 1.0 / rates)


def _update_local_shrinkage(block, hyper, rng):
    nu = hyper.nu_shrink
    tau = block.tau[:, None, :]  # (K, 1, q)
    rate = (nu + tau * block.loadings**2) / 2.0
    block.phi = rng.gen.gamma((nu + 1.0) / 2.0, 1.0 / rate)


def _update_global_shrinkage(block, hyper, rng):
    # Full conditional of delta_{k,h}: the quadratic term sums columns
    # l >= h only, since tau_{k,l} for l < h does not involve delta_{k,h}.
    n_comp, p, q = block.loadings.shape
    for k in range(n_comp):
        col_sq = np.sum(block.phi[k] * block.loadings[k] ** 2, axis=0)  # (q,)
        for h in range(q):
            shape = (hyper.a1 if h == 0 else hyper.ah) + p * (q - h) / 2.0
            masked = block.delta[k].copy()
            masked[h] = 1.0
            tau_wo_h = np.cumprod(masked)
            rate = 1.0 + 0.5 * np.sum(tau_wo_h[h:] * col_sq[h:])
            block.delta[k, h] = rng.gen.gamma(shape, 1.0 / rate)


def update_factor_block(
    points: np.ndarray,
    labels: np.ndarray,
    means: np.ndarray,
    block: FactorBlock,
    hyper: HyperParams,
    rng: RngStream,
) -> FactorBlock:
    """One full factor-block sweep: eta, loadings, Omega, phi, delta.

    Factors are refreshed first: the label and mean updates condition on the
    materialized covariances with eta integrated out, so eta must be redrawn
    before anything that conditions on it.
    """
    points = np.atleast_2d(points)
    _update_factors(points, labels, means, block, rng)
    _update_loadings(points, labels, means, block, hyper, rng)
    _update_idiosyncratic(points, labels, means, block, hyper, rng)
    _update_local_shrinkage(block, hyper, rng)
    _update_global_shrinkage(block, hyper, rng)
    return block
