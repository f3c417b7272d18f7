"""Stage-1 univariate conditionally heteroscedastic deconvolution.

Each coordinate gets its own submodel W_ijl = X_il + s_l(X_il) eps_ijl.
The scaled-error density is an overfitted mixture whose components are
zero-mean two-point normal mixtures (the four-parameter reparametrization
that absorbs the mean restriction), so all error-parameter updates can run
against the conditional likelihood f_{U|X} and the scaled errors never have
to be formed explicitly.  The fitted variance functions are frozen before
the multivariate sampler runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .dataset import ReplicateDataset
from .splines import (
    DEFAULT_DEGREE,
    DEFAULT_INTERVALS,
    KnotVector,
    VarianceFunction,
    bspline_basis,
    second_difference_penalty,
)
from .stats_core import RngStream, sample_dirichlet, sample_truncated_normal

_LOG_2PI = float(np.log(2.0 * np.pi))
_ADAPT_WINDOW = 25
_TARGET_RATE = 0.35


@dataclass
class PelenisComponent:
    """Four-parameter zero-mean two-point normal mixture component."""

    p_tilde: float
    mu_tilde: float
    sig1_sq: float
    sig2_sq: float


def pelenis_expand(comp: PelenisComponent):
    """Expand to (p1, mu1, sig1_sq, p2, mu2, sig2_sq) with p1 mu1 + p2 mu2 = 0.

    The two means are c_r * mu_tilde with c_1 = (1-p)/sqrt(p^2 + (1-p)^2)
    and c_2 = -p/sqrt(p^2 + (1-p)^2).
    """
    p = comp.p_tilde
    norm = np.sqrt(p**2 + (1.0 - p) ** 2)
    c1 = (1.0 - p) / norm
    c2 = -p / norm
    return (
        p,
        c1 * comp.mu_tilde,
        comp.sig1_sq,
        1.0 - p,
        c2 * comp.mu_tilde,
        comp.sig2_sq,
    )


def conditional_likelihood_u(
    u: float, x: float, vf: VarianceFunction, comp: PelenisComponent
) -> float:
    """f_{U|X}(u | x) = sum_r p_r Normal(u | s(x) mu_r, s(x)^2 sig_r^2)."""
    v = float(vf.variance_at(x))
    s = np.sqrt(v)
    p1, m1, v1, p2, m2, v2 = pelenis_expand(comp)
    t1 = p1 * np.exp(-0.5 * (u - s * m1) ** 2 / (v * v1)) / np.sqrt(2 * np.pi * v * v1)
    t2 = p2 * np.exp(-0.5 * (u - s * m2) ** 2 / (v * v2)) / np.sqrt(2 * np.pi * v * v2)
    return float(t1 + t2)


def _expand_arrays(p_tilde, mu_tilde):
    """Vectorized component means c_1 mu, c_2 mu for parameter arrays."""
    norm = np.sqrt(p_tilde**2 + (1.0 - p_tilde) ** 2)
    mu1 = (1.0 - p_tilde) / norm * mu_tilde
    mu2 = -p_tilde / norm * mu_tilde
    return mu1, mu2


def _loglik_rows(u, var_scale, p_tilde, mu_tilde, sig1_sq, sig2_sq):
    """Row-wise log f_{U|X}; all arguments broadcast against ``u``.

    ``var_scale`` is v(x) = s(x)^2 for each row.
    """
    mu1, mu2 = _expand_arrays(p_tilde, mu_tilde)
    s = np.sqrt(var_scale)
    v1 = var_scale * sig1_sq
    v2 = var_scale * sig2_sq
    with np.errstate(divide="ignore"):
        l1 = np.log(p_tilde) - 0.5 * ((u - s * mu1) ** 2 / v1 + np.log(v1) + _LOG_2PI)
        l2 = np.log1p(-p_tilde) - 0.5 * (
            (u - s * mu2) ** 2 / v2 + np.log(v2) + _LOG_2PI
        )
    return np.logaddexp(l1, l2)


@dataclass
class Stage1Settings:
    """Knobs for the univariate submodels; defaults follow the main recipe."""

    iterations: int = 1000
    burn_in: int = 500
    n_error_comps: int = 4  # K - 1 two-point components (K = 5 overfitted)
    n_x_comps: int = 5
    degree: int = DEFAULT_DEGREE
    intervals: int = DEFAULT_INTERVALS
    alpha: float = 1.0
    a_xi: float = 0.01
    b_xi: float = 0.01
    mu_tilde_sd: float = 1.0
    a_sig: float = 1.1
    b_sig: float = 1.0

    def __post_init__(self):
        if not self.burn_in < self.iterations:
            raise ValueError("burn_in must be < iterations")


@dataclass
class UnivariateChain:
    """Full state of one per-coordinate submodel chain."""

    x: np.ndarray  # (n,)
    knots: KnotVector
    xi: np.ndarray  # (J,)
    sigma_xi_sq: float
    p_tilde: np.ndarray  # (Kc,)
    mu_tilde: np.ndarray
    sig1_sq: np.ndarray
    sig2_sq: np.ndarray
    weights_err: np.ndarray  # (Kc,)
    labels_err: np.ndarray  # (N,)
    weights_x: np.ndarray  # (Kx,)
    means_x: np.ndarray
    vars_x: np.ndarray
    labels_x: np.ndarray  # (n,)
    prop_x: float
    prop_xi: float
    prop_theta: np.ndarray  # (Kc,)
    penalty: np.ndarray = field(repr=False, default=None)
    adapting: bool = True
    accept_x: float = 0.0
    accept_xi: float = 0.0
    accept_theta: float = 0.0
    _subject_index: np.ndarray = field(repr=False, default=None)

    def components(self) -> list[PelenisComponent]:
        return [
            PelenisComponent(
                float(self.p_tilde[k]),
                float(self.mu_tilde[k]),
                float(self.sig1_sq[k]),
                float(self.sig2_sq[k]),
            )
            for k in range(len(self.p_tilde))
        ]

    def variance_function(self) -> VarianceFunction:
        return VarianceFunction(self.knots, self.xi.copy(), self.sigma_xi_sq)

    def error_variance(self) -> float:
        """var(eps) of the current scaled-error mixture (mean is zero)."""
        mu1, mu2 = _expand_arrays(self.p_tilde, self.mu_tilde)
        second = self.p_tilde * (mu1**2 + self.sig1_sq) + (1.0 - self.p_tilde) * (
            mu2**2 + self.sig2_sq
        )
        return float(self.weights_err @ second)


@dataclass
class Stage1Result:
    """Frozen variance function (identifiable scale) plus X initializers."""

    variance_fn: VarianceFunction
    x_mean: np.ndarray
    accept_x: float
    accept_xi: float
    accept_theta: float
    error_variance: float


def _theta_logprior(z, settings):
    """Log prior density of theta in the transformed space (with Jacobians).

    z = (logit p, mu, log sig1_sq, log sig2_sq); p ~ U(0,1), mu ~ N(0, sd^2),
    sig^2 ~ Inv-Gamma(a, b).
    """
    logit_p, mu, ls1, ls2 = z
    # Uniform(0,1) with logit Jacobian: log p + log(1 - p)
    lp = -np.logaddexp(0.0, -logit_p) - np.logaddexp(0.0, logit_p)
    lp += -0.5 * (mu / settings.mu_tilde_sd) ** 2
    a, b = settings.a_sig, settings.b_sig
    for ls in (ls1, ls2):
        # Inv-Gamma(a, b) density at e^{ls} times Jacobian e^{ls}
        lp += -a * ls - b * np.exp(-ls)
    return lp


def init_chain(
    w_col: np.ndarray,
    subject_index: np.ndarray,
    settings: Stage1Settings,
    lo: float,
    hi: float,
) -> UnivariateChain:
    n = int(subject_index.max()) + 1
    counts = np.bincount(subject_index, minlength=n)
    x0 = np.bincount(subject_index, weights=w_col, minlength=n) / counts
    x0 = np.clip(x0, lo, hi)
    dev = w_col - x0[subject_index]
    dof = max(len(w_col) - n, 1)
    var_within = max(float((dev**2).sum() / dof), 1e-6)
    knots = KnotVector(settings.degree, settings.intervals, lo, hi)
    n_basis = knots.n_basis
    kc = settings.n_error_comps
    kx = settings.n_x_comps
    # X-prior mixture initialized at spread quantiles of the subject means
    quantiles = np.quantile(x0, np.linspace(0.1, 0.9, kx))
    spread = np.full(kx, max(float(np.var(x0)), 1e-6))
    return UnivariateChain(
        x=x0,
        knots=knots,
        xi=np.full(n_basis, np.log(var_within)),
        sigma_xi_sq=1.0,
        p_tilde=np.full(kc, 0.5),
        mu_tilde=np.zeros(kc),
        sig1_sq=np.full(kc, 1.5),
        sig2_sq=np.full(kc, 0.5),
        weights_err=np.full(kc, 1.0 / kc),
        labels_err=np.zeros(len(w_col), dtype=int),
        weights_x=np.full(kx, 1.0 / kx),
        means_x=quantiles,
        vars_x=spread,
        labels_x=np.zeros(n, dtype=int),
        prop_x=0.5 * np.sqrt(var_within / max(counts.mean(), 1.0)),
        prop_xi=0.4,
        prop_theta=np.full(kc, 0.4),
        penalty=second_difference_penalty(n_basis),
    )


def _chain_loglik(chain, u, var_rows):
    lab = chain.labels_err
    return _loglik_rows(
        u,
        var_rows,
        chain.p_tilde[lab],
        chain.mu_tilde[lab],
        chain.sig1_sq[lab],
        chain.sig2_sq[lab],
    )


def _update_xi(chain, u, var_rows, basis, v_x, settings, rng):
    """Componentwise random-walk MH on the log-spline coefficients.

    Returns the updated pointwise variances and the acceptance count.
    """
    acc_xi = 0
    subject_index = chain._subject_index
    cur_ll = float(np.sum(_chain_loglik(chain, u, var_rows)))
    cur_pen = float(chain.xi @ chain.penalty @ chain.xi)
    if chain.prop_xi > 0.0:
        for j in range(chain.xi.shape[0]):
            step = chain.prop_xi * rng.gen.standard_normal()
            xi_new = chain.xi.copy()
            xi_new[j] += step
            v_new = np.maximum(
                v_x + basis[:, j] * (np.exp(xi_new[j]) - np.exp(chain.xi[j])),
                1e-300,
            )
            new_ll = float(np.sum(_chain_loglik(chain, u, v_new[subject_index])))
            new_pen = float(xi_new @ chain.penalty @ xi_new)
            log_acc = (new_ll - cur_ll) - (new_pen - cur_pen) / (
                2.0 * chain.sigma_xi_sq
            )
            if np.log(rng.gen.random()) < log_acc:
                chain.xi = xi_new
                v_x = v_new
                cur_ll, cur_pen = new_ll, new_pen
                acc_xi += 1
    # conjugate smoothing-variance update given the (possibly moved) xi
    shape = settings.a_xi + chain.xi.shape[0] / 2.0
    rate = settings.b_xi + 0.5 * float(chain.xi @ chain.penalty @ chain.xi)
    chain.sigma_xi_sq = 1.0 / rng.gen.gamma(shape, 1.0 / rate)
    return v_x, acc_xi


def _update_theta(chain, u, var_rows, settings, rng):
    """Joint random-walk MH on each two-point component against f_{U|X}."""
    acc_theta = 0
    for k in range(chain.p_tilde.shape[0]):
        members = chain.labels_err == k
        z = np.array(
            [
                np.log(chain.p_tilde[k]) - np.log1p(-chain.p_tilde[k]),
                chain.mu_tilde[k],
                np.log(chain.sig1_sq[k]),
                np.log(chain.sig2_sq[k]),
            ]
        )
        if chain.prop_theta[k] <= 0.0:
            acc_theta += 1
            continue
        z_new = z + chain.prop_theta[k] * rng.gen.standard_normal(4)

        def block_ll(zv):
            p = 1.0 / (1.0 + np.exp(-zv[0]))
            return float(
                np.sum(
                    _loglik_rows(
                        u[members],
                        var_rows[members],
                        p,
                        zv[1],
                        np.exp(zv[2]),
                        np.exp(zv[3]),
                    )
                )
            )

        log_acc = (
            block_ll(z_new)
            + _theta_logprior(z_new, settings)
            - block_ll(z)
            - _theta_logprior(z, settings)
        )
        if np.log(rng.gen.random()) < log_acc:
            chain.p_tilde[k] = 1.0 / (1.0 + np.exp(-z_new[0]))
            chain.mu_tilde[k] = z_new[1]
            chain.sig1_sq[k] = np.exp(z_new[2])
            chain.sig2_sq[k] = np.exp(z_new[3])
            acc_theta += 1
    return acc_theta


def _update_error_mixture(chain, u, var_rows, settings, rng):
    """Outer labels and Dirichlet weights of the error mixture."""
    ll_by_comp = _loglik_rows(
        u[:, None],
        var_rows[:, None],
        chain.p_tilde[None, :],
        chain.mu_tilde[None, :],
        chain.sig1_sq[None, :],
        chain.sig2_sq[None, :],
    )
    with np.errstate(divide="ignore"):
        log_resp = ll_by_comp + np.log(chain.weights_err)[None, :]
    shifted = log_resp - log_resp.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    draws = rng.gen.random((len(u), 1))
    chain.labels_err = (np.cumsum(probs, axis=1) < draws).sum(axis=1)
    counts_err = np.bincount(chain.labels_err, minlength=chain.p_tilde.shape[0])
    chain.weights_err = sample_dirichlet(
        settings.alpha / chain.p_tilde.shape[0] + counts_err, rng
    )


def _update_x_prior_mixture(chain, settings, rng):
    """Conjugate block of the overfitted normal mixture prior on X."""
    n = chain.x.shape[0]
    kx = chain.weights_x.shape[0]
    with np.errstate(divide="ignore"):
        log_rx = (
            -0.5 * (chain.x[:, None] - chain.means_x[None, :]) ** 2
            / chain.vars_x[None, :]
            - 0.5 * np.log(chain.vars_x)[None, :]
            + np.log(chain.weights_x)[None, :]
        )
    shifted = log_rx - log_rx.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    chain.labels_x = (np.cumsum(probs, axis=1) < rng.gen.random((n, 1))).sum(axis=1)
    counts_x = np.bincount(chain.labels_x, minlength=kx)
    chain.weights_x = sample_dirichlet(settings.alpha / kx + counts_x, rng)
    mu0 = float(np.mean(chain.x))
    sigma0_sq = max(2.0 * float(np.var(chain.x)), 1e-8)
    psi0 = max(float(np.var(chain.x)), 1e-8)
    for k in range(kx):
        members = chain.labels_x == k
        n_k = int(members.sum())
        post_var = 1.0 / (1.0 / sigma0_sq + n_k / chain.vars_x[k])
        post_mean = post_var * (
            mu0 / sigma0_sq + chain.x[members].sum() / chain.vars_x[k]
        )
        chain.means_x[k] = post_mean + np.sqrt(post_var) * rng.gen.standard_normal()
        scatter = float(((chain.x[members] - chain.means_x[k]) ** 2).sum())
        chain.vars_x[k] = 1.0 / rng.gen.gamma(
            (3.0 + n_k) / 2.0, 2.0 / (psi0 + scatter)
        )


def _update_latent_x(chain, w_col, subject_index, u, var_rows, rng):
    """MH on each latent coordinate with a truncated-normal proposal."""
    n = chain.x.shape[0]
    if chain.prop_x <= 0.0:
        return n
    lo, hi = chain.knots.lo, chain.knots.hi
    x_new = sample_truncated_normal(chain.x, chain.prop_x, lo, hi, rng)
    basis_new = bspline_basis(x_new, chain.knots)
    v_new = np.maximum(basis_new @ np.exp(chain.xi), 1e-300)
    u_new = w_col - x_new[subject_index]
    ll_cur = _chain_loglik(chain, u, var_rows)
    ll_new = _chain_loglik(chain, u_new, v_new[subject_index])
    by_subj = np.bincount(subject_index, weights=ll_new - ll_cur, minlength=n)
    prior_cur = (
        -0.5 * (chain.x - chain.means_x[chain.labels_x]) ** 2
        / chain.vars_x[chain.labels_x]
    )
    prior_new = (
        -0.5 * (x_new - chain.means_x[chain.labels_x]) ** 2
        / chain.vars_x[chain.labels_x]
    )
    z_cur = ndtr((hi - chain.x) / chain.prop_x) - ndtr((lo - chain.x) / chain.prop_x)
    z_new = ndtr((hi - x_new) / chain.prop_x) - ndtr((lo - x_new) / chain.prop_x)
    log_acc = by_subj + prior_new - prior_cur + np.log(z_cur) - np.log(z_new)
    accept = np.log(rng.gen.random(n)) < log_acc
    chain.x = np.where(accept, x_new, chain.x)
    return int(accept.sum())


def mh_sweep_univariate(
    chain: UnivariateChain,
    w_col: np.ndarray,
    subject_index: np.ndarray,
    settings: Stage1Settings,
    rng: RngStream,
) -> UnivariateChain:
    """One full sweep over all blocks of the univariate submodel."""
    n = chain.x.shape[0]
    chain._subject_index = subject_index
    basis = bspline_basis(chain.x, chain.knots)  # (n, J)
    v_x = np.maximum(basis @ np.exp(chain.xi), 1e-300)
    u = w_col - chain.x[subject_index]
    var_rows = v_x[subject_index]

    v_x, acc_xi = _update_xi(chain, u, var_rows, basis, v_x, settings, rng)
    var_rows = v_x[subject_index]
    acc_theta = _update_theta(chain, u, var_rows, settings, rng)
    _update_error_mixture(chain, u, var_rows, settings, rng)
    _update_x_prior_mixture(chain, settings, rng)
    acc_x = _update_latent_x(chain, w_col, subject_index, u, var_rows, rng)

    chain.accept_x = acc_x / n
    chain.accept_xi = acc_xi / chain.xi.shape[0] if chain.prop_xi > 0 else 1.0
    chain.accept_theta = acc_theta / chain.p_tilde.shape[0]
    return chain


def _adapt_scale(scale: float, rate: float, lo: float, hi: float) -> float:
    return float(np.clip(scale * np.exp(rate - _TARGET_RATE), lo, hi))


def run_univariate_chain(
    w_col: np.ndarray,
    subject_index: np.ndarray,
    settings: Stage1Settings,
    rng: RngStream,
    lo: float,
    hi: float,
) -> Stage1Result:
    """Run one per-coordinate chain and distill its stage-1 outputs.

    The reported variance function carries the identifiable scale: each
    retained draw contributes exp(xi) * var(eps), so the fitted curve
    estimates var(U | X = x) directly and the split between s^2 and the
    scaled-error variance drops out.
    """
    chain = init_chain(w_col, subject_index, settings, lo, hi)
    span = hi - lo
    n_keep = 0
    coef_acc = np.zeros(chain.xi.shape[0])
    x_acc = np.zeros(chain.x.shape[0])
    var_eps_acc = 0.0
    rates = np.zeros(3)
    acc_win = np.zeros(3)
    for it in range(settings.iterations):
        mh_sweep_univariate(chain, w_col, subject_index, settings, rng)
        acc_win += (chain.accept_x, chain.accept_xi, chain.accept_theta)
        if chain.adapting and (it + 1) % _ADAPT_WINDOW == 0:
            win = acc_win / _ADAPT_WINDOW
            chain.prop_x = _adapt_scale(chain.prop_x, win[0], 1e-4 * span, span)
            chain.prop_xi = _adapt_scale(chain.prop_xi, win[1], 1e-3, 5.0)
            chain.prop_theta[:] = _adapt_scale(
                float(chain.prop_theta[0]), win[2], 1e-3, 5.0
            )
            acc_win[:] = 0.0
        if it + 1 == settings.burn_in:
            chain.adapting = False
        if it >= settings.burn_in:
            var_eps = chain.error_variance()
            coef_acc += np.exp(chain.xi) * var_eps
            var_eps_acc += var_eps
            x_acc += chain.x
            rates += (chain.accept_x, chain.accept_xi, chain.accept_theta)
            n_keep += 1
    coef_mean = coef_acc / n_keep
    vf = VarianceFunction(chain.knots, np.log(np.maximum(coef_mean, 1e-300)), 1.0)
    rates /= n_keep
    return Stage1Result(
        variance_fn=vf,
        x_mean=x_acc / n_keep,
        accept_x=float(rates[0]),
        accept_xi=float(rates[1]),
        accept_theta=float(rates[2]),
        error_variance=var_eps_acc / n_keep,
    )


def support_bounds(data: ReplicateDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate [A, B]: subject-mean range inflated by 10% each side."""
    means = data.subject_means()
    lo = means.min(axis=0)
    hi = means.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    return lo - 0.1 * span, hi + 0.1 * span


def fit_stage1(
    data: ReplicateDataset,
    settings: Stage1Settings | None = None,
    rng: RngStream | None = None,
    jobs: int = 1,
) -> list[Stage1Result]:
    """Fit the p univariate submodels; coordinate l uses substream(l)."""
    settings = settings or Stage1Settings()
    rng = rng or RngStream(0)
    data.require_replicates()
    lo, hi = support_bounds(data)
    args = [
        (data.w[:, j], data.subject_index, settings, rng.substream(j), lo[j], hi[j])
        for j in range(data.dim)
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_univariate_chain, *a) for a in args]
            return [f.result() for f in futures]
    return [run_univariate_chain(*a) for a in args]
