"""Full-chain orchestration for the deconvolution samplers.

Builds starting values, runs the Gibbs sweeps (closed-form latent updates
for homoscedastic errors, truncated-normal MH for heteroscedastic ones),
accumulates the posterior-mean density on a grid, and provides the naive
comparator that fits the mixture directly to subject means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import ndtr

from .dataset import ReplicateDataset
from .error_model import (
    RestrictedMixture,
    ScaleField,
    scaled_residuals,
    unconstrained_mean_conditional,
    draw_constrained_means,
)
from .errors import EmptyDataset
from .mixture import (
    FactorBlock,
    HyperParams,
    MixtureState,
    component_log_densities,
    default_truncation,
    update_covs_miw,
    update_factor_block,
    update_labels,
    update_means_miw,
    update_weights,
)
from .stage1 import Stage1Result, Stage1Settings, fit_stage1, support_bounds
from .stats_core import (
    RngStream,
    chol_factor,
    chol_logdet,
    mvn_logpdf,
    sample_mvn_from_precision,
    sample_truncated_normal,
    symmetrize,
)

logger = logging.getLogger("deconv")

EMPTY_WEIGHT = 0.05  # a component counts as nonempty when pi_k > 0.05
_ADAPT_WINDOW = 25
_TARGET_RATE = 0.3

MODELS = ("miw", "mlfa", "mlfad", "naive")


@dataclass
class FitConfig:
    """Sampler schedule and model choice for one fit."""

    model: str = "mlfa"
    heteroscedastic: bool = False
    k_x: int | None = None
    k_err: int | None = None
    iterations: int = 3000
    burn_in: int = 1000
    thin: int = 5
    seed: int = 0
    grid_points: int = 64
    truncation: int | None = None
    cluster_max: int = 8
    stage1: Stage1Settings = dc_field(default_factory=Stage1Settings)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if not self.burn_in < self.iterations:
            raise ValueError("burn_in must be < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class ChainState:
    """Everything one Gibbs sweep advances."""

    x: np.ndarray  # (n, p) latent
    fx: MixtureState
    ferr: RestrictedMixture
    labels_x: np.ndarray
    labels_err: np.ndarray
    hyper_x: HyperParams
    hyper_err: HyperParams
    scale: ScaleField
    iteration: int = 0
    prop_x: np.ndarray | None = None  # (p,) MH proposal scales (heteroscedastic)
    adapting: bool = True
    accept_x: float = 1.0
    _acc_window: list = dc_field(default_factory=list)


def kmeans_bic(
    points: np.ndarray, k_max: int, rng: RngStream, n_iter: int = 50
) -> tuple[int, np.ndarray, np.ndarray]:
    """Pick the cluster count in 1..k_max by BIC under spherical Gaussians.

    Plain Lloyd iterations with kmeans++ seeding; replaces a model-based
    clustering dependency for rough starting values only.
    """
    points = np.atleast_2d(points)
    n, p = points.shape
    k_max = max(1, min(k_max, n))
    best = None
    for k in range(1, k_max + 1):
        centers = _kmeanspp(points, k, rng)
        labels = np.zeros(n, dtype=int)
        for step in range(n_iter):
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            if np.array_equal(new_labels, labels) and step > 0:
                break
            labels = new_labels
            for j in range(k):
                members = labels == j
                if members.any():
                    centers[j] = points[members].mean(axis=0)
        sse = float(((points - centers[labels]) ** 2).sum())
        sigma2 = max(sse / (n * p), 1e-12)
        counts = np.bincount(labels, minlength=k)
        occupied = counts > 0
        loglik = -0.5 * n * p * (np.log(2 * np.pi * sigma2) + 1.0) + float(
            np.sum(counts[occupied] * np.log(counts[occupied] / n))
        )
        n_params = k * p + (k - 1) + 1
        bic = -2.0 * loglik + n_params * np.log(n)
        if best is None or bic < best[0]:
            best = (bic, k, labels.copy(), centers.copy())
    return best[1], best[2], best[3]


def _kmeanspp(points, k, rng):
    n = points.shape[0]
    centers = [points[rng.gen.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            ((points[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2),
            axis=1,
        )
        total = d2.sum()
        if total <= 0:
            centers.append(points[rng.gen.integers(n)])
            continue
        centers.append(points[rng.gen.choice(n, p=d2 / total)])
    return np.asarray(centers, dtype=float)


def _ridge_cov(points: np.ndarray) -> np.ndarray:
    """Sample covariance with a floor keeping it usable as an IW scale."""
    p = points.shape[1]
    if points.shape[0] < 2:
        return np.eye(p)
    cov = np.cov(points.T).reshape(p, p)
    floor = max(1e-8, 1e-6 * float(np.trace(cov)) / p)
    return symmetrize(cov + floor * np.eye(p))


def _derive_hyper(points: np.ndarray, mean_zero: bool) -> HyperParams:
    """Empirical-Bayes hyper-parameters from starting values."""
    p = points.shape[1]
    cov = _ridge_cov(points)
    mu0 = np.zeros(p) if mean_zero else points.mean(axis=0)
    return HyperParams(
        alpha=1.0, mu0=mu0, sigma0=2.0 * cov, nu0=p + 2.0, psi0=cov.copy()
    )


def _init_mixture(
    points: np.ndarray,
    n_comp: int | None,
    model: str,
    cfg: FitConfig,
    rng: RngStream,
    mean_zero: bool,
) -> tuple[MixtureState, np.ndarray, HyperParams]:
    """Cluster-based starting state for one mixture block."""
    n, p = points.shape
    est, labels, centers = kmeans_bic(points, cfg.cluster_max, rng)
    if n_comp is None:
        n_comp = est + 2
    # Assign starting labels with one extra split: the spherical BIC tends to
    # under-split noisy initializers, factor back-ends are slow to split a
    # merged cluster mid-chain, and a spurious split empties itself out.
    k_eff = min(est + 1, n_comp, n)
    if k_eff != est:
        labels, centers = kmeans_fixed(points, k_eff, rng)
        est = k_eff
    overall_mean = points.mean(axis=0)
    means = np.tile(overall_mean, (n_comp, 1))
    means[:est] = centers
    counts = np.bincount(labels, minlength=n_comp)
    weights = counts / counts.sum()
    hyper = _derive_hyper(points, mean_zero)
    if mean_zero:
        means = means - weights @ means
    if model == "miw":
        covs = np.empty((n_comp, p, p))
        fallback = _ridge_cov(points)
        for k in range(n_comp):
            members = points[labels == k]
            covs[k] = _ridge_cov(members) if members.shape[0] > p + 1 else fallback
        state = MixtureState(weights=weights, means=means, covs=covs)
    else:
        # Omega models the idiosyncratic residual X - mu_k - Lambda eta; with
        # loadings and factors starting at zero its starting value is the
        # within-cluster residual, so initialize from that spread.
        resid0 = points - means[labels]
        omega = np.maximum(resid0.var(axis=0), 1e-8)
        block = FactorBlock.initial(
            n_comp, p, n, omega, per_component=(model == "mlfad")
        )
        if cfg.truncation is not None:
            q = cfg.truncation
            block.loadings = np.zeros((n_comp, p, q))
            block.phi = np.ones((n_comp, p, q))
            block.delta = np.ones((n_comp, q))
            block.eta = np.zeros((n, q))
        state = MixtureState(weights=weights, means=means, factor=block)
    return state, labels, hyper


def kmeans_fixed(points, k, rng):
    """Lloyd clustering at a fixed k (used when an override caps K)."""
    centers = _kmeanspp(points, k, rng)
    labels = np.zeros(points.shape[0], dtype=int)
    for step in range(50):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if np.array_equal(new_labels, labels) and step > 0:
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
    return labels, centers


def initialize(
    data: ReplicateDataset,
    cfg: FitConfig,
    stage1_results: list[Stage1Result] | None = None,
    rng: RngStream | None = None,
) -> ChainState:
    """Starting chain state per the initialization recipe.

    Latent coordinates start at stage-1 posterior means (heteroscedastic)
    or subject means; K defaults to the cluster estimate plus two; factor
    loadings start at zero with idiosyncratic variances from the data.
    """
    if data.n_rows == 0:
        raise EmptyDataset("no observations")
    rng = rng or RngStream(cfg.seed, 900)
    if cfg.heteroscedastic:
        if stage1_results is None:
            raise ValueError("heteroscedastic initialization needs stage-1 results")
        x0 = np.column_stack([r.x_mean for r in stage1_results])
        scale = ScaleField([r.variance_fn for r in stage1_results])
        lo, hi = scale.support()
        x0 = np.clip(x0, lo, hi)
    else:
        x0 = data.subject_means()
        scale = ScaleField.identity()
    model = cfg.model if cfg.model != "naive" else "miw"
    fx, labels_x, hyper_x = _init_mixture(
        x0, cfg.k_x, model, cfg, rng.substream(0), mean_zero=False
    )
    resid = scaled_residuals(data.w, x0[data.subject_index], scale)
    ferr_state, labels_err, hyper_err = _init_mixture(
        resid, cfg.k_err, model, cfg, rng.substream(1), mean_zero=True
    )
    ferr = RestrictedMixture(inner=ferr_state)
    ferr.center()
    state = ChainState(
        x=x0.copy(),
        fx=fx,
        ferr=ferr,
        labels_x=labels_x,
        labels_err=labels_err,
        hyper_x=hyper_x,
        hyper_err=hyper_err,
        scale=scale,
    )
    if cfg.heteroscedastic:
        within = np.sqrt(np.maximum(data.within_subject_variance(), 1e-8))
        state.prop_x = 0.5 * within / np.sqrt(max(float(data.counts.mean()), 1.0))
    return state


def _mixture_block(points, state_mix, labels, hyper, rng):
    """Shared f_X-style sweep: weights, labels, means, covariances."""
    n_comp = state_mix.n_components
    state_mix.weights = update_weights(labels, hyper.alpha, n_comp, rng)
    labels = update_labels(points, state_mix, rng)
    covs_mat = state_mix.materialized_covs()
    state_mix.means = update_means_miw(points, labels, covs_mat, hyper, rng)
    if state_mix.backend == "miw":
        state_mix.covs = update_covs_miw(points, labels, state_mix.means, hyper, rng)
    else:
        update_factor_block(points, labels, state_mix.means, state_mix.factor,
                            hyper, rng)
    return labels


def _error_block(residuals, ferr, labels, hyper, rng):
    """Error-mixture sweep with the constrained mean update."""
    inner = ferr.inner
    n_comp = inner.n_components
    inner.weights = update_weights(labels, hyper.alpha, n_comp, rng)
    labels = update_labels(residuals, inner, rng)
    covs_mat = inner.materialized_covs()
    mu0, sigma0 = unconstrained_mean_conditional(residuals, labels, covs_mat, hyper)
    inner.means = draw_constrained_means(mu0, sigma0, inner.weights, rng)
    if inner.backend == "miw":
        inner.covs = update_covs_miw(residuals, labels, inner.means, hyper, rng)
    else:
        update_factor_block(residuals, labels, inner.means, inner.factor, hyper, rng)
    return labels


def _component_precisions(covs: np.ndarray):
    """Stacked inverses and log-determinants via Cholesky."""
    n_comp, p, _ = covs.shape
    precs = np.empty_like(covs)
    logdets = np.empty(n_comp)
    for k in range(n_comp):
        chol = chol_factor(covs[k])
        inv_chol = np.linalg.inv(chol)
        precs[k] = inv_chol.T @ inv_chol
        logdets[k] = chol_logdet(chol)
    return precs, logdets


def update_latent_closed_form(
    state: ChainState, data: ReplicateDataset, rng: RngStream
) -> None:
    """Exact conditional draw of every latent vector (homoscedastic case)."""
    precs_x, _ = _component_precisions(state.fx.materialized_covs())
    precs_e, _ = _component_precisions(state.ferr.inner.materialized_covs())
    n, p = state.x.shape
    k_err = state.ferr.inner.n_components
    lab_counts = np.zeros((n, k_err))
    np.add.at(lab_counts, (data.subject_index, state.labels_err), 1.0)
    prec = precs_x[state.labels_x] + np.einsum("ik,kpq->ipq", lab_counts, precs_e)
    adj = data.w - state.ferr.inner.means[state.labels_err]
    contrib = np.einsum("npq,nq->np", precs_e[state.labels_err], adj)
    rhs = np.einsum("ipq,iq->ip", precs_x[state.labels_x],
                    state.fx.means[state.labels_x])
    np.add.at(rhs, data.subject_index, contrib)
    state.x = sample_mvn_from_precision(prec, rhs, rng)


def gibbs_sweep_homoscedastic(
    state: ChainState, data: ReplicateDataset, rng: RngStream
) -> ChainState:
    """One sweep with the closed-form latent update."""
    state.labels_x = _mixture_block(state.x, state.fx, state.labels_x,
                                    state.hyper_x, rng)
    resid = data.w - state.x[data.subject_index]
    state.labels_err = _error_block(resid, state.ferr, state.labels_err,
                                    state.hyper_err, rng)
    update_latent_closed_form(state, data, rng)
    state.iteration += 1
    return state


def _x_log_target_hetero(x, state, data, precs_e, logdets_e):
    """Per-subject log target for the heteroscedastic latent update."""
    n = x.shape[0]
    scales = state.scale.scale_at(x)
    resid = (data.w - x[data.subject_index]) / scales[data.subject_index]
    dev = resid - state.ferr.inner.means[state.labels_err]
    quad = np.einsum("np,npq,nq->n", dev, precs_e[state.labels_err], dev)
    row_ll = -0.5 * (quad + logdets_e[state.labels_err])
    total = np.bincount(data.subject_index, weights=row_ll, minlength=n)
    total -= data.counts * np.log(scales).sum(axis=1)
    covs_x = state.fx.materialized_covs()
    for k in range(state.fx.n_components):
        members = np.flatnonzero(state.labels_x == k)
        if members.size:
            total[members] += mvn_logpdf(
                x[members], state.fx.means[k], chol_factor(covs_x[k])
            )
    return total


def update_latent_mh(
    state: ChainState, data: ReplicateDataset, rng: RngStream
) -> None:
    """Componentwise truncated-normal MH move of every latent vector."""
    precs_e, logdets_e = _component_precisions(state.ferr.inner.materialized_covs())
    n, p = state.x.shape
    lo, hi = state.scale.support()
    prop = state.prop_x
    if prop is None or np.all(prop <= 0.0):
        state.accept_x = 1.0
        return
    x_new = sample_truncated_normal(
        state.x, prop[None, :], lo[None, :], hi[None, :], rng
    )
    log_cur = _x_log_target_hetero(state.x, state, data, precs_e, logdets_e)
    log_new = _x_log_target_hetero(x_new, state, data, precs_e, logdets_e)
    z_cur = ndtr((hi - state.x) / prop) - ndtr((lo - state.x) / prop)
    z_new = ndtr((hi - x_new) / prop) - ndtr((lo - x_new) / prop)
    correction = np.log(z_cur).sum(axis=1) - np.log(z_new).sum(axis=1)
    log_acc = log_new - log_cur + correction
    accept = np.log(rng.gen.random(n)) < log_acc
    state.x = np.where(accept[:, None], x_new, state.x)
    state.accept_x = float(accept.mean())
    if state.adapting:
        state._acc_window.append(state.accept_x)
        if len(state._acc_window) >= _ADAPT_WINDOW:
            rate = float(np.mean(state._acc_window))
            span = hi - lo
            state.prop_x = np.clip(
                state.prop_x * np.exp(rate - _TARGET_RATE), 1e-4 * span, span
            )
            state._acc_window.clear()


def gibbs_sweep_heteroscedastic(
    state: ChainState, data: ReplicateDataset, rng: RngStream
) -> ChainState:
    """One sweep with MH latent updates against the frozen scale field."""
    state.labels_x = _mixture_block(state.x, state.fx, state.labels_x,
                                    state.hyper_x, rng)
    resid = scaled_residuals(data.w, state.x[data.subject_index], state.scale)
    state.labels_err = _error_block(resid, state.ferr, state.labels_err,
                                    state.hyper_err, rng)
    update_latent_mh(state, data, rng)
    state.iteration += 1
    return state


@dataclass
class PosteriorSummary:
    """Retained mixture states for f_X plus chain diagnostics."""

    weights: np.ndarray  # (T, K)
    means: np.ndarray  # (T, K, p)
    covs: np.ndarray  # (T, K, p, p)
    model: str
    nonempty_x: np.ndarray  # per-iteration trace
    nonempty_err: np.ndarray
    accept_x: float | None = None

    @property
    def n_retained(self) -> int:
        return self.weights.shape[0]

    def flat_mixture(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t, k = self.weights.shape
        w = (self.weights / t).reshape(t * k)
        means = self.means.reshape(t * k, -1)
        covs = self.covs.reshape(t * k, means.shape[1], means.shape[1])
        return w, means, covs

    def density(self, points: np.ndarray) -> np.ndarray:
        """Posterior-mean density (average of retained mixture densities)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        w, means, covs = self.flat_mixture()
        out = np.zeros(points.shape[0])
        for c in range(w.shape[0]):
            if w[c] <= 0.0:
                continue
            out += w[c] * np.exp(mvn_logpdf(points, means[c], chol_factor(covs[c])))
        return out


@dataclass
class DensityGrid:
    """Axes, averaged density values, and 1D/2D marginal tables."""

    axes: list[np.ndarray]
    marginals_1d: np.ndarray  # (p, G)
    marginals_2d: dict  # {(a, b): (G, G)}
    values: np.ndarray | None = None  # dense joint, only stored for p <= 2


def _gauss1d(grid, mean, var):
    return np.exp(-0.5 * (grid - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)


def build_density_grid(summary: PosteriorSummary, axes: list[np.ndarray]) -> DensityGrid:
    """Analytic 1D and pairwise-2D marginals of the posterior-mean mixture."""
    w, means, covs = summary.flat_mixture()
    p = means.shape[1]
    g = len(axes[0])
    marg1 = np.zeros((p, g))
    live = w > 0.0
    for d in range(p):
        for c in np.flatnonzero(live):
            marg1[d] += w[c] * _gauss1d(axes[d], means[c, d], covs[c, d, d])
    marg2 = {}
    for a in range(p):
        for b in range(a + 1, p):
            ga, gb = np.meshgrid(axes[a], axes[b], indexing="ij")
            dens = np.zeros_like(ga)
            for c in np.flatnonzero(live):
                sub = covs[c][np.ix_([a, b], [a, b])]
                det = sub[0, 0] * sub[1, 1] - sub[0, 1] ** 2
                det = max(det, 1e-300)
                da = ga - means[c, a]
                db = gb - means[c, b]
                quad = (
                    sub[1, 1] * da**2 - 2 * sub[0, 1] * da * db + sub[0, 0] * db**2
                ) / det
                dens += w[c] * np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(det))
            marg2[(a, b)] = dens
    values = None
    if p == 1:
        values = marg1[0].copy()
    elif p == 2:
        values = marg2[(0, 1)].copy()
    return DensityGrid(axes=axes, marginals_1d=marg1, marginals_2d=marg2,
                       values=values)


@dataclass
class FitResult:
    grid: DensityGrid
    posterior: PosteriorSummary
    diagnostics: dict


def _grid_axes(data: ReplicateDataset, n_points: int) -> list[np.ndarray]:
    lo, hi = support_bounds(data)
    return [np.linspace(lo[d], hi[d], n_points) for d in range(data.dim)]


def _run_chain(state, data, cfg, rng, sweep):
    """Drive sweeps, collect retained states and traces."""
    retained_w, retained_m, retained_c = [], [], []
    trace_x, trace_err, acc = [], [], []
    for it in range(cfg.iterations):
        if it >= cfg.burn_in:
            state.adapting = False
        sweep(state, data, rng)
        trace_x.append(int(np.sum(state.fx.weights > EMPTY_WEIGHT)))
        trace_err.append(int(np.sum(state.ferr.inner.weights > EMPTY_WEIGHT)))
        acc.append(state.accept_x)
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            retained_w.append(state.fx.weights.copy())
            retained_m.append(state.fx.means.copy())
            retained_c.append(state.fx.materialized_covs().copy())
    summary = PosteriorSummary(
        weights=np.asarray(retained_w),
        means=np.asarray(retained_m),
        covs=np.asarray(retained_c),
        model=cfg.model,
        nonempty_x=np.asarray(trace_x),
        nonempty_err=np.asarray(trace_err),
        accept_x=float(np.mean(acc[cfg.burn_in:])) if cfg.heteroscedastic else None,
    )
    return summary


def run_fit(
    data: ReplicateDataset,
    cfg: FitConfig,
    stage1_results: list[Stage1Result] | None = None,
    jobs: int = 1,
) -> FitResult:
    """Full pipeline: stage 1 (if heteroscedastic), initialize, sweep, grid."""
    if cfg.model == "naive":
        return fit_naive(data, cfg)
    rng = RngStream(cfg.seed)
    diagnostics: dict = {"model": cfg.model, "heteroscedastic": cfg.heteroscedastic}
    if cfg.heteroscedastic and stage1_results is None:
        logger.info("running stage-1 univariate fits")
        stage1_results = fit_stage1(data, cfg.stage1, rng.substream(1), jobs=jobs)
        diagnostics["stage1_accept_x"] = [r.accept_x for r in stage1_results]
    state = initialize(data, cfg, stage1_results, rng.substream(2))
    diagnostics["k_x"] = state.fx.n_components
    diagnostics["k_err"] = state.ferr.inner.n_components
    sweep = (
        gibbs_sweep_heteroscedastic if cfg.heteroscedastic
        else gibbs_sweep_homoscedastic
    )
    summary = _run_chain(state, data, cfg, rng.substream(3), sweep)
    diagnostics["nonempty_x_trace"] = summary.nonempty_x.tolist()
    diagnostics["nonempty_err_trace"] = summary.nonempty_err.tolist()
    if summary.accept_x is not None:
        diagnostics["accept_x"] = summary.accept_x
    grid = build_density_grid(summary, _grid_axes(data, cfg.grid_points))
    return FitResult(grid=grid, posterior=summary, diagnostics=diagnostics)


def fit_naive(data: ReplicateDataset, cfg: FitConfig) -> FitResult:
    """Mixture fit that treats subject means as exact observations."""
    rng = RngStream(cfg.seed)
    points = data.subject_means()
    mix, labels, hyper = _init_mixture(
        points, cfg.k_x, "miw", cfg, rng.substream(2), mean_zero=False
    )
    retained_w, retained_m, retained_c, trace = [], [], [], []
    chain_rng = rng.substream(3)
    for it in range(cfg.iterations):
        labels = _mixture_block(points, mix, labels, hyper, chain_rng)
        trace.append(int(np.sum(mix.weights > EMPTY_WEIGHT)))
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            retained_w.append(mix.weights.copy())
            retained_m.append(mix.means.copy())
            retained_c.append(mix.materialized_covs().copy())
    summary = PosteriorSummary(
        weights=np.asarray(retained_w),
        means=np.asarray(retained_m),
        covs=np.asarray(retained_c),
        model="naive",
        nonempty_x=np.asarray(trace),
        nonempty_err=np.zeros(0, dtype=int),
    )
    grid = build_density_grid(summary, _grid_axes(data, cfg.grid_points))
    diagnostics = {
        "model": "naive",
        "heteroscedastic": False,
        "k_x": mix.n_components,
        "nonempty_x_trace": summary.nonempty_x.tolist(),
    }
    return FitResult(grid=grid, posterior=summary, diagnostics=diagnostics)
