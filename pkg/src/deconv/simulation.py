"""Scenario generators and the Monte Carlo MISE evaluator.

Covers the four covariance structures (I, LF, AR, EXP), the two normal
error laws plus multivariate-t and multivariate-Laplace generators, the
multiplicative heteroscedastic truth s^2(x) = (1 + x/4)^2, and the
importance-sampling ISE/MISE estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ReplicateDataset
from .errors import UnknownStructure, ZeroImportanceDensity
from .stats_core import RngStream, chol_factor, mvn_logpdf

# Component means and weights of the reference truth for f_X (p = 4).
TRUTH_WEIGHTS = np.array([0.25, 0.50, 0.25])
TRUTH_MEANS = np.array(
    [
        [0.8, 6.0, 4.0, 5.0],
        [2.5, 4.0, 5.0, 6.0],
        [6.0, 4.0, 2.0, 4.0],
    ]
)
# Mixture error law: first two component means, third closes the constraint.
ERROR_MIX_WEIGHTS = np.array([0.2, 0.6, 0.2])
ERROR_MIX_MEANS_HEAD = np.array(
    [
        [-0.3, 0.0, 0.3, 0.0],
        [-0.5, 0.4, 0.5, 0.0],
    ]
)

X_SCALE = 0.75  # diagonal of D_X squared
EPS_SCALE = 0.3  # diagonal of D_eps squared


def structure_matrix(structure: str, p: int, role: str = "x") -> np.ndarray:
    """Base covariance Sigma_0 for the named structure, before D scaling."""
    if role not in ("x", "eps"):
        raise ValueError("role must be 'x' or 'eps'")
    if structure == "I":
        return np.eye(p)
    if structure == "LF":
        load, idio = (0.7, 0.51) if role == "x" else (0.5, 0.75)
        lam = np.full((p, 1), load)
        return lam @ lam.T + idio * np.eye(p)
    idx = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    if structure == "AR":
        rho = 0.7 if role == "x" else 0.5
        return rho**idx
    if structure == "EXP":
        decay = 0.5 if role == "x" else 0.9
        return np.exp(-decay * idx)
    raise UnknownStructure(f"unknown covariance structure {structure!r}")


def build_covariance(
    structure: str, p: int, role: str = "x", scale: float | None = None
) -> np.ndarray:
    """Structure matrix conjugated by D = diag(scale^{1/2})."""
    if scale is None:
        scale = X_SCALE if role == "x" else EPS_SCALE
    return scale * structure_matrix(structure, p, role)


def error_mixture_means(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Weights and means of the mixture error law; the last mean closes
    sum_k pi_k mu_k = 0 exactly."""
    head = ERROR_MIX_MEANS_HEAD[:, :p]
    w = ERROR_MIX_WEIGHTS
    closing = -(w[0] * head[0] + w[1] * head[1]) / w[2]
    return w, np.vstack([head, closing[None, :]])


@dataclass(frozen=True)
class Scenario:
    """One simulation cell: truth mixture, error law, structure, sizes."""

    n: int
    m: int
    p: int = 4
    structure: str = "I"
    error_law: str = "normal"  # normal | mixture | mvt | mvl
    heteroscedastic: bool = False
    t_dof: float = 6.0
    x_scale: float = X_SCALE
    eps_scale: float = EPS_SCALE
    truth_weights: np.ndarray = field(default_factory=lambda: TRUTH_WEIGHTS.copy())
    truth_means: np.ndarray = field(default_factory=lambda: TRUTH_MEANS.copy())

    def __post_init__(self):
        if self.error_law not in ("normal", "mixture", "mvt", "mvl"):
            raise ValueError(f"unknown error law {self.error_law!r}")
        object.__setattr__(
            self, "truth_weights", np.asarray(self.truth_weights, dtype=float)
        )
        means = np.asarray(self.truth_means, dtype=float)[:, : self.p]
        object.__setattr__(self, "truth_means", means)

    def x_cov(self) -> np.ndarray:
        return build_covariance(self.structure, self.p, "x", self.x_scale)

    def eps_cov(self) -> np.ndarray:
        return build_covariance(self.structure, self.p, "eps", self.eps_scale)


def variance_fn_true(x: np.ndarray) -> np.ndarray:
    """Heteroscedastic truth s^2(x) = (1 + x/4)^2, elementwise."""
    return (1.0 + np.asarray(x) / 4.0) ** 2


class TruthDensity:
    """Exactly evaluable mixture truth for f_X."""

    def __init__(self, weights: np.ndarray, means: np.ndarray, covs: np.ndarray):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 2:
            covs = np.repeat(covs[None, :, :], self.weights.shape[0], axis=0)
        self.covs = covs
        self._chols = [chol_factor(c) for c in self.covs]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dens = np.zeros(x.shape[0])
        for k, w in enumerate(self.weights):
            dens += w * np.exp(mvn_logpdf(x, self.means[k], self._chols[k]))
        return dens

    def sample(self, size: int, rng: RngStream) -> np.ndarray:
        comp = rng.gen.choice(len(self.weights), size=size, p=self.weights)
        z = rng.gen.standard_normal((size, self.dim))
        out = np.empty((size, self.dim))
        for k in range(len(self.weights)):
            members = comp == k
            out[members] = self.means[k] + z[members] @ self._chols[k].T
        return out

    def uniform_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Hypercube with edges min_k(mu_k) - 3 and max_k(mu_k) + 3."""
        return self.means.min(axis=0) - 3.0, self.means.max(axis=0) + 3.0

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TruthDensity":
        return TruthDensity(
            np.asarray(d["weights"]), np.asarray(d["means"]), np.asarray(d["covs"])
        )


def truth_density(scenario: Scenario) -> TruthDensity:
    return TruthDensity(
        scenario.truth_weights, scenario.truth_means, scenario.x_cov()
    )


def sample_truth_x(scenario: Scenario, rng: RngStream, size: int = 1) -> np.ndarray:
    """Draws from the scenario's mixture truth, shape (size, p)."""
    return truth_density(scenario).sample(size, rng)


def sample_error(scenario: Scenario, rng: RngStream, size: int = 1) -> np.ndarray:
    """Draws from the configured (scaled-)error law, shape (size, p)."""
    p = scenario.p
    cov = scenario.eps_cov()
    chol = chol_factor(cov)
    z = rng.gen.standard_normal((size, p))
    if scenario.error_law == "normal":
        return z @ chol.T
    if scenario.error_law == "mixture":
        w, means = error_mixture_means(p)
        comp = rng.gen.choice(len(w), size=size, p=w)
        return means[comp] + z @ chol.T
    if scenario.error_law == "mvt":
        nu = scenario.t_dof
        y = rng.gen.chisquare(nu, size=size)
        return np.sqrt(nu) * (z @ chol.T) / np.sqrt(y)[:, None]
    # multivariate Laplace: exponential scale mixture of normals
    y = rng.gen.standard_exponential(size=size)
    return np.sqrt(y)[:, None] * (z @ chol.T)


def generate_dataset(
    scenario: Scenario, rng: RngStream
) -> tuple[ReplicateDataset, TruthDensity]:
    """Simulate W_ij = X_i + S(X_i) eps_ij with m replicates per subject."""
    n, m = scenario.n, scenario.m
    x = sample_truth_x(scenario, rng, size=n)
    eps = sample_error(scenario, rng, size=n * m)
    subject_index = np.repeat(np.arange(n), m)
    x_rows = x[subject_index]
    if scenario.heteroscedastic:
        scales = np.sqrt(np.maximum(variance_fn_true(x_rows), 1e-16))
        w = x_rows + scales * eps
    else:
        w = x_rows + eps
    data = ReplicateDataset(
        w=w,
        subject_index=subject_index,
        rep_index=np.tile(np.arange(m), n),
        subject_ids=np.arange(n),
    )
    return data, truth_density(scenario)


@dataclass
class SimResult:
    """Per-replication ISE values and the aggregated MISE estimate."""

    ise: np.ndarray
    mise: float
    mc_se: float
    n_points: int
    p0: str

    def to_dict(self) -> dict:
        return {
            "ise": self.ise.tolist(),
            "mise": self.mise,
            "mc_se": self.mc_se,
            "n_points": self.n_points,
            "p0": self.p0,
        }


def mise_estimate(
    truth: TruthDensity,
    fits,
    p0: str,
    n_points: int,
    rng: RngStream,
    batch: int = 20000,
) -> SimResult:
    """Importance-sampling MISE over the fitted replications.

    ``fits`` is a sequence of density evaluators (callables mapping (M, p)
    points to densities), one per replication.  ``p0`` is either ``"truth"``
    (sample from f_X) or ``"uniform"`` (hypercube from the truth means).
    Each per-replication ISE averages M evaluation points, so the estimator
    is unbiased for the integrated squared error.
    """
    if p0 not in ("truth", "uniform"):
        raise ValueError("p0 must be 'truth' or 'uniform'")
    lo, hi = truth.uniform_box()
    box_density = 1.0 / float(np.prod(hi - lo))
    ises = np.empty(len(fits))
    for b, fit in enumerate(fits):
        sub = rng.substream(b)
        total = 0.0
        done = 0
        while done < n_points:
            take = min(batch, n_points - done)
            if p0 == "truth":
                pts = truth.sample(take, sub)
                dens0 = truth.pdf(pts)
            else:
                u = sub.gen.random((take, truth.dim))
                pts = lo + u * (hi - lo)
                dens0 = np.full(take, box_density)
            if np.any(dens0 <= 0.0):
                raise ZeroImportanceDensity(
                    "importance density vanished at a sampled point"
                )
            f_true = truth.pdf(pts) if p0 != "truth" else dens0
            diff = f_true - np.asarray(fit(pts))
            total += float(np.sum(diff**2 / dens0))
            done += take
        ises[b] = total / n_points
    mise = float(np.mean(ises))
    if len(ises) > 1:
        mc_se = float(np.std(ises, ddof=1) / np.sqrt(len(ises)))
    else:
        mc_se = float("nan")
    return SimResult(ise=ises, mise=mise, mc_se=mc_se, n_points=n_points, p0=p0)
