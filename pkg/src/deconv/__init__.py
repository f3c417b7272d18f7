"""Bayesian semiparametric multivariate density deconvolution.

Recovers the density of a latent vector X from replicated proxies
W_ij = X_i + U_ij with unknown, possibly conditionally heteroscedastic
error distributions, using finite-mixture Gibbs samplers with either
inverse-Wishart or latent-factor covariance back-ends.
"""

from .dataset import ReplicateDataset, read_csv
from .deconvolver import ChainState, DensityGrid, FitConfig, FitResult, fit_naive, run_fit
from .error_model import RestrictedMixture, ScaleField, scaled_residuals
from .mixture import FactorBlock, HyperParams, MixtureState, mixture_density
from .simulation import Scenario, SimResult, generate_dataset, mise_estimate
from .splines import KnotVector, VarianceFunction, bspline_basis, second_difference_penalty
from .stage1 import PelenisComponent, Stage1Settings, fit_stage1, pelenis_expand
from .stats_core import RngStream, chol_factor, sample_dirichlet, sample_inverse_wishart, sample_mvn, sample_truncated_normal

__version__ = "0.1.0"

__all__ = [
    "ChainState",
    "DensityGrid",
    "FactorBlock",
    "FitConfig",
    "FitResult",
    "HyperParams",
    "KnotVector",
    "MixtureState",
    "PelenisComponent",
    "ReplicateDataset",
    "RestrictedMixture",
    "RngStream",
    "ScaleField",
    "Scenario",
    "SimResult",
    "Stage1Settings",
    "VarianceFunction",
    "bspline_basis",
    "chol_factor",
    "fit_naive",
    "fit_stage1",
    "generate_dataset",
    "mise_estimate",
    "mixture_density",
    "pelenis_expand",
    "read_csv",
    "run_fit",
    "sample_dirichlet",
    "sample_inverse_wishart",
    "sample_mvn",
    "sample_truncated_normal",
    "scaled_residuals",
    "second_difference_penalty",
]
