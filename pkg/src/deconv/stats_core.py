"""Deterministic-seeded sampling and the dense linear-algebra kernels.

SPD matrices are plain ``(p, p)`` float ndarrays throughout the package;
``chol_factor`` owns the jitter policy for nearly singular inputs.  All
samplers draw from an :class:`RngStream`, so identical ``(seed, stream)``
pairs reproduce identical sequences across runs and platforms.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr, ndtri_exp

from .errors import (
    DimensionMismatch,
    EmptyInterval,
    InvalidDegreesOfFreedom,
    NonPositiveConcentration,
    NotPositiveDefinite,
)

_LOG_2PI = float(np.log(2.0 * np.pi))

# Base additive jitter is 1e-10 * mean(diag), doubled up to this many times.
_JITTER_BASE = 1e-10
_JITTER_DOUBLINGS = 6


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream)``.

    A single stream must not be shared across threads; spawn one stream per
    concurrent chain instead.
    """

    def __init__(self, seed: int, stream: int = 0, _key: tuple[int, ...] | None = None):
        self.seed = int(seed)
        self.stream = int(stream)
        self._key = _key if _key is not None else (self.stream,)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, k: int) -> "RngStream":
        """Derived independent stream; deterministic in (seed, stream, k)."""
        return RngStream(self.seed, self.stream, _key=self._key + (int(k),))

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, key={self._key})"


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Average a nearly symmetric matrix with its transpose."""
    return 0.5 * (m + m.T)


def require_symmetric(m: np.ndarray, rtol: float = 1e-12) -> None:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {m.shape}")
    scale = max(float(np.abs(m).max()), 1.0)
    if float(np.abs(m - m.T).max()) > rtol * scale:
        raise NotPositiveDefinite("matrix is not symmetric")


def chol_factor(m: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix.

    Near-singular inputs get additive jitter ``1e-10 * mean(diag)`` on the
    diagonal, doubled up to 6 times before :class:`NotPositiveDefinite` is
    raised.
    """
    m = np.asarray(m, dtype=float)
    require_symmetric(m)
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    diag_mean = float(np.mean(np.diag(m)))
    base = _JITTER_BASE * (abs(diag_mean) if diag_mean != 0.0 else 1.0)
    eye = np.eye(m.shape[0])
    jitter = base
    for _ in range(_JITTER_DOUBLINGS + 1):
        try:
            return np.linalg.cholesky(m + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise NotPositiveDefinite(
        f"Cholesky failed after jitter up to {jitter / 2.0:.3e}"
    )


def sample_mvn(mean: np.ndarray, chol: np.ndarray, rng: RngStream) -> np.ndarray:
    """Draw ``mean + L z`` with ``z`` iid standard normal."""
    mean = np.asarray(mean, dtype=float)
    chol = np.asarray(chol, dtype=float)
    if chol.shape != (mean.shape[0], mean.shape[0]):
        raise DimensionMismatch(
            f"mean has dim {mean.shape[0]} but factor has shape {chol.shape}"
        )
    z = rng.gen.standard_normal(mean.shape[0])
    return mean + chol @ z


def sample_inverse_wishart(df: float, scale: np.ndarray, rng: RngStream) -> np.ndarray:
    """Inverse-Wishart draw with mean ``scale / (df - p - 1)`` for ``df > p + 1``.

    Sampled by Bartlett decomposition of the Wishart of the inverse: with
    ``A`` the Bartlett factor of Wishart(df, I) and ``L = chol(scale)``, the
    draw is ``(L A^{-T})(L A^{-T})^T``.
    """
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if not df > p - 1:
        raise InvalidDegreesOfFreedom(f"need df > {p - 1}, got {df}")
    chi2 = rng.gen.chisquare(df - np.arange(p))
    # Floor the Bartlett chi-squares so draws stay verifiably SPD when df sits
    # within ~1e-6 of the boundary (where the exact law spans magnitudes float64
    # cannot represent); for df - p + 1 >= 1 the floor fires with prob < 1e-18.
    a = np.diag(np.sqrt(np.maximum(chi2, 1e-12)))
    idx = np.tril_indices(p, k=-1)
    a[idx] = rng.gen.standard_normal(len(idx[0]))
    l_scale = chol_factor(scale)
    # y^T solves A y^T = L^T, so y = L A^{-T}
    y = solve_triangular(a, l_scale.T, lower=True, check_finite=False).T
    return symmetrize(y @ y.T)


def sample_dirichlet(conc: np.ndarray, rng: RngStream) -> np.ndarray:
    """Dirichlet draw; stable for arbitrarily small concentrations.

    Uses the boost Gamma(a) = Gamma(a+1) * U^{1/a} in log space so that
    normalization never divides by an underflowed sum.
    """
    conc = np.atleast_1d(np.asarray(conc, dtype=float))
    if np.any(conc <= 0.0) or not np.all(np.isfinite(conc)):
        raise NonPositiveConcentration(f"concentrations must be > 0, got {conc}")
    g = rng.gen.gamma(conc + 1.0)
    u = np.clip(rng.gen.random(conc.shape), 1e-300, 1.0 - 1e-16)
    log_g = np.log(np.maximum(g, 1e-300)) + np.log(u) / conc
    log_g -= log_g.max()
    w = np.exp(log_g)
    w /= w.sum()
    return w


def sample_truncated_normal(
    mean, sd, lo, hi, rng: RngStream
) -> np.ndarray | float:
    """Truncated-normal draw on ``[lo, hi]`` by inverse CDF.

    Arguments broadcast; ``lo=-inf`` / ``hi=+inf`` disable the corresponding
    bound.  Tails are handled in log space, so intervals many standard
    deviations out remain exact.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(sd <= 0.0):
        raise EmptyInterval("sd must be > 0")
    if np.any(~(lo < hi)):
        raise EmptyInterval("need lo < hi")
    shape = np.broadcast_shapes(mean.shape, sd.shape, lo.shape, hi.shape)
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    a, b = np.broadcast_to(a, shape).copy(), np.broadcast_to(b, shape).copy()
    # Reflect right-leaning intervals so ndtri_exp always works in the left
    # tail, where log Phi is well conditioned.  (-inf + inf) -> nan -> no flip.
    with np.errstate(invalid="ignore"):
        mid = a + b
    flip = np.nan_to_num(mid, nan=0.0, posinf=1.0, neginf=-1.0) > 0.0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)
    la = log_ndtr(a2)
    lb = log_ndtr(b2)
    u = np.clip(rng.gen.random(shape), 1e-300, 1.0 - 1e-16)
    log_p = np.logaddexp(np.log1p(-u) + la, np.log(u) + lb)
    z = ndtri_exp(log_p)
    z = np.clip(z, a2, b2)
    z = np.where(flip, -z, z)
    out = mean + sd * np.asarray(z)
    out = np.clip(out, lo, hi)
    if out.ndim == 0:
        return float(out)
    return out


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log density of MVN(mean, L L^T) at rows of ``x``; returns ``(n,)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dev = x - np.asarray(mean, dtype=float)
    sol = solve_triangular(chol, dev.T, lower=True, check_finite=False)
    quad = np.einsum("ij,ij->j", sol, sol)
    logdet = np.sum(np.log(np.diag(chol)))
    return -0.5 * (quad + x.shape[1] * _LOG_2PI) - logdet


def chol_logdet(chol: np.ndarray) -> float:
    """log det of L L^T given its Cholesky factor L."""
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def sample_mvn_from_precision(
    prec: np.ndarray, rhs: np.ndarray, rng: RngStream
) -> np.ndarray:
    """Batched draw from N(P^{-1} r, P^{-1}) given stacked precisions.

    ``prec`` has shape ``(n, p, p)`` and ``rhs`` shape ``(n, p)``.  Used by
    the latent-coordinate updates where every subject gets its own precision.
    """
    prec = np.asarray(prec, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n, p = rhs.shape
    l = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    z = rng.gen.standard_normal((n, p))
    lt = np.swapaxes(l, 1, 2)
    shift = np.linalg.solve(lt, z[..., None])[..., 0]
    return mean + shift
