"""Domain types and the pure mathematical core of the rating model.

An entity's ratings are noisy ordinal readouts of a latent quality function
f(t) with a linear-in-covariates mean and an exponential-decay covariance in
time.  The readout is an ordered probit: the latent value plus Gaussian noise
of scale kappa is binned by an increasing cutpoint vector derived from a
probability simplex eta.  Everything in this module is a pure function over
immutable inputs; both estimation backends build on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cholesky as _cholesky
from scipy.linalg import solve_triangular
from scipy.special import ndtr, ndtri

from .errors import InvalidInputError, NumericalError

LOG_PROB_FLOOR = 1e-300  # probit cells underflow for |f| large; floored before log
JITTER_BASE = 1e-8       # relative to sigma^2
JITTER_MAX = 1e-4

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReviewRecord:
    """One rating event: who was rated, what, when, and the review features."""

    entity_id: str
    rating: int
    timestamp: float
    covariates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float))
        if not np.isfinite(self.timestamp):
            raise InvalidInputError(f"non-finite timestamp for entity {self.entity_id!r}")
        if int(self.rating) != self.rating or self.rating < 1:
            raise InvalidInputError(f"rating must be a positive integer, got {self.rating!r}")


@dataclass(eq=False)
class EntityHistory:
    """Time-ordered rating sequence of a single entity.

    Stored as parallel arrays for numerical work: ``timestamps`` (n,) strictly
    increasing fractional years, ``ratings`` (n,) integers in 1..n_r, and
    ``covariates`` (n, d).
    """

    entity_id: str
    timestamps: np.ndarray
    ratings: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.ratings = np.asarray(self.ratings, dtype=np.int64)
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        n = self.timestamps.shape[0]
        if n < 1:
            raise InvalidInputError(f"entity {self.entity_id!r} has no ratings")
        if self.ratings.shape != (n,) or self.covariates.shape[0] != n:
            raise InvalidInputError(f"entity {self.entity_id!r}: array lengths disagree")
        if not np.all(np.isfinite(self.timestamps)):
            raise InvalidInputError(f"entity {self.entity_id!r}: non-finite timestamps")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise InvalidInputError(
                f"entity {self.entity_id!r}: timestamps must be strictly increasing"
            )
        if np.any(self.ratings < 1):
            raise InvalidInputError(f"entity {self.entity_id!r}: ratings must be >= 1")

    @property
    def n(self) -> int:
        return self.timestamps.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    @cached_property
    def distances(self) -> np.ndarray:
        """Pairwise |t_j - t_k| matrix, cached (kernel evaluations reuse it)."""
        t = self.timestamps
        return np.abs(t[:, None] - t[None, :])

    @classmethod
    def from_records(cls, entity_id: str, records) -> "EntityHistory":
        recs = sorted(records, key=lambda r: r.timestamp)
        return cls(
            entity_id=entity_id,
            timestamps=np.array([r.timestamp for r in recs], dtype=float),
            ratings=np.array([r.rating for r in recs], dtype=np.int64),
            covariates=np.array([r.covariates for r in recs], dtype=float),
        )


@dataclass(frozen=True)
class KernelParams:
    """Exponential-kernel parameters: length scale rho (years) and amplitude sigma."""

    rho: float
    sigma: float

    def __post_init__(self):
        if not (self.rho > 0 and self.sigma > 0):
            raise InvalidInputError("kernel parameters must be positive")


@dataclass(eq=False)
class EmissionParams:
    """Ordered-probit readout: noise scale kappa and rating simplex eta.

    The cutpoints are derived, c_j = kappa * Phi^-1(eta_1 + ... + eta_j), so
    that at latent value 0 the rating distribution is exactly eta.
    """

    kappa: float
    eta: np.ndarray
    cutpoints: np.ndarray = field(init=False)

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if not self.kappa > 0:
            raise InvalidInputError("kappa must be positive")
        if self.eta.ndim != 1 or self.eta.size < 2:
            raise InvalidInputError("eta must be a 1-d simplex of length >= 2")
        if np.any(self.eta <= 0) or abs(self.eta.sum() - 1.0) > 1e-12:
            raise InvalidInputError("eta entries must be positive and sum to 1")
        self.cutpoints = cutpoints_from_eta(self.eta, self.kappa)

    @property
    def n_r(self) -> int:
        return self.eta.size


@dataclass(frozen=True)
class MeanCoefficients:
    """Pooled linear mean coefficients theta (no separate intercept)."""

    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if self.theta.ndim != 1 or not np.all(np.isfinite(self.theta)):
            raise InvalidInputError("theta must be a finite 1-d vector")


@dataclass(eq=False)
class LatentValues:
    """Latent quality values f aligned with one entity's rating order."""

    f: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if not np.all(np.isfinite(self.f)):
            raise InvalidInputError("latent values must be finite")


@dataclass(eq=False)
class ModelParams:
    """One complete parameter state: pooled theta plus per-entity params."""

    theta: MeanCoefficients
    kernel: dict
    emission: dict


# ---------------------------------------------------------------------------
# kernel and mean
# ---------------------------------------------------------------------------

def cutpoints_from_eta(eta, kappa):
    """Map a rating simplex to ordered-probit cutpoints.

    c_j = kappa * Phi^-1(cumsum(eta)_j) for j = 1..n_r-1; strictly increasing
    whenever eta is a valid simplex with positive entries.
    """
    eta = np.asarray(eta, dtype=float)
    cum = np.cumsum(eta)[:-1]
    return kappa * ndtri(cum)


def eta_from_cutpoints(cutpoints, kappa):
    """Inverse of :func:`cutpoints_from_eta` (used for round-trip checks)."""
    cum = ndtr(np.asarray(cutpoints, dtype=float) / kappa)
    full = np.concatenate([cum, [1.0]])
    return np.diff(full, prepend=0.0)


def kernel_matrix(history: EntityHistory, kp: KernelParams, jitter: float | None = None):
    """Exponential-decay covariance over the entity's timestamps.

    K[j, k] = sigma^2 * exp(-|t_j - t_k| / rho) + jitter * 1{j == k}

    Parameters
    ----------
    history : EntityHistory
    kp : KernelParams
    jitter : float, optional
        Diagonal stabilizer.  Defaults to ``1e-8 * sigma**2``; pass 0 for the
        exact kernel.

    Returns
    -------
    (n, n) ndarray, symmetric positive definite for jitter > 0.
    """
    if jitter is None:
        jitter = JITTER_BASE * kp.sigma ** 2
    elif jitter < 0:
        raise InvalidInputError("jitter must be >= 0")
    K = kp.sigma ** 2 * np.exp(-history.distances / kp.rho)
    if jitter:
        K[np.diag_indices_from(K)] += jitter
    return K


def cholesky_with_jitter(K, sigma2, entity_id="?"):
    """Lower Cholesky factor with an escalating diagonal jitter ladder.

    Starts from the matrix as given; on failure adds sigma2-relative jitter
    multiplied by 10 per attempt up to 1e-4 * sigma2, then raises
    :class:`NumericalError` naming the entity.
    """
    try:
        return _cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        pass
    except ValueError:
        pass
    jitter = JITTER_BASE * sigma2
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX * sigma2 * (1 + 1e-12):
        try:
            return _cholesky(K + jitter * eye, lower=True)
        except (np.linalg.LinAlgError, ValueError):
            jitter *= 10.0
    raise NumericalError(f"Cholesky failed for entity {entity_id!r} after jitter escalation")


def mean_vector(history: EntityHistory, theta: MeanCoefficients):
    """Linear mean m_j = theta . x_j evaluated at every rating's covariates."""
    th = theta.theta
    if history.covariates.shape[1] != th.shape[0]:
        raise InvalidInputError(
            f"covariate dimension {history.covariates.shape[1]} != theta length {th.shape[0]}"
        )
    return history.covariates @ th


# ---------------------------------------------------------------------------
# ordered-probit emission
# ---------------------------------------------------------------------------

def _cell_prob(z_lo, z_hi):
    # Phi(z_hi) - Phi(z_lo), computed from the tail nearest zero so that two
    # large same-sign values do not cancel catastrophically. Reflecting both
    # arguments with a sign factor picks that tail in one ndtr pass per bound;
    # IEEE negation is exact, so this matches the branch-per-side form bit
    # for bit.
    z_lo = np.asarray(z_lo, dtype=float)
    z_hi = np.asarray(z_hi, dtype=float)
    sgn = np.where(z_lo >= 0.0, -1.0, 1.0)
    p = sgn * (ndtr(sgn * z_hi) - ndtr(sgn * z_lo))
    return np.maximum(p, 0.0)


def emission_loglik(ratings, f, kappa, cutpoints):
    """Vectorized log P(R_j = r_j | f_j) for one entity.

    Parameters
    ----------
    ratings : (n,) int array in 1..n_r
    f : (n,) latent values (broadcastable against ratings)
    kappa : positive float
    cutpoints : (n_r - 1,) increasing cutpoints

    Returns
    -------
    (n,) array of log cell probabilities, floored at log(1e-300).
    """
    ratings = np.asarray(ratings)
    padded = np.concatenate([[-np.inf], np.asarray(cutpoints, dtype=float), [np.inf]])
    z_hi = (padded[ratings] - f) / kappa
    z_lo = (padded[ratings - 1] - f) / kappa
    p = _cell_prob(z_lo, z_hi)
    return np.log(np.maximum(p, LOG_PROB_FLOOR))


def emission_logprob(rating: int, f: float, ep: EmissionParams) -> float:
    """Log probability of one ordinal rating given its latent value."""
    if not 1 <= rating <= ep.n_r:
        raise InvalidInputError(f"rating {rating} outside 1..{ep.n_r}")
    out = emission_loglik(np.array([rating]), np.array([float(f)]), ep.kappa, ep.cutpoints)
    return float(out[0])


def rating_cell_probs(f, kappa, cutpoints, n_r):
    """All n_r cell probabilities at latent value(s) f; rows sum to 1.

    f may be a scalar or array; the rating axis is appended last.
    """
    f = np.asarray(f, dtype=float)
    padded = np.concatenate([[-np.inf], np.asarray(cutpoints, dtype=float), [np.inf]])
    z = (padded - f[..., None]) / kappa
    return _cell_prob(z[..., :-1], z[..., 1:])


# ---------------------------------------------------------------------------
# joint log-density
# ---------------------------------------------------------------------------

def gp_logpdf(f, mean, K, entity_id="?"):
    """Multivariate normal log-density of f under N(mean, K)."""
    L = cholesky_with_jitter(K, float(K[0, 0]), entity_id)
    z = solve_triangular(L, f - mean, lower=True)
    return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * f.size * _LOG_2PI)


def _halfnormal_logpdf(x):
    return 0.5 * math.log(2.0 / math.pi) - 0.5 * x * x if x > 0 else -np.inf


def _halfcauchy_logpdf(x):
    return math.log(2.0 / math.pi) - math.log1p(x * x) if x > 0 else -np.inf


def _invgamma_logpdf(x, shape, scale):
    if x <= 0:
        return -np.inf
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1) * math.log(x) - scale / x


def joint_logdensity(histories, params: ModelParams, latents, priors) -> float:
    """Full unnormalized-model log density: GP + emission + parameter priors.

    Parameters
    ----------
    histories : list of EntityHistory
    params : ModelParams
    latents : mapping entity_id -> LatentValues
    priors : PriorSpec
        Supplies the per-entity inverse-gamma (shape, scale) for rho and,
        optionally, the whitening matrix for theta (see estimation module).

    Notes
    -----
    The latent term is evaluated directly in f coordinates, which is the same
    density the samplers target in whitened coordinates up to the fixed
    Jacobian of the whitening map.
    """
    theta = params.theta
    total = 0.0
    for h in histories:
        kp = params.kernel[h.entity_id]
        ep = params.emission[h.entity_id]
        f = latents[h.entity_id].f
        if f.shape[0] != h.n:
            raise InvalidInputError(f"latent length mismatch for entity {h.entity_id!r}")
        m = mean_vector(h, theta)
        K = kernel_matrix(h, kp)
        total += gp_logpdf(f, m, K, h.entity_id)
        total += emission_loglik(h.ratings, f, ep.kappa, ep.cutpoints).sum()
        # hyperparameter priors
        shape, scale = priors.lengthscale[h.entity_id]
        total += _invgamma_logpdf(kp.rho, shape, scale)
        total += _halfnormal_logpdf(kp.sigma)
        total += _halfcauchy_logpdf(ep.kappa)
        # flat Dirichlet over the simplex: density (n_r - 1)!
        total += math.lgamma(ep.n_r)
    # standard-normal prior on the whitened coefficients
    theta_t = priors.whiten_theta(theta.theta)
    total += float(-0.5 * theta_t @ theta_t - 0.5 * theta_t.size * _LOG_2PI)
    total += priors.theta_log_jacobian()
    return total
