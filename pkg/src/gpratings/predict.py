"""Posterior predictive scores for future ratings.

Given a fitted backend, the predictive distribution at a query point
averages ordered-probit cell probabilities over posterior draws, with the
latent value at the query integrated out in closed form: each draw supplies
Gaussian conditional moments (mu_s, nu_s^2), and the cell probability uses
the inflated scale sqrt(kappa^2 + nu_s^2). Deployment scores marginalize the
query over time gaps and covariate rows resampled from the entity's own
history, so prediction never touches covariates of unseen future reviews.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtri

from .errors import InvalidInputError
from .model import (
    EntityHistory,
    KernelParams,
    _cell_prob,
    cholesky_with_jitter,
    kernel_matrix,
)
from .svi import VariationalState, _chol_jittered

_VAR_FLOOR_REL = 1e-12


@dataclass(frozen=True)
class PredictiveDistribution:
    """Distribution over the next rating plus its mean."""

    probs: np.ndarray
    expected_rating: float

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or probs.size < 2:
            raise InvalidInputError("probs must be a vector of at least two categories")
        if np.any(probs < -1e-12):
            raise InvalidInputError("probs must be non-negative")
        if abs(probs.sum() - 1.0) > 1e-10:
            raise InvalidInputError("probs must sum to one within 1e-10")

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=float)
        levels = np.arange(1, probs.size + 1)
        return cls(probs=probs, expected_rating=float(levels @ probs))


@dataclass(frozen=True)
class MarginalizationDraw:
    """One resampled deployment query: a time gap and a covariate row."""

    delta: float
    covariates: np.ndarray

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidInputError("delta must be positive")
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float))


@dataclass(frozen=True)
class DrawState:
    """One posterior draw's view of an entity: theta, kernel, latent path."""

    theta: np.ndarray
    kernel: KernelParams
    latent: np.ndarray


def _check_query_time(history, query_time):
    if query_time < history.timestamps[-1] - 1e-9:
        raise InvalidInputError(
            "query_time must not precede the last observed timestamp")


def _cross_kernel(history, times, kp: KernelParams):
    d = np.abs(history.timestamps[:, None] - np.asarray(times, dtype=float)[None, :])
    return kp.sigma ** 2 * np.exp(-d / kp.rho)


def _mcmc_draw_moments(history, theta, kp, latent, times, xs):
    """Conditional mean and variance at each query under one draw."""
    K = kernel_matrix(history, kp)
    L = cholesky_with_jitter(K, kp.sigma ** 2, history.entity_id)
    k_star = _cross_kernel(history, times, kp)
    a = solve_triangular(L, k_star, lower=True)
    resid = solve_triangular(L, latent - history.covariates @ theta, lower=True)
    mu = xs @ theta + a.T @ resid
    nu2 = np.maximum(kp.sigma ** 2 - np.einsum("ij,ij->j", a, a),
                     _VAR_FLOOR_REL * kp.sigma ** 2)
    return mu, nu2


def _vi_moments(history, state: VariationalState, times, xs):
    """Sparse-projection q(f*) moments at each query."""
    eid = history.entity_id
    if eid not in state.q_mean:
        raise InvalidInputError(f"state has no entity {eid!r}")
    kp = state.kernel[eid]
    z = state.inducing_times[eid]
    sigma2 = kp.sigma ** 2
    k_uu = sigma2 * np.exp(-np.abs(z[:, None] - z[None, :]) / kp.rho)
    L, jitter = _chol_jittered(k_uu, sigma2)
    k_star = sigma2 * np.exp(-np.abs(z[:, None] - np.asarray(times)[None, :]) / kp.rho)
    half = solve_triangular(L, k_star, lower=True)
    a = solve_triangular(L.T, half, lower=False)
    mu = xs @ state.theta + a.T @ state.q_mean[eid]
    cta = state.q_chol[eid].T @ a
    nu2 = np.maximum(
        sigma2 + jitter - np.einsum("ij,ij->j", k_star, a)
        + np.einsum("ij,ij->j", cta, cta),
        _VAR_FLOOR_REL * sigma2,
    )
    return mu, nu2


def conditional_moments(history, draw_state, query_time, query_covariates):
    """Latent conditional moments (mu, nu^2) at a single future query.

    ``draw_state`` is either a :class:`DrawState` carrying one posterior
    draw or a fitted :class:`VariationalState`, whose projection supplies
    the moments directly.
    """
    _check_query_time(history, query_time)
    xs = np.asarray(query_covariates, dtype=float)[None, :]
    times = np.array([query_time], dtype=float)
    if isinstance(draw_state, VariationalState):
        mu, nu2 = _vi_moments(history, draw_state, times, xs)
    else:
        mu, nu2 = _mcmc_draw_moments(
            history, np.asarray(draw_state.theta, dtype=float), draw_state.kernel,
            np.asarray(draw_state.latent, dtype=float), times, xs)
    return float(mu[0]), float(nu2[0])


def _cutpoints_rows(eta_rows, kappa_col):
    cum = np.clip(np.cumsum(eta_rows, axis=-1)[..., :-1], 1e-12, 1.0 - 1e-16)
    return kappa_col * ndtri(cum)


def _probs_from_moments(mu, nu2, kappa, cutpoints):
    """Average cell probabilities over draw/query axes.

    ``mu`` and ``nu2`` are (S, L); ``kappa`` is (S,); ``cutpoints`` is
    (S, n_r - 1). Returns the (n_r,) averaged distribution.
    """
    S, L = mu.shape
    edges = np.concatenate(
        [np.full((S, 1), -np.inf), cutpoints, np.full((S, 1), np.inf)], axis=1)
    scale = np.sqrt(kappa[:, None] ** 2 + nu2)
    z = (edges[:, None, :] - mu[:, :, None]) / scale[:, :, None]
    cells = _cell_prob(z[..., :-1], z[..., 1:])
    return cells.mean(axis=(0, 1))


def _query_distribution(history, fit, times, xs):
    """Cell probabilities averaged over posterior draws and the query batch."""
    if getattr(fit, "backend", None) == "svi":
        mu, nu2 = _vi_moments(history, fit, times, xs)
        eid = history.entity_id
        ep = fit.emission[eid]
        kappa = np.array([ep.kappa])
        cuts = _cutpoints_rows(ep.eta[None, :], kappa[:, None])
        probs = _probs_from_moments(mu[None, :], nu2[None, :], kappa, cuts)
        return probs
    idx = fit.entity_index(history.entity_id)
    sel = fit.latent_draw_indices
    if sel.size == 0:
        raise InvalidInputError("fit holds no latent draws for prediction")
    latents = fit.latents[history.entity_id]
    S = sel.size
    L_q = len(times)
    mu = np.empty((S, L_q))
    nu2 = np.empty((S, L_q))
    for s in range(S):
        g = sel[s]
        kp = KernelParams(rho=float(fit.rho[g, idx]), sigma=float(fit.sigma[g, idx]))
        mu[s], nu2[s] = _mcmc_draw_moments(
            history, fit.theta[g], kp, latents[s], times, xs)
    kappa = fit.kappa[sel, idx]
    cuts = _cutpoints_rows(fit.eta[sel, idx, :], kappa[:, None])
    return _probs_from_moments(mu, nu2, kappa, cuts)


def predictive_probs(history, fit, query) -> PredictiveDistribution:
    """Predictive rating distribution at one (time, covariates) query."""
    query_time, query_covariates = query
    _check_query_time(history, query_time)
    xs = np.asarray(query_covariates, dtype=float)[None, :]
    times = np.array([float(query_time)])
    probs = _query_distribution(history, fit, times, xs)
    return PredictiveDistribution.from_probs(probs)


def marginalization_draws(history, L, seed, fallback_gap=None):
    """Resample L (gap, covariates) pairs from the entity's own history.

    Gaps and covariate rows are drawn independently, uniformly with
    replacement. A single-rating entity has no observed gap, so the caller
    supplies a dataset-level fallback.
    """
    rng = np.random.default_rng(seed)
    if history.n >= 2:
        gaps = np.diff(history.timestamps)
        deltas = gaps[rng.integers(0, gaps.size, L)]
    else:
        if fallback_gap is None or not fallback_gap > 0:
            raise InvalidInputError(
                "single-rating entity needs a positive fallback gap")
        deltas = np.full(L, float(fallback_gap))
    rows = rng.integers(0, history.n, L)
    return [MarginalizationDraw(delta=float(d), covariates=history.covariates[r])
            for d, r in zip(deltas, rows)]


def marginalize(history, fit, L: int = 50, seed: int = 0) -> PredictiveDistribution:
    """Deployment-time score: average the predictive over resampled queries."""
    if L < 1:
        raise InvalidInputError("L must be >= 1")
    fallback = fit.metadata.get("median_gap") if hasattr(fit, "metadata") else None
    draws = marginalization_draws(history, L, seed, fallback_gap=fallback)
    t_last = history.timestamps[-1]
    times = np.array([t_last + d.delta for d in draws])
    xs = np.vstack([d.covariates for d in draws])
    probs = _query_distribution(history, fit, times, xs)
    return PredictiveDistribution.from_probs(probs)
