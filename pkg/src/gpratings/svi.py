"""Sparse variational estimation with inducing points.

Each entity keeps a Gaussian approximation q(u) = N(nu, C C^T) over latent
values at inducing timestamps, placed on the zero-mean residual process so
the covariate mean enters only through the projection mean. The objective is
the sum over ratings of Gauss-Hermite estimates of E_q[log p(y_j | f_j)]
minus the closed-form KL between q(u) and the GP prior at the inducing
points. Gradients are analytic throughout; a finite-difference cross-check
lives in the test suite.

Per-iteration cost at fixed inducing count m is O(n m) for the variational
mean, theta and emission parameters, and O(n m^2 + m^3) for the covariance
factor and kernel hyperparameters. The latter block is refreshed every
``hyper_update_every`` iterations, which keeps the amortized cost low while
the cheap block tracks the optimum between refreshes.
"""

from __future__ import annotations

import gc
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotri, dpotrs, dtrtrs
from scipy.special import ndtr, ndtri

from .errors import InvalidInputError, NumericalError
from .model import (
    JITTER_BASE,
    JITTER_MAX,
    EmissionParams,
    EntityHistory,
    KernelParams,
)

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_SQRT_2 = math.sqrt(2.0)
_PROB_FLOOR = 1e-300
_MAX_INDUCING = 250


def _npdf(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


@dataclass(frozen=True)
class SviConfig:
    """Optimizer settings for the variational backend."""

    iterations: int = 5000
    minibatch: Optional[int] = None
    quadrature_nodes: int = 20
    learning_rate: float = 0.05
    hyper_learning_rate: float = 0.02
    hyper_update_every: int = 10
    m_max: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if self.quadrature_nodes < 5:
            raise InvalidInputError("quadrature_nodes must be >= 5")
        if self.learning_rate <= 0 or self.hyper_learning_rate <= 0:
            raise InvalidInputError("learning rates must be positive")
        if self.hyper_update_every < 1:
            raise InvalidInputError("hyper_update_every must be >= 1")
        if not 1 <= self.m_max <= _MAX_INDUCING:
            raise InvalidInputError(f"m_max must be in [1, {_MAX_INDUCING}]")
        if self.minibatch is not None and self.minibatch < 1:
            raise InvalidInputError("minibatch must be >= 1 when given")


@dataclass
class VariationalState:
    """Fitted variational approximation plus point hyperparameters."""

    entity_ids: list
    inducing_times: dict
    q_mean: dict
    q_chol: dict
    theta: np.ndarray
    kernel: dict
    emission: dict
    elbo_trace: np.ndarray
    config: SviConfig
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        for eid in self.entity_ids:
            z = np.asarray(self.inducing_times[eid], dtype=float)
            if z.size > _MAX_INDUCING:
                raise InvalidInputError(f"entity {eid!r} has more than {_MAX_INDUCING} inducing points")
            if z.size > 1 and np.any(np.diff(z) <= 0):
                raise InvalidInputError(f"inducing times for entity {eid!r} must be strictly increasing")
            c = np.asarray(self.q_chol[eid], dtype=float)
            if np.any(np.diag(c) <= 0):
                raise InvalidInputError(f"q_chol diagonal must be positive for entity {eid!r}")

    @property
    def backend(self):
        return "svi"

    @property
    def n_draws(self):
        return 1

    @property
    def trend_ok(self):
        """Whether the trailing-window mean ELBO is at least the leading one."""
        trace = self.elbo_trace
        if trace.size < 2:
            return True
        w = min(500, trace.size // 2)
        return bool(np.mean(trace[-w:]) >= np.mean(trace[:w]))


def select_inducing(history: EntityHistory, m_max: int = _MAX_INDUCING):
    """Inducing timestamps at evenly spaced empirical quantiles.

    Saturates to all timestamps when the history is short. Any collisions
    after quantile interpolation are nudged apart by a span-relative epsilon.
    """
    if m_max < 1:
        raise InvalidInputError("m_max must be >= 1")
    t = history.timestamps
    if history.n <= m_max:
        return t.copy()
    z = np.quantile(t, np.linspace(0.0, 1.0, m_max))
    span = float(t[-1] - t[0])
    eps = 1e-9 * max(span, 1.0)
    for i in range(1, z.size):
        if z[i] <= z[i - 1]:
            z[i] = z[i - 1] + eps
    return np.minimum(z, float(t[-1]) + eps * z.size)


def _chol_jittered(k_pure, sigma2):
    """Cholesky of k_pure + jitter*I, escalating jitter from the base level.

    Returns the factor together with the jitter actually applied so callers
    can keep derived quantities consistent with the factored matrix.
    """
    jitter = JITTER_BASE * sigma2
    eye = np.eye(k_pure.shape[0])
    while jitter <= JITTER_MAX * sigma2 * (1 + 1e-12):
        try:
            return np.linalg.cholesky(k_pure + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("inducing-point Cholesky failed after jitter escalation")


def _emission_quadrature(mu, s, y, lam, log_kappa, xq, wbar, want_beta):
    """One Gauss-Hermite pass over every rating.

    Returns the expected log-likelihood total along with the gradients that
    fall out of the same probe evaluations: d/dmu (gamma), d/ds2 (beta, when
    requested), d/dlog kappa, and d/dlam through cutpoints and softmax.
    """
    n_r = lam.size
    e = np.exp(lam - lam.max())
    eta = e / e.sum()
    cum = np.minimum(np.maximum(np.cumsum(eta)[:-1], 1e-12), 1.0 - 1e-16)
    zeta = ndtri(cum)
    z_full = np.empty(n_r + 1)
    z_full[0] = -np.inf
    z_full[1:-1] = zeta
    z_full[-1] = np.inf
    kappa = math.exp(log_kappa)

    g = (mu / kappa)[:, None] + (_SQRT_2 / kappa) * s[:, None] * xq[None, :]
    # Both integration bounds ride in one (2, n, q) stack so each elementwise
    # pass below dispatches once instead of twice; index 0 is the lower bound.
    b = z_full[np.vstack((y - 1, y))][:, :, None] - g
    # Phi(b[1]) - Phi(b[0]) from the tail nearest zero (the model module's
    # cell-probability trick), with both tails pushed through a single ndtr.
    sgn = np.where(b[0] >= 0.0, -1.0, 1.0)
    nd = ndtr(sgn * b)
    p = np.maximum(sgn * (nd[1] - nd[0]), _PROB_FLOOR)
    total = float((np.log(p) @ wbar).sum())

    pw = _npdf(b) * (wbar / p)
    dw = pw[0] - pw[1]
    gamma = dw.sum(axis=1) / kappa
    g_kappa = -float((dw * g).sum())

    # Cutpoint zeta_j is the upper bound of cell j+1 and the lower bound of
    # cell j+2; the infinite outer bounds contribute zero density, so binning
    # by rating and slicing drops them for free.
    rows = pw.sum(axis=2)
    hi_bins = np.bincount(y, weights=rows[1], minlength=n_r + 1)
    lo_bins = np.bincount(y, weights=rows[0], minlength=n_r + 1)
    g_zeta = hi_bins[1:n_r] - lo_bins[2:]
    g_cum = g_zeta / _npdf(zeta)
    g_eta = np.concatenate((np.cumsum(g_cum[::-1])[::-1], [0.0]))
    g_lam = eta * (g_eta - float(eta @ g_eta))

    beta = None
    if want_beta:
        beta = _SQRT_2 * (dw @ xq) / (2.0 * kappa * s)
    return total, gamma, beta, g_kappa, g_lam, eta


class _EntityVi:
    """Per-entity variational parameters plus kernel-dependent caches."""

    __slots__ = (
        "history", "eid", "X", "y", "n", "z", "m", "n_r", "d_uu", "d_uf",
        "nu", "C", "lam", "log_kappa", "log_rho", "log_sigma",
        "k_uu_pure", "k_uf", "L_E", "A", "kuf_a", "CtA", "s2", "s", "k_diag",
        "half", "cs_C", "sld_E", "sld_C", "tril_mask", "broken",
    )

    def __init__(self, history, z, n_r, rho0):
        self.history = history
        self.eid = history.entity_id
        self.X = history.covariates
        self.y = history.ratings
        self.n = history.n
        self.z = z
        self.m = z.size
        self.n_r = n_r
        self.d_uu = np.abs(z[:, None] - z[None, :])
        self.d_uf = np.abs(z[:, None] - history.timestamps[None, :])
        self.nu = np.zeros(self.m)
        counts = np.bincount(self.y, minlength=n_r + 1)[1:]
        eta0 = (counts + 0.5) / (self.n + 0.5 * n_r)
        self.lam = np.log(eta0)
        self.lam = self.lam - self.lam.mean()
        self.log_kappa = 0.0
        self.log_rho = math.log(rho0)
        self.log_sigma = 0.0
        self.C = None
        self.tril_mask = np.tril(np.ones((self.m, self.m), dtype=bool), -1)
        self.broken = False
        self.rebuild()

    def rebuild(self):
        rho = math.exp(self.log_rho)
        sigma2 = math.exp(2.0 * self.log_sigma)
        self.k_uu_pure = sigma2 * np.exp(-self.d_uu / rho)
        L_E, jitter = _chol_jittered(self.k_uu_pure, sigma2)
        # Fortran order lets the per-iteration LAPACK solve skip a copy.
        self.L_E = np.asfortranarray(L_E)
        self.k_uf = sigma2 * np.exp(-self.d_uf / rho)
        self.A, info = dpotrs(self.L_E, self.k_uf, lower=1)
        if info:
            raise NumericalError("inducing-point solve failed")
        self.kuf_a = np.einsum("ij,ij->j", self.k_uf, self.A)
        if self.C is None:
            self.C = self.L_E.copy()
        self.CtA = self.C.T @ self.A
        self.k_diag = sigma2 + jitter
        self.s2 = np.maximum(
            self.k_diag - self.kuf_a + np.einsum("ij,ij->j", self.CtA, self.CtA),
            1e-12 * sigma2,
        )
        self.s = np.sqrt(self.s2)
        self.half, info = dtrtrs(self.L_E, self.C, lower=1)
        if info:
            raise NumericalError("inducing-point solve failed")
        self.cs_C = float(np.sum(self.half * self.half))
        self.sld_E = float(np.sum(np.log(np.diag(self.L_E))))
        self.sld_C = float(np.sum(np.log(np.diag(self.C))))

    def forward(self, theta, xq, wbar, heavy):
        """ELBO value and gradients at the current parameters."""
        if self.broken:
            return None
        mu = self.X @ theta + self.A.T @ self.nu
        w_nu, info = dpotrs(self.L_E, self.nu, lower=1)
        if info:
            return None
        nu_quad = float(self.nu @ w_nu)
        kl = 0.5 * (self.cs_C + nu_quad - self.m) + self.sld_E - self.sld_C
        lik, gamma, beta, g_kappa, g_lam, eta = _emission_quadrature(
            mu, self.s, self.y, self.lam, self.log_kappa, xq, wbar, want_beta=heavy)
        elbo_val = lik - kl
        if not math.isfinite(elbo_val):
            return None
        out = {
            "elbo": elbo_val,
            "g_nu": self.A @ gamma - w_nu,
            "g_theta": self.X.T @ gamma,
            "g_kappa": g_kappa,
            "g_lam": g_lam,
        }
        if heavy:
            rho = math.exp(self.log_rho)
            # rebuild already holds L^-1 C, so K^-1 C needs one more solve
            b_c, info = dtrtrs(self.L_E, self.half, lower=1, trans=1)
            if info:
                return None
            atc = self.A.T @ self.C
            g_raw = 2.0 * ((self.A * beta) @ atc) - b_c
            out["g_low"] = np.where(self.tril_mask, g_raw, 0.0)
            out["g_omega"] = np.diag(g_raw) * np.diag(self.C) + 1.0
            out["g_lsigma"] = (
                2.0 * float(beta @ (self.k_diag - self.kuf_a))
                + self.cs_C + nu_quad - self.m
            )
            kdot_uu = self.k_uu_pure * (self.d_uu / rho)
            kdot_uf = self.k_uf * (self.d_uf / rho)
            adot, info = dpotrs(self.L_E, kdot_uf - kdot_uu @ self.A, lower=1)
            if info:
                return None
            g_mu_rho = float(gamma @ (adot.T @ self.nu))
            ds2 = (
                -np.einsum("ij,ij->j", kdot_uf, self.A)
                - np.einsum("ij,ij->j", self.k_uf, adot)
                + 2.0 * np.einsum("ij,ij->j", self.CtA, self.C.T @ adot)
            )
            # tr(K^-1 Kdot) via the triangular inverse-from-factor routine;
            # Kdot has a zero diagonal, so summing the filled lower triangle
            # against the symmetric Kdot and doubling covers the whole matrix.
            kuu_inv_low, info = dpotri(self.L_E, lower=1)
            if info:
                return None
            kl_rho = 0.5 * (
                2.0 * float(np.sum(kuu_inv_low * kdot_uu))
                - float(np.sum(b_c * (kdot_uu @ b_c)))
                - float(w_nu @ (kdot_uu @ w_nu))
            )
            out["g_lrho"] = g_mu_rho + float(beta @ ds2) - kl_rho
        return out

    def snapshot(self):
        return (self.nu, self.lam, self.log_kappa, self.C,
                self.log_rho, self.log_sigma)

    def restore(self, snap):
        self.nu, self.lam, self.log_kappa, self.C, self.log_rho, self.log_sigma = snap
        self.broken = False
        self.rebuild()

    def apply_cheap(self, step):
        self.nu = self.nu + step[: self.m]
        lam = self.lam + step[self.m : -1]
        self.lam = lam - lam.sum() / lam.size
        self.log_kappa = self.log_kappa + float(step[-1])

    def apply_heavy(self, steps):
        off = np.where(self.tril_mask, self.C, 0.0) + steps["low"]
        diag = np.exp(np.log(np.diag(self.C)) + steps["omega"])
        self.C = off + np.diag(diag)
        self.log_rho = self.log_rho + steps["rho"]
        self.log_sigma = self.log_sigma + steps["sigma"]
        try:
            self.rebuild()
        except NumericalError:
            self.broken = True


class _Adam:
    """Per-slot Adam steps; slots are (entity, name) keys with own timestep.

    Moment buffers are updated in place so the per-slot cost stays flat as
    the iteration count grows.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, key, grad, lr):
        if isinstance(grad, float):
            m, v, t = self.state.get(key, (0.0, 0.0, 0))
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * (grad * grad)
            self.state[key] = (m, v, t)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            return lr * m_hat / (math.sqrt(v_hat) + self.eps)
        slot = self.state.get(key)
        if slot is None:
            g = np.asarray(grad, dtype=float)
            slot = [np.zeros_like(g), np.zeros_like(g), 0]
            self.state[key] = slot
        m, v, t = slot
        t += 1
        slot[2] = t
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * np.square(grad)
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _rho_inits(histories):
    """Geometric mean of (min gap, span) per entity; dataset medians for singletons."""
    lows, highs = [], []
    for h in histories:
        if h.n >= 2:
            gaps = np.diff(h.timestamps)
            lows.append(float(gaps.min()))
            highs.append(float(h.timestamps[-1] - h.timestamps[0]))
    out = {}
    for h in histories:
        if h.n >= 2:
            gaps = np.diff(h.timestamps)
            lo, hi = float(gaps.min()), float(h.timestamps[-1] - h.timestamps[0])
        elif lows:
            lo, hi = float(np.median(lows)), float(np.median(highs))
        else:
            lo = hi = 1.0
        out[h.entity_id] = math.sqrt(max(lo, 1e-12) * max(hi, 1e-12))
    return out


def _quadrature_nodes(n_nodes):
    xq, wq = np.polynomial.hermite.hermgauss(n_nodes)
    return xq, wq / math.sqrt(math.pi)


def _sweep(entities, theta, xq, wbar, heavy):
    """Forward pass over a batch; None signals a non-finite objective."""
    total = 0.0
    g_theta = np.zeros_like(theta)
    outs = []
    for ent in entities:
        out = ent.forward(theta, xq, wbar, heavy)
        if out is None:
            return None
        total += out["elbo"]
        g_theta += out["g_theta"]
        outs.append(out)
    if not math.isfinite(total):
        return None
    return total, g_theta, outs


def _apply_updates(entities, outs, theta, g_theta, adam, cfg, heavy, lr_scale):
    lr = cfg.learning_rate * lr_scale
    lr_h = cfg.hyper_learning_rate * lr_scale
    for ent, out in zip(entities, outs):
        # One packed slot per entity for the per-iteration parameters; Adam is
        # coordinate-wise and these always step together, so this matches
        # separate slots exactly while paying the bookkeeping once.
        g = np.concatenate((out["g_nu"], out["g_lam"], (out["g_kappa"],)))
        ent.apply_cheap(adam.step((ent.eid, "cheap"), g, lr))
        if heavy:
            hsteps = {
                "low": adam.step((ent.eid, "low"), out["g_low"], lr_h),
                "omega": adam.step((ent.eid, "omega"), out["g_omega"], lr_h),
                "rho": adam.step((ent.eid, "rho"), out["g_lrho"], lr_h),
                "sigma": adam.step((ent.eid, "sigma"), out["g_lsigma"], lr_h),
            }
            ent.apply_heavy(hsteps)
    return theta + adam.step(("theta",), g_theta, lr)


def fit_svi(histories, config: SviConfig = None, n_r: int = None) -> VariationalState:
    """Maximize the summed per-entity ELBO by block-coordinate Adam ascent.

    The variational mean, theta and emission parameters move every iteration;
    the covariance factor and kernel hyperparameters move every
    ``hyper_update_every`` iterations with caches rebuilt afterwards. A
    non-finite objective rolls the parameters back one step, halves the
    step-size scale and retries, aborting after five straight failures.
    """
    if not histories:
        raise InvalidInputError("histories must be non-empty")
    cfg = config if config is not None else SviConfig()
    observed_max = max(int(h.ratings.max()) for h in histories)
    if n_r is None:
        n_r = max(observed_max, 2)
    elif observed_max > n_r:
        raise InvalidInputError(f"observed rating {observed_max} exceeds n_r={n_r}")
    if n_r < 2:
        raise InvalidInputError("n_r must be >= 2")

    rho0 = _rho_inits(histories)
    entities = [
        _EntityVi(h, select_inducing(h, cfg.m_max), n_r, rho0[h.entity_id])
        for h in histories
    ]
    d = histories[0].covariates.shape[1]
    for h in histories:
        if h.covariates.shape[1] != d:
            raise InvalidInputError("covariate dimension differs across entities")
    theta = np.zeros(d)
    xq, wbar = _quadrature_nodes(cfg.quadrature_nodes)
    adam = _Adam()
    rng = np.random.default_rng(cfg.seed)
    n_e = len(entities)
    batch_size = n_e if cfg.minibatch is None else min(cfg.minibatch, n_e)

    trace = np.empty(cfg.iterations)
    lr_scale = 1.0
    snap = None
    for it in range(cfg.iterations):
        if batch_size < n_e:
            batch = [entities[i] for i in sorted(rng.choice(n_e, batch_size, replace=False))]
        else:
            batch = entities
        heavy = it % cfg.hyper_update_every == 0
        attempts = 0
        while True:
            res = _sweep(batch, theta, xq, wbar, heavy)
            if res is not None:
                break
            if snap is None:
                raise NumericalError("ELBO non-finite at the initial parameters")
            attempts += 1
            if attempts > 5:
                raise NumericalError(
                    f"ELBO stayed non-finite after 5 step-size halvings at iteration {it}")
            theta = snap[0]
            for ent, s in zip(entities, snap[1]):
                ent.restore(s)
            lr_scale *= 0.5
        total, g_theta, outs = res
        scale = n_e / len(batch)
        trace[it] = total * scale
        if scale != 1.0:
            g_theta = g_theta * scale
        snap = (theta, [ent.snapshot() for ent in entities])
        theta = _apply_updates(batch, outs, theta, g_theta, adam, cfg, heavy, lr_scale)

    gaps = np.concatenate([np.diff(h.timestamps) for h in histories if h.n >= 2] or [np.array([1.0])])
    state = VariationalState(
        entity_ids=[h.entity_id for h in histories],
        inducing_times={e.eid: e.z for e in entities},
        q_mean={e.eid: e.nu for e in entities},
        q_chol={e.eid: e.C for e in entities},
        theta=theta,
        kernel={e.eid: KernelParams(rho=math.exp(e.log_rho), sigma=math.exp(e.log_sigma))
                for e in entities},
        emission={e.eid: EmissionParams(kappa=math.exp(e.log_kappa), eta=_softmax(e.lam))
                  for e in entities},
        elbo_trace=trace,
        config=cfg,
        metadata={"n_r": n_r, "median_gap": float(np.median(gaps)),
                  "final_elbo": float(trace[-1])},
    )
    return state


def _softmax(lam):
    e = np.exp(lam - lam.max())
    return e / e.sum()


def elbo(history: EntityHistory, state: VariationalState, quadrature_nodes: int = 20) -> float:
    """Single-entity ELBO at the parameters stored in a fitted state."""
    if quadrature_nodes < 5:
        raise InvalidInputError("quadrature_nodes must be >= 5")
    eid = history.entity_id
    if eid not in state.q_mean:
        raise InvalidInputError(f"state has no entity {eid!r}")
    kp = state.kernel[eid]
    ep = state.emission[eid]
    return _elbo_reference(
        history, state.inducing_times[eid], state.q_mean[eid], state.q_chol[eid],
        state.theta, kp.rho, kp.sigma, ep.kappa, ep.eta, quadrature_nodes)


def _elbo_reference(history, z, nu, c_chol, theta, rho, sigma, kappa, eta, n_nodes):
    """From-scratch ELBO used by the public entry point and the tests."""
    z = np.asarray(z, dtype=float)
    nu = np.asarray(nu, dtype=float)
    c_chol = np.asarray(c_chol, dtype=float)
    sigma2 = sigma ** 2
    k_uu_pure = sigma2 * np.exp(-np.abs(z[:, None] - z[None, :]) / rho)
    L_E, jitter = _chol_jittered(k_uu_pure, sigma2)
    k_uf = sigma2 * np.exp(-np.abs(z[:, None] - history.timestamps[None, :]) / rho)
    A = cho_solve((L_E, True), k_uf)
    mu = history.covariates @ np.asarray(theta, dtype=float) + A.T @ nu
    cta = c_chol.T @ A
    s2 = np.maximum(
        sigma2 + jitter - np.einsum("ij,ij->j", k_uf, A) + np.einsum("ij,ij->j", cta, cta),
        1e-12 * sigma2,
    )
    xq, wbar = _quadrature_nodes(n_nodes)
    lam = np.log(np.maximum(np.asarray(eta, dtype=float), 1e-300))
    lik, *_ = _emission_quadrature(
        mu, np.sqrt(s2), history.ratings, lam, math.log(kappa), xq, wbar, want_beta=False)
    half_c = solve_triangular(L_E, c_chol, lower=True)
    half_nu = solve_triangular(L_E, nu, lower=True)
    kl = (0.5 * (np.sum(half_c * half_c) + half_nu @ half_nu - z.size)
          + np.sum(np.log(np.diag(L_E))) - np.sum(np.log(np.diag(c_chol))))
    return float(lik - kl)


def complexity_probe(n_values=(64, 128, 256, 512, 1024), m: Optional[int] = 16,
                     iterations: int = 50, repeats: int = 7,
                     hyper_update_every: Optional[int] = None, seed: int = 0) -> dict:
    """Time the optimizer iteration at each history length.

    Each timing covers ``iterations`` steps at the production mix of cheap and
    hyperparameter-refresh work (``hyper_update_every`` defaults to the
    :class:`SviConfig` cadence). Repeats are interleaved across the history
    lengths and the fastest run per length is kept, so a busy stretch on the
    host inflates every length or none rather than skewing the growth
    estimate. With ``m`` fixed the per-iteration cost should scale close to
    linearly in n; the returned table includes the fitted log-log slope. The
    default inducing count is small relative to every probed n because the
    factorization work on the m-by-m system is independent of n and would
    otherwise read as a constant floor under the growth trend. Passing
    ``m=None`` sets the inducing count equal to n instead, removing sparsity
    so the trend turns superlinear.
    """
    rng = np.random.default_rng(seed)
    every = SviConfig().hyper_update_every if hyper_update_every is None else hyper_update_every
    xq, wbar = _quadrature_nodes(20)
    runs = []
    for n in n_values:
        t = np.sort(rng.uniform(0.0, 4.0, n))
        t += np.arange(n) * 1e-9
        h = EntityHistory(f"probe{n}", t, rng.integers(1, 6, n), rng.normal(size=(n, 2)))
        m_n = n if m is None else min(m, n)
        ent = _EntityVi(h, select_inducing(h, m_n), 5, rho0=1.0)
        cfg = SviConfig(iterations=1, hyper_update_every=every,
                        m_max=min(m_n, _MAX_INDUCING))
        runs.append({"ent": ent, "cfg": cfg, "theta": np.zeros(2),
                     "adam": _Adam(), "best": math.inf})
    for run in runs:  # warm caches and allocator before timing
        for _ in range(2):
            res = _sweep([run["ent"]], run["theta"], xq, wbar, heavy=True)
            run["theta"] = _apply_updates([run["ent"]], res[2], run["theta"],
                                          res[1], run["adam"], run["cfg"], True, 1.0)
    was_enabled = gc.isenabled()
    gc.disable()  # exclude collector pauses, as the stdlib timeit does
    try:
        for _ in range(repeats):
            for run in runs:
                ent, cfg, adam, theta = run["ent"], run["cfg"], run["adam"], run["theta"]
                start = time.perf_counter()
                for it in range(iterations):
                    heavy = it % every == 0
                    res = _sweep([ent], theta, xq, wbar, heavy=heavy)
                    theta = _apply_updates([ent], res[2], theta, res[1], adam, cfg, heavy, 1.0)
                run["best"] = min(run["best"], (time.perf_counter() - start) / iterations)
                run["theta"] = theta
    finally:
        if was_enabled:
            gc.enable()
    times = [run["best"] for run in runs]
    slope = float(np.polyfit(np.log(np.asarray(n_values, dtype=float)),
                             np.log(np.asarray(times)), 1)[0])
    return {"n": list(n_values), "m": m, "seconds_per_iteration": times, "slope": slope}
