import numpy as np
import pytest

from gpratings.baselines import sample_mean
from gpratings.errors import InvalidInputError
from gpratings.mcmc import McmcConfig
from gpratings.simulate import (
    RecoveryReport,
    SimSpec,
    SimTruth,
    _balanced_cutpoints,
    _gp_draw,
    _probit_ratings,
    regime_shift_scenario,
    recover,
    simulate,
)
from gpratings.svi import SviConfig


class TestSimulate:
    def test_shapes_and_ranges(self):
        spec = SimSpec(seed=1)
        histories, truth = simulate(spec)
        assert len(histories) == 8
        for h in histories:
            assert h.n == 80
            assert h.d == 2
            assert np.all(np.diff(h.timestamps) > 0)
            assert h.timestamps[0] >= 0.0 and h.timestamps[-1] <= 4.0
            assert h.ratings.min() >= 1 and h.ratings.max() <= 5
            assert truth.latents[h.entity_id].shape == (80,)
        assert truth.theta.shape == (2,)
        assert np.all((truth.rho >= 0.7) & (truth.rho <= 1.2))
        assert np.all((truth.sigma >= 0.9) & (truth.sigma <= 1.3))
        assert truth.kappa == 1.0
        assert np.allclose(truth.eta, 0.2)

    def test_fixed_seed_is_byte_identical(self):
        a_h, a_t = simulate(SimSpec(seed=7))
        b_h, b_t = simulate(SimSpec(seed=7))
        for ha, hb in zip(a_h, b_h):
            assert np.array_equal(ha.timestamps, hb.timestamps)
            assert np.array_equal(ha.ratings, hb.ratings)
            assert np.array_equal(ha.covariates, hb.covariates)
        assert np.array_equal(a_t.rho, b_t.rho)
        assert np.array_equal(a_t.latents["sim000"], b_t.latents["sim000"])

    def test_seed_changes_data(self):
        a_h, _ = simulate(SimSpec(seed=7))
        b_h, _ = simulate(SimSpec(seed=8))
        assert not np.array_equal(a_h[0].ratings, b_h[0].ratings)

    def test_rating_marginal_at_flat_latent_matches_eta(self):
        # at f = 0 the balanced cutpoints emit each level with probability
        # 1/5; check the emission sampler over 1e5 draws at 3 SE
        rng = np.random.default_rng(3)
        ratings = _probit_ratings(rng, np.zeros(100000), 1.0,
                                  _balanced_cutpoints(5))
        se = np.sqrt(0.2 * 0.8 / ratings.size)
        for level in range(1, 6):
            freq = np.mean(ratings == level)
            assert abs(freq - 0.2) <= 3 * se, (level, freq)

    def test_end_to_end_marginal_with_flat_mean(self):
        # full pipeline variant: theta = 0 and sigma ~ 0 pin the latent at
        # zero, so the same 1/5 marginal appears in simulated panels
        spec = SimSpec(
            n_entities=5, reviews_per_entity=2000, theta_true=(0.0, 0.0),
            sigma_range=(1e-9, 1e-9), seed=3)
        histories, _ = simulate(spec)
        ratings = np.concatenate([h.ratings for h in histories])
        se = np.sqrt(0.2 * 0.8 / ratings.size)
        for level in range(1, 6):
            freq = np.mean(ratings == level)
            assert abs(freq - 0.2) <= 3 * se, (level, freq)

    def test_vanishing_sigma_removes_latent_noise(self):
        # same seed, sigma collapsed: ratings differ from the sigma~1 panel,
        # and the latent path equals the linear mean exactly
        spec = SimSpec(sigma_range=(1e-9, 1e-9), seed=5)
        histories, truth = simulate(spec)
        h = histories[0]
        mean = h.covariates @ truth.theta
        assert np.allclose(truth.latents[h.entity_id], mean, atol=1e-3)

    def test_latent_autocovariance_matches_kernel(self):
        # 200 replications on a fixed grid: empirical lagged second moments
        # must sit within 3 standard errors of sigma^2 exp(-gap / rho)
        rng = np.random.default_rng(12)
        t = np.linspace(0.0, 4.0, 25)
        rho, sigma = 1.0, 1.2
        reps = 200
        paths = np.stack([
            _gp_draw(rng, t, rho, sigma, np.zeros(t.size)) for _ in range(reps)])
        for a, b in ((0, 0), (0, 1), (3, 9), (0, 24)):
            prods = paths[:, a] * paths[:, b]
            want = sigma ** 2 * np.exp(-abs(t[a] - t[b]) / rho)
            se = prods.std(ddof=1) / np.sqrt(reps)
            assert abs(prods.mean() - want) <= 3 * se, (a, b)

    def test_balanced_cutpoints(self):
        c = _balanced_cutpoints(5)
        assert c.shape == (4,)
        assert np.allclose(c, -c[::-1])  # symmetric around zero
        assert np.all(np.diff(c) > 0)

    def test_spec_validation(self):
        with pytest.raises(InvalidInputError):
            SimSpec(n_entities=0)
        with pytest.raises(InvalidInputError):
            SimSpec(reviews_per_entity=0)
        with pytest.raises(InvalidInputError):
            SimSpec(rho_range=(-1.0, 2.0))
        with pytest.raises(InvalidInputError):
            SimSpec(sigma_range=(2.0, 1.0))
        with pytest.raises(InvalidInputError):
            SimSpec(n_r=1)
        with pytest.raises(InvalidInputError):
            SimSpec(horizon=0.0)
        with pytest.raises(InvalidInputError):
            SimSpec(theta_true=())


class TestRegimeShift:
    def test_sample_mean_lags_after_downshift(self):
        histories = regime_shift_scenario(
            pre_level=1.0, post_level=-1.0, shift_time=3.0, n=60, seed=2,
            n_entities=20)
        lagged = 0
        for h in histories:
            holdout = h.ratings[-10:].mean()
            if sample_mean(h) - holdout > 0.3:
                lagged += 1
        assert lagged >= 14

    def test_shift_after_last_rating_equals_no_shift(self):
        flat = regime_shift_scenario(0.8, 0.8, shift_time=1.0, n=30, seed=4)
        late = regime_shift_scenario(0.8, -0.8, shift_time=99.0, n=30, seed=4)
        assert np.array_equal(flat[0].ratings, late[0].ratings)
        assert np.array_equal(flat[0].timestamps, late[0].timestamps)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            regime_shift_scenario(1.0, -1.0, 2.0, n=19, seed=0)
        with pytest.raises(InvalidInputError):
            regime_shift_scenario(9.0, -1.0, 2.0, n=30, seed=0)


class TestRecover:
    def test_mcmc_report_shape(self):
        spec = SimSpec(n_entities=2, reviews_per_entity=25, seed=6)
        report = recover(spec, backend="mcmc",
                         config=McmcConfig(chains=2, iterations=150, warmup=75,
                                           seed=3))
        assert report.backend == "mcmc"
        assert set(report.parameters) == {"theta", "rho", "sigma"}
        for stats in report.parameters.values():
            assert np.isfinite(stats["bias"])
            assert stats["rmse"] >= 0
            assert 0.0 <= stats["coverage"] <= 1.0
        assert isinstance(report.converged, bool)
        assert report.diagnostics["worst_rhat"] > 0

    def test_svi_report_has_no_coverage(self):
        spec = SimSpec(n_entities=2, reviews_per_entity=25, seed=6)
        report = recover(spec, backend="svi",
                         config=SviConfig(iterations=300, seed=1))
        assert report.backend == "svi"
        for stats in report.parameters.values():
            assert stats["coverage"] is None
            assert np.isfinite(stats["rmse"])
        assert np.isfinite(report.diagnostics["final_elbo"])

    def test_unknown_backend(self):
        with pytest.raises(InvalidInputError):
            recover(SimSpec(), backend="vb")

    def test_report_coverage_validated(self):
        with pytest.raises(InvalidInputError):
            RecoveryReport(backend="mcmc",
                           parameters={"theta": {"bias": 0.0, "rmse": 0.1,
                                                 "coverage": 1.4}})
