import numpy as np
import pytest
from scipy.stats import kstest

from shapeuq import network as nets, posterior as P
from shapeuq.geometry import PointObservation
from targets import GaussianTarget, LinearForwardStub, QuadraticTarget, conjugate_posterior


def constant_net(value, d=2, L=4):
    """Zero-weight network whose output is a constant vector."""
    net = nets.init_network(d, L, 2, 4, seed=0)
    for i in range(net.depth):
        net.weights[i][:] = 0.0
        net.biases[i][:] = 0.0
    net.biases[-1][:] = value
    return net


def cloud_of(points, s, j):
    return [PointObservation(x=p, s=si, j=ji) for p, si, ji in zip(points, s, j)]


class TestNegLogPosterior:
    def test_zero_at_mode_with_perfect_fit(self):
        net = constant_net(0.0)
        cloud = cloud_of(np.zeros((3, 3)), np.zeros(3), [1, 2, 3])
        mu = np.array([0.3, -0.1])
        spec = P.PosteriorSpec(net=net, cloud=cloud, zeta2=1.0, mu=mu, sigma_tilde2=1.0)
        value, _, _ = P.neg_log_posterior(spec, mu)
        assert value == 0.0

    def test_hand_computed_value(self):
        # K=1, residual 0.5, zeta2=1, ||z - mu||^2 = 4, sigma~2 = 2 -> 1.125
        net = constant_net(0.5, d=2, L=4)
        cloud = cloud_of(np.zeros((1, 3)), [0.0], [2])
        spec = P.PosteriorSpec(net=net, cloud=cloud, zeta2=1.0, mu=np.zeros(2), sigma_tilde2=2.0)
        value, _, _ = P.neg_log_posterior(spec, np.array([2.0, 0.0]))
        assert value == pytest.approx(1.125, rel=1e-14)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        net = nets.init_network(3, 2, 3, 8, seed=1)
        cloud = cloud_of(rng.uniform(-1, 1, (6, 3)), rng.standard_normal(6), rng.integers(1, 3, 6))
        spec = P.PosteriorSpec(
            net=net, cloud=cloud, zeta2="inferred", mu=rng.standard_normal(3), sigma_tilde2=0.7
        )
        z = rng.standard_normal(3)
        zeta2 = 0.31
        _, gz, gzeta = P.neg_log_posterior(spec, z, zeta2)
        step = 1e-6
        for k in range(3):
            zp, zm = z.copy(), z.copy()
            zp[k] += step
            zm[k] -= step
            fd = (
                P.neg_log_posterior(spec, zp, zeta2)[0] - P.neg_log_posterior(spec, zm, zeta2)[0]
            ) / (2 * step)
            assert abs(gz[k] - fd) <= 1e-5 * max(1.0, abs(fd))
        fd = (
            P.neg_log_posterior(spec, z, zeta2 + step)[0]
            - P.neg_log_posterior(spec, z, zeta2 - step)[0]
        ) / (2 * step)
        assert abs(gzeta - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_empty_cloud_is_prior_only(self):
        net = constant_net(1.0)
        mu = np.array([0.5, -0.5])
        spec = P.PosteriorSpec(net=net, cloud=[], zeta2=1.0, mu=mu, sigma_tilde2=2.0)
        z = np.array([1.5, -0.5])
        value, grad, _ = P.neg_log_posterior(spec, z)
        assert value == pytest.approx(0.25, rel=1e-14)
        assert np.allclose(grad, (z - mu) / 2.0)

    def test_matches_inference_objective_up_to_factor_two(self):
        # zeta2 = 1, mu = 0, sigma~ = sigma: objective == 2 * Phi, pointwise
        rng = np.random.default_rng(9)
        net = nets.init_network(4, 3, 3, 8, seed=2)
        inv_sigma2 = 1.8e-4
        for _ in range(20):
            cloud = cloud_of(
                rng.uniform(-1, 1, (5, 3)), rng.standard_normal(5), rng.integers(1, 4, 5)
            )
            spec = P.PosteriorSpec(
                net=net, cloud=cloud, zeta2=1.0, mu=np.zeros(4), sigma_tilde2=1.0 / inv_sigma2
            )
            z = rng.standard_normal(4)
            value = P.neg_log_posterior(spec, z)[0]
            pts = np.array([o.x for o in cloud])
            pred = nets.forward_batch(net, pts, z)
            resid = pred[np.arange(5), [o.j - 1 for o in cloud]] - [o.s for o in cloud]
            objective = float(np.mean(resid**2)) + inv_sigma2 * float(np.dot(z, z))
            assert objective == pytest.approx(2.0 * value, rel=1e-12)

    def test_invalid_surface_rejected(self):
        net = constant_net(0.0, L=2)
        cloud = cloud_of(np.zeros((1, 3)), [0.0], [3])
        with pytest.raises(ValueError):
            P.PosteriorSpec(net=net, cloud=cloud, zeta2=1.0)


class TestMapEstimate:
    def test_prior_only_converges_to_mu(self):
        net = constant_net(0.0)
        mu = np.array([0.7, -1.2])
        spec = P.PosteriorSpec(net=net, cloud=[], zeta2=1.0, mu=mu, sigma_tilde2=0.5)
        z = P.map_estimate(spec, np.zeros(2), iters=3000, lr=0.05)
        assert np.abs(z - mu).max() < 1e-6

    def test_zero_iters_returns_init(self):
        net = constant_net(0.0)
        spec = P.PosteriorSpec(net=net, cloud=[], zeta2=1.0)
        init = np.array([0.4, 0.6])
        assert np.array_equal(P.map_estimate(spec, init, iters=0), init)

    def test_descends_on_conjugate_target(self):
        stub = LinearForwardStub(seed=4)
        rng = np.random.default_rng(4)
        pts = rng.uniform(-1, 1, (30, 3))
        jj = rng.integers(1, 3, 30)
        s = rng.standard_normal(30)
        spec = P.PosteriorSpec(net=stub, cloud=cloud_of(pts, s, jj), zeta2=0.5, sigma_tilde2=2.0)
        init = rng.standard_normal(4)
        z = P.map_estimate(spec, init, iters=2000, lr=0.05)
        mean, _ = conjugate_posterior(stub, pts, s, jj, 0.5, np.zeros(4), 2.0)
        assert np.abs(z - mean).max() < 1e-4


class TestLaplace:
    def test_exact_on_quadratic(self):
        a = np.array([[2.0, 0.4], [0.4, 1.0]])
        target = QuadraticTarget(a, np.array([1.0, -2.0]))
        lap = P.laplace_approx(target, np.array([1.0, -2.0]))
        assert np.abs(lap.covariance - np.linalg.inv(a)).max() < 1e-6
        assert np.array_equal(lap.mean, [1.0, -2.0])

    def test_one_dimensional_example(self):
        # Phi = (z - 3)^2 / (2 * 0.25) -> N(3, 0.25)
        target = QuadraticTarget(np.array([[4.0]]), np.array([3.0]))
        lap = P.laplace_approx(target, np.array([3.0]))
        assert lap.covariance[0, 0] == pytest.approx(0.25, abs=1e-8)

    def test_draws_recover_covariance(self):
        a = np.array([[1.5, -0.2, 0.0], [-0.2, 0.8, 0.1], [0.0, 0.1, 2.0]])
        target = QuadraticTarget(a, np.zeros(3))
        lap = P.laplace_approx(target, np.zeros(3))
        draws = lap.draw(100_000, seed=0)
        want = np.linalg.inv(a)
        err = np.linalg.norm(np.cov(draws.T) - want) / np.linalg.norm(want)
        assert err < 0.03

    def test_warns_away_from_mode(self):
        target = QuadraticTarget(np.eye(2), np.zeros(2))
        with pytest.warns(RuntimeWarning, match="not.*small|mode"):
            P.laplace_approx(target, np.array([1.0, 1.0]))

    def test_indefinite_hessian_rejected(self):
        saddle = QuadraticTarget(np.diag([1.0, -1.0]), np.zeros(2))
        with pytest.raises(nets.NumericalError, match="eigenvalue"):
            P.laplace_approx(saddle, np.zeros(2))


class TestLeapfrog:
    def test_free_particle(self):
        class Flat:
            dim = 2

            def value_and_grad(self, q):
                return 0.0, np.zeros_like(q)

        z, p = P.leapfrog(Flat(), np.zeros(2), np.array([1.0, -2.0]), 0.3, mass=np.array([1.0, 4.0]))
        assert np.allclose(z, [0.3, -0.15])
        assert np.allclose(p, [1.0, -2.0])

    def test_hand_stepped_harmonic(self):
        target = GaussianTarget(0.0, 1.0)
        z, p = P.leapfrog(target, np.array([1.0]), np.array([0.0]), 0.1)
        assert z[0] == pytest.approx(0.995, abs=1e-15)
        assert p[0] == pytest.approx(-0.09975, abs=1e-15)

    def test_reversibility(self):
        target = GaussianTarget(np.zeros(3), np.array([1.0, 0.5, 2.0]))
        rng = np.random.default_rng(0)
        z0 = rng.standard_normal(3)
        p0 = rng.standard_normal(3)
        mass = np.array([1.0, 2.0, 0.5])
        z, p = z0.copy(), p0.copy()
        for _ in range(25):
            z, p = P.leapfrog(target, z, p, 0.05, mass=mass)
        z, p = z, -p
        for _ in range(25):
            z, p = P.leapfrog(target, z, p, 0.05, mass=mass)
        assert np.abs(z - z0).max() < 1e-12
        assert np.abs(-p - p0).max() < 1e-12

    def test_energy_error_scales_quadratically(self):
        target = GaussianTarget(0.0, 1.0)
        rng = np.random.default_rng(1)

        def mean_abs_dh(eps, n_steps, reps=3000):
            total = 0.0
            for _ in range(reps):
                z = rng.standard_normal(1)
                p = rng.standard_normal(1)
                h0 = target.value_and_grad(z)[0] + 0.5 * p @ p
                zi, pi = z, p
                for _ in range(n_steps):
                    zi, pi = P.leapfrog(target, zi, pi, eps)
                h1 = target.value_and_grad(zi)[0] + 0.5 * pi @ pi
                total += abs(h1 - h0)
            return total / reps

        ratio = mean_abs_dh(0.2, 10) / mean_abs_dh(0.1, 10)
        assert 3.0 <= ratio <= 5.0

    def test_positive_step_required(self):
        with pytest.raises(ValueError):
            P.leapfrog(GaussianTarget(0.0, 1.0), np.zeros(1), np.zeros(1), 0.0)


class TestHMC:
    def test_standard_normal_moments(self):
        target = GaussianTarget(0.0, 1.0)
        cfg = P.HMCConfig(step_size=0.5, leapfrog_steps=8, n_warmup=100, n_samples=500, seed=21)
        chains = P.sample_chains(target, cfg, method="hmc", init=np.zeros(1), n_chains=20)
        pooled = np.concatenate([c.samples[:, 0] for c in chains])
        from shapeuq.diagnostics import ess

        ess_pooled = sum(ess(c.samples[:, 0]) for c in chains)
        assert abs(pooled.mean()) < 4.0 / np.sqrt(ess_pooled)
        assert abs(pooled.var() - 1.0) < 0.1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            P.HMCConfig(leapfrog_steps=0)
        with pytest.raises(ValueError):
            P.HMCConfig(n_samples=0)
        with pytest.raises(ValueError):
            P.HMCConfig(target_accept=1.0)

    def test_divergences_recorded_and_rejected(self):
        # enormous curvature with a huge fixed step: |dH| > 1000 every time
        target = QuadraticTarget(np.array([[1e8]]), np.zeros(1))
        cfg = P.HMCConfig(step_size=10.0, leapfrog_steps=5, n_warmup=0, n_samples=20, seed=0)
        chain = P.hmc_sample(target, cfg, np.array([5.0]))
        assert len(chain.divergences) == 20
        assert np.all(chain.samples == 5.0)
        assert np.all(chain.accept_stats == 0.0)

    def test_mass_adaptation_matches_scales(self):
        var = np.array([1.0, 0.4, 0.1, 0.04, 0.01])
        target = GaussianTarget(np.zeros(5), var)
        cfg = P.HMCConfig(step_size=0.5, leapfrog_steps=10, n_warmup=600, n_samples=300, seed=3)
        chain = P.hmc_sample(target, cfg, np.zeros(5))
        ratio = chain.mass * var  # mass should approximate 1 / var
        assert np.all(ratio > 0.5) and np.all(ratio < 2.0)

    def test_chains_bit_reproducible(self):
        target = GaussianTarget(np.zeros(2), np.ones(2))
        cfg = P.HMCConfig(n_warmup=30, n_samples=50, leapfrog_steps=5, seed=7)
        a = P.hmc_sample(target, cfg, np.zeros(2), chain_index=3)
        b = P.hmc_sample(target, cfg, np.zeros(2), chain_index=3)
        assert np.array_equal(a.samples, b.samples)
        c = P.hmc_sample(target, cfg, np.zeros(2), chain_index=4)
        assert not np.array_equal(a.samples, c.samples)

    def test_threaded_matches_sequential(self):
        target = GaussianTarget(np.zeros(2), np.ones(2))
        cfg = P.HMCConfig(n_warmup=20, n_samples=30, leapfrog_steps=5, seed=9)
        seq = P.sample_chains(target, cfg, method="hmc", init=np.zeros(2), n_chains=4, threads=1)
        par = P.sample_chains(target, cfg, method="hmc", init=np.zeros(2), n_chains=4, threads=4)
        for a, b in zip(seq, par):
            assert np.array_equal(a.samples, b.samples)


class TestNUTS:
    def test_standard_normal_ks(self):
        target = GaussianTarget(np.zeros(3), np.ones(3))
        cfg = P.HMCConfig(step_size=1.0, n_warmup=100, n_samples=500, seed=31)
        chains = P.sample_chains(target, cfg, method="nuts", init=np.zeros(3), n_chains=20)
        pooled = np.vstack([c.samples for c in chains])
        assert pooled.shape[0] == 10_000
        for k in range(3):
            assert kstest(pooled[:, k], "norm").pvalue > 0.01

    def test_quadratic_tree_depth_bounded(self):
        target = GaussianTarget(0.0, 1.0)
        cfg = P.HMCConfig(step_size=1.0, n_warmup=100, n_samples=400, seed=5)
        chain = P.nuts_sample(target, cfg, np.zeros(1))
        assert len(chain.divergences) == 0
        assert chain.mean_tree_depth <= 4.0
        assert chain.depth_saturations == 0

    def test_conjugate_linear_forward_posterior(self):
        stub = LinearForwardStub(latent_dim=4, surface_count=2, seed=11)
        rng = np.random.default_rng(11)
        pts = rng.uniform(-1, 1, (40, 3))
        jj = rng.integers(1, 3, 40)
        z_true = rng.standard_normal(4)
        s = stub.forward_batch(pts, z_true)[np.arange(40), jj - 1] + 0.1 * rng.standard_normal(40)
        zeta2, sigma2 = 0.25, 1.5
        spec = P.PosteriorSpec(
            net=stub, cloud=cloud_of(pts, s, jj), zeta2=zeta2, sigma_tilde2=sigma2
        )
        mean, cov = conjugate_posterior(stub, pts, s, jj, zeta2, np.zeros(4), sigma2)
        cfg = P.HMCConfig(step_size=1.0, n_warmup=150, n_samples=600, seed=13)
        chains = P.sample_chains(spec, cfg, method="nuts", init=mean, n_chains=8)
        pooled = np.vstack([c.samples for c in chains])
        mean_err = np.linalg.norm(pooled.mean(0) - mean) / np.linalg.norm(mean)
        cov_err = np.linalg.norm(np.cov(pooled.T) - cov) / np.linalg.norm(cov)
        assert mean_err < 0.05
        assert cov_err < 0.05

    def test_saturation_counter(self):
        # a nearly flat target never U-turns within a shallow tree
        target = GaussianTarget(np.zeros(2), np.full(2, 1e6))
        cfg = P.HMCConfig(step_size=0.1, n_warmup=0, n_samples=10, max_tree_depth=2, seed=1)
        chain = P.nuts_sample(target, cfg, np.zeros(2))
        assert chain.depth_saturations == 10

    def test_bit_reproducible(self):
        target = GaussianTarget(np.zeros(2), np.ones(2))
        cfg = P.HMCConfig(n_warmup=40, n_samples=60, seed=17)
        a = P.nuts_sample(target, cfg, np.zeros(2), chain_index=0)
        b = P.nuts_sample(target, cfg, np.zeros(2), chain_index=0)
        assert np.array_equal(a.samples, b.samples)


class TestJointNoise:
    def _spec(self, resid, k=30, seed=0):
        net = constant_net(resid, d=2, L=2)
        rng = np.random.default_rng(seed)
        cloud = cloud_of(rng.uniform(-1, 1, (k, 3)), np.zeros(k), rng.integers(1, 3, k))
        return P.PosteriorSpec(
            net=net, cloud=cloud, zeta2="inferred", mu=np.zeros(2), sigma_tilde2=1.0
        )

    def test_samples_respect_bounds(self):
        spec = self._spec(resid=0.5)
        cfg = P.HMCConfig(n_warmup=50, n_samples=200, seed=2)
        chain = P.joint_noise_sample(spec, cfg, np.zeros(2))
        assert chain.has_zeta2
        assert np.all(chain.zeta2 > 1e-4) and np.all(chain.zeta2 < 10.0)

    def test_small_residuals_concentrate_at_lower_bound(self):
        spec = self._spec(resid=0.005)
        cfg = P.HMCConfig(n_warmup=100, n_samples=400, seed=3)
        chain = P.joint_noise_sample(spec, cfg, np.zeros(2))
        assert chain.zeta2.mean() < 5e-4
        assert np.quantile(chain.zeta2, 0.9) < 1e-3

    def test_requires_cloud(self):
        net = constant_net(0.0)
        spec = P.PosteriorSpec(net=net, cloud=[], zeta2="inferred")
        with pytest.raises(ValueError):
            spec.joint_target()

    def test_fixed_mode_rejects_joint(self):
        net = constant_net(0.0)
        spec = P.PosteriorSpec(net=net, cloud=[], zeta2=1.0)
        with pytest.raises(ValueError):
            spec.joint_target()


class TestMMSE:
    def test_single_sample(self):
        assert np.array_equal(P.mmse(np.array([[1.0, 2.0]])), [1.0, 2.0])

    def test_symmetric_pair(self):
        z = np.array([0.5, -1.0, 2.0])
        assert np.allclose(P.mmse(np.vstack([z, -z])), 0.0)

    def test_gaussian_concentration(self):
        rng = np.random.default_rng(0)
        m = np.array([1.0, -2.0, 0.5])
        draws = m + rng.standard_normal((1000, 3))
        assert np.abs(P.mmse(draws) - m).max() < 4.0 / np.sqrt(1000)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            P.mmse(np.zeros((0, 3)))


class TestChainIO:
    def test_round_trip(self, tmp_path):
        chain = P.Chain(
            samples=np.array([[0.1, 0.2, 3.0], [0.3, 0.4, 2.0]]),
            accept_stats=np.ones(2),
            energies=np.zeros(2),
            latent_dim=2,
            has_zeta2=True,
        )
        path = tmp_path / "chain.csv"
        P.save_chain(path, chain)
        header = path.read_text().splitlines()[0]
        assert header == "z_0,z_1,zeta2"
        samples, has_zeta2 = P.load_chain(path)
        assert has_zeta2
        assert np.array_equal(samples, chain.samples)
