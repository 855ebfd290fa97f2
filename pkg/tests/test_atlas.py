import numpy as np
import pytest

from shapeuq import atlas, network as nets
from shapeuq.atlas import LatentTable, TrainConfig, TrainingShape


def zero_net(d=2, L=4, depth=2, width=4, final_bias=0.0):
    net = nets.init_network(d, L, depth, width, seed=0)
    for i in range(net.depth):
        net.weights[i][:] = 0.0
        net.biases[i][:] = 0.0
    net.biases[-1][:] = final_bias
    return net


class TestTrainingLoss:
    def test_perfect_fit_is_zero(self):
        net = zero_net()
        table = LatentTable(np.zeros((1, 2)), [0])
        batch = [(0, [0.1, 0.2, 0.3], np.zeros(4))]
        cfg = TrainConfig(epochs=1, alpha=0.0, latent_dim=2, depth=2, width=4)
        assert atlas.training_loss(net, table, batch, cfg) == 0.0

    def test_hand_computed_value(self):
        # one shape, one point, residual norm^2 = 0.16 with L=4, ||z||^2 = 1e4
        net = zero_net(final_bias=0.2)  # residual 0.2 per surface -> 0.16 total
        table = LatentTable(np.array([[100.0, 0.0]]), [0])
        batch = [(0, [0.0, 0.0, 0.0], np.zeros(4))]
        cfg = TrainConfig(epochs=1, inv_sigma2=1.8e-8, alpha=0.0, latent_dim=2)
        loss = atlas.training_loss(net, table, batch, cfg)
        assert loss == pytest.approx(0.04018, rel=1e-12)

    def test_lipschitz_term_strictly_increases(self):
        net = zero_net()
        net.lipschitz_logits = np.ones(net.depth)
        table = LatentTable(np.zeros((1, 2)), [0])
        batch = [(0, [0.0, 0.0, 0.0], np.zeros(4))]
        base = atlas.training_loss(net, table, batch, TrainConfig(epochs=1, alpha=0.0))
        bumped = atlas.training_loss(net, table, batch, TrainConfig(epochs=1, alpha=1e-3))
        assert bumped > base

    def test_unknown_shape_id(self):
        net = zero_net()
        table = LatentTable(np.zeros((1, 2)), [0])
        with pytest.raises(ValueError):
            atlas.training_loss(net, table, [(99, [0, 0, 0], np.zeros(4))], TrainConfig(epochs=1))

    def test_prior_scaling_is_linear(self):
        net = zero_net()
        z = np.array([[0.5, -1.5]])
        table = LatentTable(z, [0])
        batch = [(0, [0.0, 0.0, 0.0], np.ones(4))]
        kappa = 1e-3
        l1 = atlas.training_loss(net, table, batch, TrainConfig(epochs=1, inv_sigma2=kappa, alpha=0.0))
        l2 = atlas.training_loss(net, table, batch, TrainConfig(epochs=1, inv_sigma2=2 * kappa, alpha=0.0))
        prior = kappa * float(np.sum(z**2))
        assert l2 - l1 == pytest.approx(prior, rel=1e-12)


def toy_shapes(n=3, k=40, d_axes=(0.3, 0.45), seed=0):
    """Tiny sphere-family stand-in: SDF of one sphere per shape, L=2 shells."""
    rng = np.random.default_rng(seed)
    shapes = []
    for i in range(n):
        r1 = rng.uniform(*d_axes)
        pts = rng.uniform(-1, 1, (k, 3))
        rad = np.linalg.norm(pts, axis=1)
        sdf = np.column_stack([rad - r1, rad - (r1 + 0.2)])
        shapes.append(TrainingShape(id=i, points=pts, sdf=sdf))
    return shapes


class TestTrainAtlas:
    def test_zero_epochs_returns_init(self):
        shapes = toy_shapes()
        cfg = TrainConfig(epochs=0, seed=5, latent_dim=3, depth=2, width=8)
        net, table, history = atlas.train_atlas(shapes, cfg)
        assert history == []
        assert table.codes.shape == (3, 3)
        ref = nets.normalize_lipschitz(nets.init_network(3, 2, 2, 8, seed=5))
        assert np.array_equal(nets.param_vector(net), nets.param_vector(ref))

    def test_deterministic(self):
        shapes = toy_shapes()
        cfg = TrainConfig(epochs=25, seed=5, latent_dim=3, depth=2, width=8)
        net1, t1, h1 = atlas.train_atlas(shapes, cfg)
        net2, t2, h2 = atlas.train_atlas(shapes, cfg)
        assert h1 == h2
        assert np.array_equal(t1.codes, t2.codes)
        assert np.array_equal(nets.param_vector(net1), nets.param_vector(net2))

    def test_loss_decreases_smoothed(self):
        shapes = toy_shapes(n=4, k=120, seed=1)
        cfg = TrainConfig(epochs=300, learning_rate=0.01, seed=2, latent_dim=3, depth=2, width=16)
        _, _, history = atlas.train_atlas(shapes, cfg)
        h = np.array(history)
        kernel = np.ones(10) / 10
        smooth = np.convolve(h, kernel, mode="valid")
        tail = smooth[int(0.2 * len(smooth)):]
        ripple = (tail[1:] - tail[:-1]) / tail[:-1]
        assert ripple.max() < 0.05
        assert tail[-1] < tail[0]

    def test_latent_gradient_matches_finite_differences(self):
        shapes = toy_shapes(n=2, k=15, seed=3)
        cfg = TrainConfig(epochs=1, seed=4, latent_dim=3, depth=2, width=8, alpha=1e-6, inv_sigma2=1e-4)
        net = nets.init_network(3, 2, 2, 8, seed=4)
        rng = np.random.default_rng(0)
        table = LatentTable(0.5 * rng.standard_normal((2, 3)), [0, 1])
        batch = [(s.id, x, sv) for s in shapes for x, sv in zip(s.points, s.sdf)]

        x, sv, rows, n_shapes = atlas._batch_arrays(shapes, table)
        counts = np.bincount(rows)
        point_w = 1.0 / (2 * counts[rows])
        _, _, _, _, grad_codes = atlas._loss_and_grads(
            net, table.codes, x, sv, rows, point_w, np.unique(rows), n_shapes, cfg
        )

        step = 1e-6
        for row in range(2):
            for k in range(3):
                tp = LatentTable(table.codes.copy(), [0, 1])
                tm = LatentTable(table.codes.copy(), [0, 1])
                tp.codes[row, k] += step
                tm.codes[row, k] -= step
                fd = (
                    atlas.training_loss(net, tp, batch, cfg)
                    - atlas.training_loss(net, tm, batch, cfg)
                ) / (2 * step)
                got = grad_codes[row, k]
                assert abs(got - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_nan_abort_names_epoch(self):
        shapes = toy_shapes(n=2, k=10)
        cfg = TrainConfig(
            epochs=50, inv_sigma2=float("inf"), seed=0, latent_dim=2, depth=2, width=4
        )
        with pytest.raises(nets.NumericalError, match="epoch 0"):
            atlas.train_atlas(shapes, cfg)


class TestFitPrior:
    def test_symmetric_pair(self):
        z = np.array([1.0, -2.0, 0.5])
        mu, s2 = atlas.fit_prior(np.vstack([z, -z]))
        assert np.allclose(mu, 0.0)
        assert s2 == pytest.approx(float(np.dot(z, z)) / 3, rel=1e-12)

    def test_hand_values(self):
        mu, s2 = atlas.fit_prior(np.array([[1.0, 1.0], [3.0, 3.0]]))
        assert np.allclose(mu, [2.0, 2.0])
        assert s2 == pytest.approx(1.0, rel=1e-12)

    def test_identical_codes_give_zero_variance(self):
        mu, s2 = atlas.fit_prior(np.array([[2.0, 2.0], [2.0, 2.0]]))
        assert s2 == 0.0

    def test_requires_two_codes(self):
        with pytest.raises(ValueError):
            atlas.fit_prior(np.array([[1.0, 2.0]]))


class TestTrainingSetIO:
    def test_round_trip(self, tmp_path):
        shapes = toy_shapes(n=2, k=7)
        manifest = atlas.save_training_set(tmp_path / "set", shapes)
        loaded = atlas.load_training_set(manifest)
        assert [s.id for s in loaded] == [0, 1]
        for a, b in zip(shapes, loaded):
            assert np.array_equal(a.points, b.points)
            assert np.array_equal(a.sdf, b.sdf)
