import numpy as np
import pytest

from shapeuq import synthetic as syn
from shapeuq.synthetic import EllipsoidFamilyParams, EllipsoidShape


def one_ellipsoid(axes=(0.3, 0.5, 0.7), center=(0.0, 0.0, 0.0)):
    return EllipsoidShape(centers=[center], axes=[axes])


class TestAnalyticSdf:
    def test_sphere_special_case(self):
        shape = one_ellipsoid(axes=(0.5, 0.5, 0.5), center=(0.1, -0.2, 0.05))
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, (500, 3))
        got = syn.analytic_sdf_batch(shape, pts, 1)
        want = np.linalg.norm(pts - np.array([0.1, -0.2, 0.05]), axis=1) - 0.5
        assert np.abs(got - want).max() < 1e-12

    def test_center_point(self):
        shape = one_ellipsoid()
        assert syn.analytic_sdf(shape, [0.0, 0.0, 0.0], 1) == pytest.approx(-0.3, abs=1e-12)

    def test_brute_force_tessellation(self):
        # dense-sampling oracle: 10^6 surface points bound the true distance
        shape = one_ellipsoid()
        th = np.linspace(0.0, np.pi, 1000)
        ph = np.linspace(0.0, 2 * np.pi, 1000)
        tg, pg = np.meshgrid(th, ph, indexing="ij")
        surf = np.stack(
            [
                0.3 * np.sin(tg) * np.cos(pg),
                0.5 * np.sin(tg) * np.sin(pg),
                0.7 * np.cos(tg),
            ],
            axis=-1,
        ).reshape(-1, 3)
        rng = np.random.default_rng(1)
        probes = rng.uniform(-1, 1, (200, 3))
        got = np.abs(syn.analytic_sdf_batch(shape, probes, 1))
        brute = np.empty(len(probes))
        for i, p in enumerate(probes):
            brute[i] = np.min(np.linalg.norm(surf - p, axis=1))
        assert np.abs(got - brute).max() < 1e-3

    def test_zero_coordinate_points(self):
        shape = one_ellipsoid()
        probes = np.array(
            [[0, 0, 0.69], [0, 0.49, 0], [0.29, 0, 0], [0, 0, 1.0], [0, 0.5, 0.0]]
        )
        got = syn.analytic_sdf_batch(shape, probes, 1)
        assert got[0] == pytest.approx(-0.01, abs=1e-9)
        assert got[3] == pytest.approx(0.3, abs=1e-9)
        assert np.all(np.isfinite(got))

    def test_eikonal_property(self):
        shape = one_ellipsoid()
        rng = np.random.default_rng(2)
        probes = rng.uniform(-0.95, 0.95, (300, 3))
        h = 1e-6
        grads = np.zeros((len(probes), 3))
        for ax in range(3):
            dp = probes.copy()
            dm = probes.copy()
            dp[:, ax] += h
            dm[:, ax] -= h
            grads[:, ax] = (
                syn.analytic_sdf_batch(shape, dp, 1) - syn.analytic_sdf_batch(shape, dm, 1)
            ) / (2 * h)
        norms = np.linalg.norm(grads, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-4

    def test_surface_index_validation(self):
        with pytest.raises(ValueError):
            syn.analytic_sdf(one_ellipsoid(), [0, 0, 0], 2)


class TestFamilyParams:
    def test_default_ranges_valid(self):
        params = syn.default_family_params()
        assert params.surface_count == 4

    def test_invariant_violating_ranges_rejected(self):
        base = syn.default_family_params()
        with pytest.raises(ValueError):
            EllipsoidFamilyParams(
                center_lo=base.center_lo,
                center_hi=base.center_hi,
                axes_lo=base.axes_lo,
                axes_hi=base.axes_hi + 0.2,  # shells may now collide
            )
        with pytest.raises(ValueError):
            EllipsoidFamilyParams(
                center_lo=base.center_lo,
                center_hi=base.center_hi,
                axes_lo=base.axes_lo + 0.3,
                axes_hi=base.axes_hi + 0.3,  # outermost shell leaves the box
            )


class TestGenerateFamily:
    def test_degenerate_ranges_deterministic_midpoint(self):
        base = syn.default_family_params(seed=0)
        fixed = EllipsoidFamilyParams(
            center_lo=base.center_lo,
            center_hi=base.center_hi,
            axes_lo=(base.axes_lo + base.axes_hi) / 2,
            axes_hi=(base.axes_lo + base.axes_hi) / 2,
            seed=0,
        )
        (shape, _), = syn.generate_family(fixed, 1, points_per_shape=16)
        assert np.allclose(shape.axes, (base.axes_lo + base.axes_hi) / 2)

    def test_sample_signs_match_implicit_inequality(self):
        params = syn.default_family_params(seed=3)
        pairs = syn.generate_family(params, 2, points_per_shape=300)
        for shape, ts in pairs:
            for ell in range(4):
                q = np.sum(
                    (ts.points - shape.centers[ell]) ** 2 / shape.axes[ell] ** 2, axis=1
                )
                off_surface = np.abs(q - 1.0) > 1e-9
                inside = q[off_surface] < 1.0
                assert np.array_equal(ts.sdf[off_surface, ell] < 0, inside)

    def test_surface_parametrization_points_have_tiny_sdf(self):
        shape = one_ellipsoid()
        rng = np.random.default_rng(4)
        dirs = rng.standard_normal((400, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = np.array([0.3, 0.5, 0.7]) * dirs
        s = syn.analytic_sdf_batch(shape, pts, 1)
        assert np.abs(s).max() < 1e-3

    def test_nesting_of_emitted_samples(self):
        params = syn.default_family_params(seed=5)
        pairs = syn.generate_family(params, 2, points_per_shape=400)
        for _, ts in pairs:
            outside_outer = ts.sdf[:, 3] > 0
            # outside the outermost shell, the inner shells are at least as far
            assert np.all(ts.sdf[outside_outer, 0] >= ts.sdf[outside_outer, 3] - 1e-12)

    def test_requires_positive_count(self):
        with pytest.raises(ValueError):
            syn.generate_family(syn.default_family_params(), 0)


class TestSurfaceCloud:
    def test_zero_noise_lies_on_surface(self):
        shape = one_ellipsoid()
        obs = syn.surface_cloud(shape, 1, 50, zeta=0.0, seed=0)
        pts = np.array([o.x for o in obs])
        assert np.abs(syn.analytic_sdf_batch(shape, pts, 1)).max() < 1e-9
        assert all(o.s == 0.0 and o.j == 1 for o in obs)

    def test_noise_displaces_along_normal(self):
        shape = one_ellipsoid()
        zeta = 0.02
        obs = syn.surface_cloud(shape, 1, 4000, zeta=zeta, seed=1)
        pts = np.array([o.x for o in obs])
        s = syn.analytic_sdf_batch(shape, pts, 1)
        # |sdf| of a point displaced tau along the normal is |tau| (small tau)
        assert np.std(s) == pytest.approx(zeta, rel=0.1)

    def test_deterministic(self):
        shape = one_ellipsoid()
        a = syn.surface_cloud(shape, 1, 10, zeta=0.01, seed=5)
        b = syn.surface_cloud(shape, 1, 10, zeta=0.01, seed=5)
        assert all(np.array_equal(x.x, y.x) for x, y in zip(a, b))


class TestFamilyIO:
    def test_round_trip(self, tmp_path):
        params = syn.default_family_params(seed=9)
        pairs = syn.generate_family(params, 3, points_per_shape=8)
        shapes = [s for s, _ in pairs]
        path = tmp_path / "family.json"
        syn.save_family(path, shapes, params)
        loaded = syn.load_family(path)
        assert len(loaded) == 3
        for a, b in zip(shapes, loaded):
            assert np.allclose(a.centers, b.centers)
            assert np.allclose(a.axes, b.axes)
