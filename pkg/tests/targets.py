"""Analytic sampling targets and stub forward models shared across tests."""

import numpy as np


class GaussianTarget:
    """Negative log-density of N(mean, diag(var))."""

    def __init__(self, mean, var):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.var = np.broadcast_to(np.asarray(var, dtype=float), self.mean.shape).copy()
        self.dim = self.mean.size

    def value_and_grad(self, q):
        d = (q - self.mean) / self.var
        return 0.5 * float(np.dot(q - self.mean, d)), d


class QuadraticTarget:
    """Phi(z) = 0.5 (z - a)^T A (z - a) for a fixed SPD matrix A."""

    def __init__(self, matrix, center):
        self.matrix = np.asarray(matrix, dtype=float)
        self.center = np.asarray(center, dtype=float)
        self.dim = self.center.size

    def value_and_grad(self, q):
        d = q - self.center
        g = self.matrix @ d
        return 0.5 * float(d @ g), g


class LinearForwardStub:
    """Linear multi-surface forward model f(x, z) = A(x) z + b(x).

    The per-point matrices are smooth deterministic functions of x so the
    induced shape posterior is exactly Gaussian and conjugate.
    """

    def __init__(self, latent_dim=4, surface_count=2, seed=0):
        rng = np.random.default_rng(seed)
        self.latent_dim = latent_dim
        self.surface_count = surface_count
        self.proj = rng.standard_normal((surface_count, latent_dim, 4))
        self.bias = rng.standard_normal((surface_count, 4))

    def _features(self, points):
        points = np.atleast_2d(points)
        return np.concatenate([points, np.ones((points.shape[0], 1))], axis=1)

    def matrices(self, points):
        feats = self._features(points)  # (n, 4)
        a = np.einsum("ldk,nk->nld", self.proj, feats)
        b = feats @ self.bias.T
        return a, b

    def forward_batch(self, points, z):
        a, b = self.matrices(points)
        return np.einsum("nld,d->nl", a, z) + b

    def vjp_latent(self, points, z, cotangents):
        a, _ = self.matrices(points)
        return np.einsum("nld,nl->d", a, cotangents)


def conjugate_posterior(stub, points, s, j, zeta2, mu, sigma_tilde2):
    """Closed-form Gaussian posterior for the linear forward stub."""
    a, b = stub.matrices(points)
    rows = a[np.arange(len(s)), j - 1]  # (n, d)
    y = s - b[np.arange(len(s)), j - 1]
    k = len(s)
    lam = rows.T @ rows / (k * zeta2) + np.eye(stub.latent_dim) / sigma_tilde2
    rhs = rows.T @ y / (k * zeta2) + np.asarray(mu) / sigma_tilde2
    cov = np.linalg.inv(lam)
    return cov @ rhs, cov
