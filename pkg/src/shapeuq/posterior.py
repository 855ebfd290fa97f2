"""Bayesian latent inference for the shape network.

The target is the negative log-posterior over a latent code given a point
cloud of (position, signed distance, surface index) observations: a Gaussian
data term weighted by 1/(2 K zeta^2), a Gaussian prior on the code, and,
when the noise variance is inferred, the tempered-likelihood normalization
(1/2) ln zeta^2.  Point estimates come from Adam (MAP) or the posterior mean
of a chain (MMSE); uncertainty from a finite-difference Laplace Gaussian or
from HMC / NUTS chains with dual-averaging step-size and Welford mass-matrix
warm-up.

Any object exposing ``dim`` and ``value_and_grad(state) -> (value, grad)``
can be sampled; PosteriorSpec provides the shape-reconstruction target.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import network as nets
from .geometry import observations_to_arrays
from .network import NumericalError

__all__ = [
    "PosteriorSpec",
    "HMCConfig",
    "Chain",
    "neg_log_posterior",
    "map_estimate",
    "laplace_approx",
    "LaplaceApproximation",
    "leapfrog",
    "hmc_sample",
    "nuts_sample",
    "joint_noise_sample",
    "sample_chains",
    "mmse",
    "chain_rng",
    "save_chain",
    "load_chain",
]

ZETA2_MIN = 1e-4
DIVERGENCE_ENERGY = 1000.0


@dataclass
class PosteriorSpec:
    """Target definition: network, observations, noise variance and prior."""

    net: object
    cloud: list
    zeta2: object = 1.0  # positive float, or the string "inferred"
    mu: np.ndarray = None
    sigma_tilde2: float = 1.0
    zeta2_prior_bounds: tuple = (ZETA2_MIN, 10.0)

    def __post_init__(self):
        self.points, self.s, self.j = observations_to_arrays(self.cloud)
        d = self.net.latent_dim
        self.mu = np.zeros(d) if self.mu is None else np.asarray(self.mu, dtype=float).reshape(d)
        self.sigma_tilde2 = float(self.sigma_tilde2)
        if self.sigma_tilde2 <= 0:
            raise ValueError("sigma_tilde2 must be positive")
        if self.inferred:
            lo, hi = self.zeta2_prior_bounds
            if lo < ZETA2_MIN:
                raise ValueError(f"zeta2 lower bound must be >= {ZETA2_MIN}")
            if hi <= lo:
                raise ValueError("zeta2 bounds must satisfy hi > lo")
        else:
            self.zeta2 = float(self.zeta2)
            if self.zeta2 <= 0:
                raise ValueError("fixed zeta2 must be positive")
        L = getattr(self.net, "surface_count", None)
        if L is not None and self.j.size and (self.j.min() < 1 or self.j.max() > L):
            raise ValueError(f"surface indices must lie in 1..{L}")

    @property
    def inferred(self):
        return isinstance(self.zeta2, str) and self.zeta2 == "inferred"

    @property
    def dim(self):
        return self.net.latent_dim

    def _residuals_and_cache(self, z):
        if self.points.shape[0] == 0:
            return np.zeros(0), None
        if isinstance(self.net, nets.ShapeNetwork):
            u0 = np.concatenate(
                [self.points, np.broadcast_to(z, (self.points.shape[0], z.size))], axis=1
            )
            pred, acts = nets._forward_core(self.net.weights, self.net.biases, u0)
            resid = pred[np.arange(len(self.s)), self.j - 1] - self.s
            return resid, acts
        pred = np.asarray(self.net.forward_batch(self.points, z))
        resid = pred[np.arange(len(self.s)), self.j - 1] - self.s
        return resid, None

    def _data_grad_z(self, z, resid, acts, weight):
        """Gradient of weight * sum r_k^2 with respect to z."""
        if resid.size == 0:
            return np.zeros_like(z)
        cot = np.zeros((resid.size, self.net.surface_count))
        cot[np.arange(resid.size), self.j - 1] = 2.0 * weight * resid
        if acts is not None:
            grad_u0 = nets._backward_inputs(self.net.weights, acts, cot)
            return grad_u0[:, 3:].sum(axis=0)
        return np.asarray(self.net.vjp_latent(self.points, z, cot))

    def value_and_grad(self, z):
        val, gz, _ = neg_log_posterior(self, z)
        return val, gz

    def target(self):
        """The latent-only target (zeta2 must be fixed)."""
        if self.inferred:
            raise ValueError("latent-only target requires a fixed zeta2")
        return self

    def joint_target(self):
        """Target over (z, u) where zeta2 = lo + (hi-lo)*sigmoid(u)."""
        if not self.inferred:
            raise ValueError("joint target requires zeta2='inferred'")
        if self.points.shape[0] == 0:
            raise ValueError("joint noise inference needs a nonempty cloud")
        return _JointNoiseTarget(self)


def neg_log_posterior(spec, z, zeta2=None):
    """Value and exact gradients of the negative log-posterior.

    Returns (value, grad_z, grad_zeta2).  With a fixed noise variance the
    value is data/(2 K zeta^2) + ||z - mu||^2/(2 sigma~^2); in inferred mode
    the Gaussian normalization (K/2) ln zeta^2 of the per-point effective
    variance K zeta^2 is added so zeta^2 stays identifiable.  An empty cloud
    reduces to the prior.
    """
    z = np.asarray(z, dtype=float).reshape(spec.dim)
    if zeta2 is None:
        if spec.inferred:
            raise ValueError("zeta2 must be passed explicitly in inferred mode")
        zeta2 = spec.zeta2
    zeta2 = float(zeta2)
    if zeta2 <= 0:
        raise ValueError("zeta2 must be positive")

    resid, acts = spec._residuals_and_cache(z)
    k = resid.size
    dz_prior = (z - spec.mu) / spec.sigma_tilde2
    value = 0.5 * float(np.dot(z - spec.mu, dz_prior))
    grad_z = dz_prior
    grad_zeta2 = 0.0
    if k > 0:
        ss = float(np.dot(resid, resid))
        w = 1.0 / (2.0 * k * zeta2)
        value += w * ss
        grad_z = grad_z + spec._data_grad_z(z, resid, acts, w)
        grad_zeta2 = -w * ss / zeta2
        if spec.inferred:
            value += 0.5 * k * np.log(zeta2)
            grad_zeta2 += 0.5 * k / zeta2
    return value, grad_z, grad_zeta2


class _JointNoiseTarget:
    """Negative log-posterior over (z, u) with the scaled-logit noise transform."""

    def __init__(self, spec):
        self.spec = spec
        self.lo, self.hi = (float(b) for b in spec.zeta2_prior_bounds)
        self.dim = spec.dim + 1

    def zeta2_of(self, u):
        sig = expit(np.asarray(u, dtype=float))
        return self.lo + (self.hi - self.lo) * sig

    def u_of(self, zeta2):
        frac = (zeta2 - self.lo) / (self.hi - self.lo)
        frac = min(max(frac, 1e-12), 1 - 1e-12)
        return float(np.log(frac / (1.0 - frac)))

    def value_and_grad(self, state):
        state = np.asarray(state, dtype=float)
        z, u = state[:-1], state[-1]
        sig = expit(u)
        zeta2 = self.lo + (self.hi - self.lo) * sig
        value, grad_z, grad_zeta2 = neg_log_posterior(self.spec, z, zeta2)
        # change of variables: ln|d zeta2/du| computed in log space so deep
        # logit saturation cannot underflow
        log_jac = np.log(self.hi - self.lo) - np.logaddexp(0.0, -u) - np.logaddexp(0.0, u)
        jac = (self.hi - self.lo) * sig * (1.0 - sig)
        value -= log_jac
        grad_u = grad_zeta2 * jac - (1.0 - 2.0 * sig)
        return value, np.concatenate([grad_z, [grad_u]])


@dataclass
class HMCConfig:
    """Sampler settings shared by HMC and NUTS."""

    step_size: float = 1.0
    leapfrog_steps: int = 10
    n_warmup: int = 100
    n_samples: int = 500
    target_accept: float = 0.8
    max_tree_depth: int = 10
    mass: np.ndarray = None  # diagonal of M; defaults to ones
    step_jitter: float = 0.2  # HMC only: uniform +-fraction per transition
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.step_jitter < 1.0:
            raise ValueError("step_jitter must lie in [0, 1)")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if self.n_warmup < 0:
            raise ValueError("n_warmup must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")


@dataclass
class Chain:
    """Retained samples with per-transition statistics."""

    samples: np.ndarray
    accept_stats: np.ndarray
    energies: np.ndarray
    divergences: list = field(default_factory=list)
    step_size: float = float("nan")
    mass: np.ndarray = None
    fun_evals: int = 0
    depth_saturations: int = 0
    mean_tree_depth: float = float("nan")
    wall_time_s: float = 0.0
    latent_dim: int = 0
    has_zeta2: bool = False

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite chain samples")
        if self.latent_dim == 0:
            self.latent_dim = self.samples.shape[1] - (1 if self.has_zeta2 else 0)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def latents(self):
        return self.samples[:, : self.latent_dim]

    @property
    def zeta2(self):
        if not self.has_zeta2:
            raise ValueError("chain has no zeta2 column")
        return self.samples[:, self.latent_dim]

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accept_stats)) if len(self.accept_stats) else float("nan")


def chain_rng(seed, chain_index=0):
    """Counter-based private stream for one chain."""
    return np.random.Generator(
        np.random.Philox(key=np.random.SeedSequence([int(seed), int(chain_index)]).generate_state(2, np.uint64))
    )


class _CountingTarget:
    def __init__(self, target):
        self.inner = target
        self.dim = target.dim
        self.evals = 0

    def value_and_grad(self, q):
        self.evals += 1
        return self.inner.value_and_grad(q)


def _as_target(spec_or_target):
    if isinstance(spec_or_target, PosteriorSpec):
        return spec_or_target.target()
    if hasattr(spec_or_target, "value_and_grad"):
        return spec_or_target
    raise TypeError("expected a PosteriorSpec or an object with value_and_grad")


def mmse(chain):
    """Posterior-mean state: the arithmetic mean of the chain samples."""
    samples = np.atleast_2d(np.asarray(getattr(chain, "samples", chain), dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("chain must be nonempty")
    return samples.mean(axis=0)


def map_estimate(spec, init, iters=500, lr=0.05, seed=0, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam descent on the negative log-posterior; returns the final iterate."""
    if iters < 0:
        raise ValueError("iters must be >= 0")
    target = _as_target(spec)
    z = np.asarray(init, dtype=float).reshape(target.dim).copy()
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    for t in range(1, iters + 1):
        val, g = target.value_and_grad(z)
        if not (np.isfinite(val) and np.all(np.isfinite(g))):
            raise NumericalError(f"MAP objective became non-finite at iterate {t - 1}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g**2
        z = z - lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
    return z


@dataclass
class LaplaceApproximation:
    """Gaussian posterior approximation around a MAP mode."""

    mean: np.ndarray
    covariance: np.ndarray
    hessian: np.ndarray = None

    def draw(self, n, seed):
        """n samples via the Cholesky factor of the covariance."""
        rng = np.random.default_rng(seed)
        chol = np.linalg.cholesky(
            self.covariance + 1e-15 * np.eye(len(self.mean)) * max(1.0, np.trace(self.covariance))
        )
        return self.mean + rng.standard_normal((n, len(self.mean))) @ chol.T


def laplace_approx(spec, z_map, grad_tol=1e-3):
    """Gaussian centered at z_map with covariance = inverse FD Hessian.

    The Hessian is built from central differences of the exact gradient with
    per-coordinate steps 1e-3 * (1 + |z_j|), then symmetrized.  Eigenvalues
    slightly below the 1e-8 floor are clipped up; genuinely negative ones
    raise with the offending values listed.
    """
    target = _as_target(spec)
    z_map = np.asarray(z_map, dtype=float).reshape(target.dim)
    _, g0 = target.value_and_grad(z_map)
    if np.linalg.norm(g0) > grad_tol * (1.0 + np.linalg.norm(z_map)):
        warnings.warn(
            "laplace_approx: gradient at z_map is not small; the point may not be a mode",
            RuntimeWarning,
            stacklevel=2,
        )
    d = z_map.size
    hess = np.empty((d, d))
    for jdx in range(d):
        h = 1e-3 * (1.0 + abs(z_map[jdx]))
        zp = z_map.copy()
        zm = z_map.copy()
        zp[jdx] += h
        zm[jdx] -= h
        _, gp = target.value_and_grad(zp)
        _, gm = target.value_and_grad(zm)
        hess[:, jdx] = (gp - gm) / (2.0 * h)
    hess = 0.5 * (hess + hess.T)
    eigvals, eigvecs = np.linalg.eigh(hess)
    neg_tol = 1e-6 * max(1.0, float(eigvals.max()))
    bad = eigvals < -neg_tol
    if np.any(bad):
        raise NumericalError(
            f"Hessian is indefinite at z_map; negative eigenvalues: {eigvals[bad].tolist()}"
        )
    eigvals = np.maximum(eigvals, 1e-8)
    cov = (eigvecs / eigvals) @ eigvecs.T
    return LaplaceApproximation(mean=z_map.copy(), covariance=cov, hessian=hess)


# ---------------------------------------------------------------------------
# Hamiltonian dynamics


def leapfrog(target, z, p, eps, mass=None):
    """One symplectic leapfrog step: half kick, drift, half kick."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    target = _as_target(target)
    z = np.asarray(z, dtype=float).copy()
    p = np.asarray(p, dtype=float).copy()
    inv_mass = 1.0 / np.ones_like(z) if mass is None else 1.0 / np.asarray(mass, dtype=float)
    _, grad = target.value_and_grad(z)
    p = p - 0.5 * eps * grad
    z = z + eps * inv_mass * p
    _, grad = target.value_and_grad(z)
    p = p - 0.5 * eps * grad
    return z, p


def _leapfrog_steps(target, z, p, grad, eps, inv_mass, n_steps):
    """n_steps of leapfrog with gradient reuse; returns (z, p, value, grad)."""
    value = None
    p = p - 0.5 * eps * grad
    for step in range(n_steps):
        z = z + eps * inv_mass * p
        value, grad = target.value_and_grad(z)
        if not np.all(np.isfinite(grad)) or not np.isfinite(value):
            return z, p, np.inf, grad
        p = p - (eps if step < n_steps - 1 else 0.5 * eps) * grad
    return z, p, value, grad


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    GAMMA = 0.05
    T0 = 10.0
    KAPPA = 0.75

    def __init__(self, eps0, target_accept):
        self.mu = np.log(10.0 * eps0)
        self.target = target_accept
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.hbar = 0.0
        self.count = 0

    def update(self, accept_prob):
        self.count += 1
        frac = 1.0 / (self.count + self.T0)
        self.hbar = (1.0 - frac) * self.hbar + frac * (self.target - accept_prob)
        self.log_eps = self.mu - np.sqrt(self.count) / self.GAMMA * self.hbar
        w = self.count ** (-self.KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar

    @property
    def eps(self):
        return float(np.exp(self.log_eps))

    @property
    def averaged_eps(self):
        return float(np.exp(self.log_eps_bar))


class _Welford:
    """Running mean/variance accumulator."""

    def __init__(self, dim):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def variance(self):
        if self.count < 2:
            return None
        return self.m2 / (self.count - 1)


def _kinetic(p, inv_mass):
    return 0.5 * float(np.dot(p, inv_mass * p))


class _Sampler:
    """Shared warm-up scaffolding for the HMC and NUTS kernels."""

    def __init__(self, target, cfg, init, chain_index):
        self.target = _CountingTarget(_as_target(target))
        self.cfg = cfg
        self.rng = chain_rng(cfg.seed, chain_index)
        self.dim = self.target.dim
        z0 = np.asarray(init, dtype=float).reshape(self.dim).copy()
        val0, grad0 = self.target.value_and_grad(z0)
        if not np.isfinite(val0):
            raise ValueError("initial state has non-finite target value")
        self.state = (z0, val0, grad0)
        self.mass = np.ones(self.dim) if cfg.mass is None else np.asarray(cfg.mass, dtype=float).copy()
        if self.mass.shape != (self.dim,) or np.any(self.mass <= 0):
            raise ValueError("mass must be a positive diagonal of the state dimension")
        self.inv_mass = 1.0 / self.mass
        self.eps = cfg.step_size

    def _draw_momentum(self):
        return self.rng.standard_normal(self.dim) * np.sqrt(self.mass)

    def transition(self):
        raise NotImplementedError

    def run(self):
        cfg = self.cfg
        t_start = time.perf_counter()
        da = _DualAveraging(cfg.step_size, cfg.target_accept)
        w1 = int(np.floor(0.25 * cfg.n_warmup))
        w2 = int(np.floor(0.75 * cfg.n_warmup))
        welford = _Welford(self.dim)
        for t in range(cfg.n_warmup):
            alpha, _, _, _ = self.transition()
            da.update(alpha)
            self.eps = da.eps
            if w1 <= t < w2:
                welford.add(self.state[0])
            if t == w2 - 1 and welford.variance() is not None and welford.count >= 5:
                var = np.maximum(welford.variance(), 1e-12)
                self.mass = 1.0 / var
                self.inv_mass = var
                da = _DualAveraging(self.eps, cfg.target_accept)
        if cfg.n_warmup > 0:
            self.eps = da.averaged_eps

        samples = np.empty((cfg.n_samples, self.dim))
        accept_stats = np.empty(cfg.n_samples)
        energies = np.empty(cfg.n_samples)
        divergences = []
        saturations = 0
        depth_sum = 0
        for t in range(cfg.n_samples):
            alpha, divergent, saturated, depth = self.transition()
            samples[t] = self.state[0]
            accept_stats[t] = alpha
            energies[t] = self.state[1]
            if divergent:
                divergences.append(t)
            saturations += int(saturated)
            depth_sum += depth
        return Chain(
            samples=samples,
            accept_stats=accept_stats,
            energies=energies,
            divergences=divergences,
            step_size=self.eps,
            mass=self.mass.copy(),
            fun_evals=self.target.evals,
            depth_saturations=saturations,
            mean_tree_depth=depth_sum / cfg.n_samples,
            wall_time_s=time.perf_counter() - t_start,
            latent_dim=self.dim,
        )


class _HMCSampler(_Sampler):
    """Fixed-length HMC kernel.

    The step size is jittered uniformly per transition; a fixed step on a
    near-Gaussian target can lock onto full-period leapfrog orbits (high
    acceptance, no movement), which the jitter breaks.
    """

    def transition(self):
        z, val, grad = self.state
        eps = self.eps
        if self.cfg.step_jitter > 0:
            eps *= 1.0 + self.cfg.step_jitter * (2.0 * self.rng.random() - 1.0)
        p = self._draw_momentum()
        h0 = val + _kinetic(p, self.inv_mass)
        z1, p1, val1, grad1 = _leapfrog_steps(
            self.target, z.copy(), p, grad, eps, self.inv_mass, self.cfg.leapfrog_steps
        )
        if np.isfinite(val1):
            dh = (val1 + _kinetic(p1, self.inv_mass)) - h0
        else:
            dh = np.inf
        divergent = not np.isfinite(dh) or abs(dh) > DIVERGENCE_ENERGY
        alpha = 0.0 if divergent else float(np.exp(min(0.0, -dh)))
        if not divergent and self.rng.random() < alpha:
            self.state = (z1, val1, grad1)
        return alpha, divergent, False, self.cfg.leapfrog_steps


class _TreeState:
    __slots__ = (
        "z_minus", "p_minus", "grad_minus", "z_plus", "p_plus", "grad_plus",
        "z_prop", "val_prop", "grad_prop", "log_w", "stop", "divergent",
        "alpha_sum", "n_alpha",
    )


class _NUTSSampler(_Sampler):
    """Doubling binary-tree sampler with multinomial leaf selection.

    The tree stops growing at the reversal criterion
    (z+ - z-) . M^{-1} p- < 0  or  (z+ - z-) . M^{-1} p+ < 0,
    checked at every subtree merge, at a divergent leaf, or at the depth cap.
    """

    def _uturn(self, z_plus, z_minus, p_minus, p_plus):
        dz = z_plus - z_minus
        return (
            np.dot(dz, self.inv_mass * p_minus) < 0.0
            or np.dot(dz, self.inv_mass * p_plus) < 0.0
        )

    def _leaf(self, z, p, grad, direction, h0):
        z1, p1, val1, grad1 = _leapfrog_steps(
            self.target, z.copy(), p.copy(), grad, direction * self.eps, self.inv_mass, 1
        )
        leaf = _TreeState()
        leaf.z_minus = leaf.z_plus = z1
        leaf.p_minus = leaf.p_plus = p1
        leaf.grad_minus = leaf.grad_plus = grad1
        leaf.z_prop, leaf.val_prop, leaf.grad_prop = z1, val1, grad1
        if np.isfinite(val1):
            dh = (val1 + _kinetic(p1, self.inv_mass)) - h0
        else:
            dh = np.inf
        leaf.divergent = not np.isfinite(dh) or abs(dh) > DIVERGENCE_ENERGY
        leaf.stop = leaf.divergent
        leaf.log_w = -np.inf if leaf.divergent else -dh
        leaf.alpha_sum = 0.0 if leaf.divergent else float(np.exp(min(0.0, -dh)))
        leaf.n_alpha = 1
        return leaf

    def _build(self, depth, z, p, grad, direction, h0):
        if depth == 0:
            return self._leaf(z, p, grad, direction, h0)
        first = self._build(depth - 1, z, p, grad, direction, h0)
        if first.stop:
            return first
        if direction == -1:
            second = self._build(depth - 1, first.z_minus, first.p_minus, first.grad_minus, direction, h0)
            first.z_minus, first.p_minus, first.grad_minus = (
                second.z_minus, second.p_minus, second.grad_minus,
            )
        else:
            second = self._build(depth - 1, first.z_plus, first.p_plus, first.grad_plus, direction, h0)
            first.z_plus, first.p_plus, first.grad_plus = (
                second.z_plus, second.p_plus, second.grad_plus,
            )
        total = np.logaddexp(first.log_w, second.log_w)
        if np.isfinite(second.log_w) and np.log(self.rng.random()) < second.log_w - total:
            first.z_prop, first.val_prop, first.grad_prop = (
                second.z_prop, second.val_prop, second.grad_prop,
            )
        first.log_w = total
        first.alpha_sum += second.alpha_sum
        first.n_alpha += second.n_alpha
        first.divergent |= second.divergent
        first.stop = second.stop or self._uturn(
            first.z_plus, first.z_minus, first.p_minus, first.p_plus
        )
        return first

    def transition(self):
        z, val, grad = self.state
        p0 = self._draw_momentum()
        h0 = val + _kinetic(p0, self.inv_mass)

        tree = _TreeState()
        tree.z_minus = tree.z_plus = z
        tree.p_minus = tree.p_plus = p0
        tree.grad_minus = tree.grad_plus = grad
        tree.z_prop, tree.val_prop, tree.grad_prop = z, val, grad
        tree.log_w = 0.0
        tree.stop = False
        tree.divergent = False
        tree.alpha_sum = 0.0
        tree.n_alpha = 0

        depth = 0
        while depth < self.cfg.max_tree_depth and not tree.stop:
            direction = 1 if self.rng.random() < 0.5 else -1
            if direction == -1:
                sub = self._build(depth, tree.z_minus, tree.p_minus, tree.grad_minus, -1, h0)
            else:
                sub = self._build(depth, tree.z_plus, tree.p_plus, tree.grad_plus, 1, h0)
            tree.alpha_sum += sub.alpha_sum
            tree.n_alpha += sub.n_alpha
            tree.divergent |= sub.divergent
            if sub.stop:
                tree.stop = True
                break
            # biased progressive sampling: favor the fresh subtree
            if np.log(self.rng.random()) < sub.log_w - tree.log_w:
                tree.z_prop, tree.val_prop, tree.grad_prop = (
                    sub.z_prop, sub.val_prop, sub.grad_prop,
                )
            tree.log_w = np.logaddexp(tree.log_w, sub.log_w)
            if direction == -1:
                tree.z_minus, tree.p_minus, tree.grad_minus = sub.z_minus, sub.p_minus, sub.grad_minus
            else:
                tree.z_plus, tree.p_plus, tree.grad_plus = sub.z_plus, sub.p_plus, sub.grad_plus
            tree.stop = self._uturn(tree.z_plus, tree.z_minus, tree.p_minus, tree.p_plus)
            depth += 1

        saturated = depth == self.cfg.max_tree_depth
        self.state = (tree.z_prop, tree.val_prop, tree.grad_prop)
        alpha = tree.alpha_sum / max(tree.n_alpha, 1)
        return alpha, tree.divergent, saturated, depth


def hmc_sample(spec, cfg, init, chain_index=0):
    """Hamiltonian Monte Carlo chain with warm-up adaptation."""
    return _HMCSampler(spec, cfg, init, chain_index).run()


def nuts_sample(spec, cfg, init, chain_index=0):
    """No-U-turn chain with warm-up adaptation and multinomial selection."""
    return _NUTSSampler(spec, cfg, init, chain_index).run()


def joint_noise_sample(spec, cfg, init, method="nuts", chain_index=0, zeta2_init=1.0):
    """Sample (z, zeta^2) jointly; the chain reports zeta^2 in natural units."""
    target = spec.joint_target()
    init = np.asarray(init, dtype=float).reshape(spec.dim)
    state0 = np.concatenate([init, [target.u_of(zeta2_init)]])
    sampler = {"nuts": _NUTSSampler, "hmc": _HMCSampler}[method](target, cfg, state0, chain_index)
    chain = sampler.run()
    chain.samples[:, -1] = target.zeta2_of(chain.samples[:, -1])
    chain.latent_dim = spec.dim
    chain.has_zeta2 = True
    return chain


def sample_chains(spec, cfg, method="nuts", init=None, n_chains=1, threads=1):
    """Run several independent chains; results are ordered by chain index.

    init may be one state vector (shared) or one per chain.  Chains draw from
    private counter-based streams keyed by (cfg.seed, chain index), so the
    result is independent of the worker count.
    """
    target_dim = spec.dim if isinstance(spec, PosteriorSpec) and spec.inferred else None
    kernels = {"hmc": hmc_sample, "nuts": nuts_sample}
    if method not in kernels and method != "joint":
        raise ValueError("method must be 'hmc', 'nuts' or 'joint'")

    inits = np.asarray(init, dtype=float)
    if inits.ndim == 1:
        inits = np.tile(inits, (n_chains, 1))
    if inits.shape[0] != n_chains:
        raise ValueError("need one init per chain")

    def _one(i):
        if method == "joint":
            return joint_noise_sample(spec, cfg, inits[i], chain_index=i)
        return kernels[method](spec, cfg, inits[i], chain_index=i)

    if threads <= 1 or n_chains == 1:
        return [_one(i) for i in range(n_chains)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_one, range(n_chains)))
    _ = target_dim


def save_chain(path, chain):
    """Chain CSV: one retained sample per row, z_0..z_{d-1}[,zeta2]."""
    cols = [f"z_{i}" for i in range(chain.latent_dim)]
    if chain.has_zeta2:
        cols.append("zeta2")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in chain.samples:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_chain(path):
    """Read a chain CSV back into (samples, has_zeta2)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        has_zeta2 = header[-1] == "zeta2"
        rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
    return np.array(rows, dtype=float), has_zeta2
