"""Calibration and chain-quality metrics.

Achieved coverage asks, per evaluation node, whether the true SDF value
falls inside the central q-quantile interval of the sampled SDF values; the
expected calibration error averages |coverage - q| over a grid of levels.
Effective sample size uses the initial-positive-sequence autocorrelation
estimator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NodeDistribution",
    "CalibrationReport",
    "empirical_quantile",
    "achieved_coverage",
    "ece",
    "ess",
    "chain_ess",
    "node_stats",
    "default_levels",
    "save_calibration",
    "save_node_stats",
]


@dataclass
class NodeDistribution:
    """Sampled SDF values at one node plus the ground-truth value there."""

    x: np.ndarray
    values: np.ndarray
    f_star: float

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(3)
        self.values = np.asarray(self.values, dtype=float).ravel()
        self.f_star = float(self.f_star)
        if self.values.size < 2:
            raise ValueError("a node needs at least two sampled values")
        if not (np.all(np.isfinite(self.values)) and np.isfinite(self.f_star)):
            raise ValueError("non-finite node values")


@dataclass
class CalibrationReport:
    """Per-level achieved coverage and the scalar calibration error."""

    quantile_levels: np.ndarray
    achieved_coverage: np.ndarray
    ece: float
    node_count: int

    def __post_init__(self):
        self.quantile_levels = np.asarray(self.quantile_levels, dtype=float)
        self.achieved_coverage = np.asarray(self.achieved_coverage, dtype=float)
        q = self.quantile_levels
        if np.any(q <= 0) or np.any(q > 1) or np.any(np.diff(q) <= 0):
            raise ValueError("levels must be strictly increasing in (0, 1]")
        if np.any(self.achieved_coverage < 0) or np.any(self.achieved_coverage > 1):
            raise ValueError("coverage entries must lie in [0, 1]")


def default_levels(m=20):
    """Evenly spaced quantile levels k/m for k = 1..m."""
    return np.arange(1, m + 1) / m


def empirical_quantile(values, t):
    """Linear-interpolation quantile with plotting positions (i-1)/(N-1).

    t = 0 gives the minimum and t = 1 the maximum.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("values must be nonempty")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError("quantile level must lie in [0, 1]")
    return float(np.quantile(values, t, method="linear"))


def _node_matrix(nodes):
    vals = np.array([n.values for n in nodes])
    fstar = np.array([n.f_star for n in nodes])
    return vals, fstar


def achieved_coverage(nodes, q):
    """Fraction of nodes whose f* lies in the closed central q-interval."""
    if not nodes:
        raise ValueError("node list must be nonempty")
    q = float(q)
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    vals, fstar = _node_matrix(nodes)
    lo = np.quantile(vals, 0.5 - q / 2.0, axis=1, method="linear")
    hi = np.quantile(vals, 0.5 + q / 2.0, axis=1, method="linear")
    return float(np.mean((lo <= fstar) & (fstar <= hi)))


def ece(nodes, levels=None):
    """Expected calibration error over a grid of quantile levels."""
    if levels is None:
        levels = default_levels()
    levels = np.asarray(levels, dtype=float)
    ac = np.array([achieved_coverage(nodes, q) for q in levels])
    return CalibrationReport(
        quantile_levels=levels,
        achieved_coverage=ac,
        ece=float(np.mean(np.abs(ac - levels))),
        node_count=len(nodes),
    )


def ess(values):
    """Effective sample size via the initial positive sequence estimator.

    ESS = N / (1 + 2 sum_{t=1}^{T} rho_t) with biased sample autocorrelations
    rho_t, truncated at the last lag T for which every pair sum
    rho_{2k} + rho_{2k+1} up to T stays positive.  A zero-variance chain is
    degenerate by convention: returns N with a warning.
    """
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError("need at least 4 values for an ESS estimate")
    if np.all(x == x[0]):
        warnings.warn("zero-variance chain; ESS defined as N", RuntimeWarning, stacklevel=2)
        return float(n)
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    rho = acov / acov[0]

    tail = 0.0
    t_max = -1
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        t_max = 2 * k + 1
        k += 1
    if t_max >= 1:
        tail = float(np.sum(rho[1 : t_max + 1]))
    # anti-correlation can push the raw estimate past N; cap at the
    # truncation slack N(N+1)/(N-1)
    return float(min(n / (1.0 + 2.0 * tail), n * (n + 1) / (n - 1)))


def chain_ess(samples):
    """Chain-level scalar ESS: the mean of per-coordinate estimates."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    return float(np.mean([ess(samples[:, k]) for k in range(samples.shape[1])]))


def node_stats(nodes):
    """Per-node summary rows: (x, y, z, mean, std, |f*|); std uses N-1."""
    if not nodes:
        raise ValueError("node list must be nonempty")
    vals, fstar = _node_matrix(nodes)
    xs = np.array([n.x for n in nodes])
    return {
        "x": xs[:, 0],
        "y": xs[:, 1],
        "z": xs[:, 2],
        "mean": vals.mean(axis=1),
        "std": vals.std(axis=1, ddof=1),
        "abs_dist": np.abs(fstar),
    }


def save_calibration(csv_path, report, json_path=None, extra=None):
    """Write the q,ac table and, optionally, the summary JSON."""
    with open(csv_path, "w") as fh:
        fh.write("q,ac\n")
        for q, ac in zip(report.quantile_levels, report.achieved_coverage):
            fh.write(f"{q:.17g},{ac:.17g}\n")
    if json_path is not None:
        import json as _json

        doc = {"ece": report.ece, "node_count": report.node_count}
        if extra:
            doc.update(extra)
        with open(json_path, "w") as fh:
            _json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def save_node_stats(path, stats):
    """Write the node-stats table as x,y,z,mean,std,abs_dist CSV."""
    cols = ["x", "y", "z", "mean", "std", "abs_dist"]
    n = len(stats["x"])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(n):
            fh.write(",".join(f"{stats[c][i]:.17g}" for c in cols) + "\n")
