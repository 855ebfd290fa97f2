"""Analytic four-shell ellipsoid family with exact signed distance oracles.

Shapes are nested ellipsoid shells inside [-0.9, 0.9]^3.  Distances are true
Euclidean point-to-ellipsoid distances computed by safeguarded Newton root
finding on the projection equation (the algebraic level-set value is not a
distance and is deliberately avoided).  The family doubles as the training
and evaluation ground truth for the atlas at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .atlas import TrainingShape
from .network import NumericalError

__all__ = [
    "EllipsoidShape",
    "EllipsoidFamilyParams",
    "default_family_params",
    "generate_family",
    "analytic_sdf",
    "analytic_sdf_batch",
    "save_family",
    "load_family",
]

NEST_MARGIN = 0.05
BOX_LIMIT = 0.9
_ZERO_SNAP = 1e-13


@dataclass
class EllipsoidShape:
    """Analytic handle: per-surface centers (L, 3) and semi-axes (L, 3)."""

    centers: np.ndarray
    axes: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.axes = np.atleast_2d(np.asarray(self.axes, dtype=float))
        if self.centers.shape != self.axes.shape or self.centers.shape[1] != 3:
            raise ValueError("centers and axes must both be (L, 3)")
        if np.any(self.axes <= 0):
            raise ValueError("semi-axes must be positive")

    @property
    def surface_count(self):
        return self.centers.shape[0]


@dataclass
class EllipsoidFamilyParams:
    """Per-surface uniform ranges for centers and semi-axes, plus the seed."""

    center_lo: np.ndarray
    center_hi: np.ndarray
    axes_lo: np.ndarray
    axes_hi: np.ndarray
    seed: int = 0

    def __post_init__(self):
        for name in ("center_lo", "center_hi", "axes_lo", "axes_hi"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        shape = self.center_lo.shape
        if shape[1] != 3 or any(
            getattr(self, n).shape != shape for n in ("center_hi", "axes_lo", "axes_hi")
        ):
            raise ValueError("all range arrays must share one (L, 3) shape")
        if np.any(self.center_hi < self.center_lo) or np.any(self.axes_hi < self.axes_lo):
            raise ValueError("range upper bounds must not be below lower bounds")
        if np.any(self.axes_lo <= 0):
            raise ValueError("semi-axis ranges must be positive")
        self._validate_nesting()

    @property
    def surface_count(self):
        return self.center_lo.shape[0]

    def _validate_nesting(self):
        """Worst-case check: shells stay nested with margin and inside the box."""
        L = self.surface_count
        for inner in range(L - 1):
            outer = inner + 1
            sep = np.maximum(
                np.abs(self.center_hi[outer] - self.center_lo[inner]),
                np.abs(self.center_hi[inner] - self.center_lo[outer]),
            )
            gap = self.axes_lo[outer] - (self.axes_hi[inner] + sep)
            if np.any(gap < NEST_MARGIN):
                raise ValueError(
                    f"shells {inner + 1} and {outer + 1} cannot guarantee the "
                    f"{NEST_MARGIN} nesting margin over the given ranges"
                )
        extent = np.maximum(np.abs(self.center_lo), np.abs(self.center_hi)) + self.axes_hi
        if np.any(extent > BOX_LIMIT):
            raise ValueError(f"shells must fit inside [-{BOX_LIMIT}, {BOX_LIMIT}]^3")


def default_family_params(seed=0):
    """Four nested shells; only the semi-axes vary so the family stays compact."""
    axes_lo = np.array(
        [
            [0.18, 0.18, 0.18],
            [0.35, 0.35, 0.35],
            [0.52, 0.52, 0.52],
            [0.69, 0.69, 0.69],
        ]
    )
    axes_hi = axes_lo + 0.05
    centers = np.zeros((4, 3))
    return EllipsoidFamilyParams(
        center_lo=centers, center_hi=centers, axes_lo=axes_lo, axes_hi=axes_hi, seed=seed
    )


def _min_axis_distance(axes2, u, nz):
    """Distance candidates with some coordinates of u exactly zero.

    For each distinct squared semi-axis among the zero coordinates, the
    projection multiplier may sit exactly at -a_j^2 with the slack absorbed
    by the zero coordinate; returns the best such candidate distance (inf if
    none is feasible).
    """
    best = np.inf
    zero_axes2 = np.unique(axes2[~nz])
    for aj2 in zero_axes2:
        denom = axes2[nz] - aj2
        if np.any(denom == 0.0):
            continue
        y = axes2[nz] * u[nz] / denom
        r2 = 1.0 - np.sum(y**2 / axes2[nz])
        if r2 < 0.0:
            continue
        d2 = np.sum((aj2 * u[nz] / denom) ** 2) + aj2 * r2
        best = min(best, float(np.sqrt(d2)))
    return best


def _projection_roots(axes2, u, nz_mask, max_iter=100):
    """Vectorized safeguarded Newton for the ellipsoid projection multiplier.

    Solves sum_i a_i^2 u_i^2 / (a_i^2 + t)^2 = 1 over the nonzero coordinates
    of each row of u, bracketed by analytic lower/upper bounds.  Returns the
    per-row distance of the projection candidate.
    """
    n = u.shape[0]
    v = axes2[None, :] * u**2
    v = np.where(nz_mask, v, 0.0)
    active_axes2 = np.where(nz_mask, axes2[None, :], np.inf)
    mlb = active_axes2.min(axis=1)
    k = np.argmin(active_axes2, axis=1)
    ak = np.sqrt(axes2[k])
    uk = np.abs(u[np.arange(n), k])

    lo = -mlb + ak * uk
    hi = -mlb + np.sqrt(v.sum(axis=1))
    hi = np.maximum(hi, lo)
    t = 0.5 * (lo + hi)

    def f_and_fp(tv):
        denom = axes2[None, :] + tv[:, None]
        denom = np.where(nz_mask, denom, 1.0)
        fr = np.where(nz_mask, v / denom**2, 0.0)
        fpr = np.where(nz_mask, v / denom**3, 0.0)
        return fr.sum(axis=1) - 1.0, -2.0 * fpr.sum(axis=1)

    done = hi - lo <= 0.0
    for _ in range(max_iter):
        fval, fprime = f_and_fp(t)
        lo = np.where(fval > 0, np.maximum(lo, t), lo)
        hi = np.where(fval <= 0, np.minimum(hi, t), hi)
        converged = (np.abs(fval) < 1e-13) | (hi - lo < 1e-15 * np.maximum(1.0, np.abs(t)))
        done |= converged
        if np.all(done):
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            t_newton = t - fval / fprime
        inside = (t_newton > lo) & (t_newton < hi) & np.isfinite(t_newton)
        t_next = np.where(inside, t_newton, 0.5 * (lo + hi))
        t = np.where(done, t, t_next)
    else:
        fval, _ = f_and_fp(t)
        if np.any(~done & (np.abs(fval) > 1e-10)):
            raise NumericalError("ellipsoid projection did not converge in 100 iterations")

    denom = axes2[None, :] + t[:, None]
    denom = np.where(nz_mask, denom, 1.0)
    diff = np.where(nz_mask, t[:, None] * u / denom, 0.0)
    return np.sqrt(np.sum(diff**2, axis=1))


def analytic_sdf_batch(shape, points, surface):
    """Exact signed distances from many points to one surface of the shape.

    surface is 1-based.  Negative inside the shell.
    """
    if not 1 <= surface <= shape.surface_count:
        raise ValueError(f"surface index must be in 1..{shape.surface_count}")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    axes = shape.axes[surface - 1]
    u = points - shape.centers[surface - 1]
    axes2 = axes**2

    nz_mask = np.abs(u) > _ZERO_SNAP
    dist = np.full(u.shape[0], np.inf)

    has_nz = nz_mask.any(axis=1)
    if np.any(has_nz):
        dist[has_nz] = _projection_roots(axes2, u[has_nz], nz_mask[has_nz])

    # Candidates that park the multiplier at -a_j^2 for a zero coordinate.
    rows_with_zero = np.flatnonzero(~nz_mask.all(axis=1))
    for i in rows_with_zero:
        dist[i] = min(dist[i], _min_axis_distance(axes2, u[i], nz_mask[i]))

    inside = np.sum(u**2 / axes2, axis=1) < 1.0
    return np.where(inside, -dist, dist)


def analytic_sdf(shape, x, surface):
    """Exact signed distance from a single point to one surface of the shape."""
    return float(analytic_sdf_batch(shape, np.asarray(x, dtype=float)[None, :], surface)[0])


def _surface_points(rng, center, axes, n):
    """Points on the ellipsoid via normalized directions (not area-uniform)."""
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return center + axes * dirs


def generate_family(params, n_shapes, points_per_shape=1000, surface_noise=(0.025, 0.0025)):
    """Draw a family of shapes and their training samples.

    Per shape: 70% of samples are surface points (spread across surfaces)
    perturbed by isotropic Gaussian offsets with the two given sigmas split
    evenly, 30% are uniform in the domain box; every sample carries the exact
    signed distance to all surfaces.  Returns [(EllipsoidShape, TrainingShape)].
    """
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(params.seed), 0xE111]))
    L = params.surface_count
    out = []
    for idx in range(n_shapes):
        centers = rng.uniform(params.center_lo, params.center_hi)
        axes = rng.uniform(params.axes_lo, params.axes_hi)
        shape = EllipsoidShape(centers=centers, axes=axes)

        n_surface = int(round(0.7 * points_per_shape))
        n_uniform = points_per_shape - n_surface
        per_surface = np.full(L, n_surface // L)
        per_surface[: n_surface % L] += 1
        pts = []
        for ell in range(L):
            base = _surface_points(rng, centers[ell], axes[ell], per_surface[ell])
            half = per_surface[ell] // 2
            noise = np.empty(per_surface[ell])
            noise[:half] = surface_noise[0]
            noise[half:] = surface_noise[1]
            pts.append(base + noise[:, None] * rng.standard_normal(base.shape))
        pts.append(rng.uniform(-1.0, 1.0, size=(n_uniform, 3)))
        points = np.vstack(pts)

        sdf = np.column_stack(
            [analytic_sdf_batch(shape, points, ell + 1) for ell in range(L)]
        )
        out.append((shape, TrainingShape(id=idx, points=points, sdf=sdf)))
    return out


def surface_normal(shape, points, surface):
    """Unit outward normals of one shell at (near-)surface points."""
    c = shape.centers[surface - 1]
    a2 = shape.axes[surface - 1] ** 2
    n = (np.atleast_2d(points) - c) / a2
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def surface_cloud(shape, surface, k, zeta, seed):
    """Observation cloud from one shell: surface points displaced along normals.

    Points are drawn from the surface parametrization, displaced by
    N(0, zeta^2) along the outward normal, and emitted with s = 0 (the noise
    is left to the likelihood).  Returns a list of PointObservation.
    """
    from .geometry import PointObservation

    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    pts = _surface_points(rng, shape.centers[surface - 1], shape.axes[surface - 1], k)
    normals = surface_normal(shape, pts, surface)
    tau = zeta * rng.standard_normal(k) if zeta > 0 else np.zeros(k)
    moved = pts + tau[:, None] * normals
    return [PointObservation(x=p, s=0.0, j=surface) for p in moved]


def save_family(path, shapes, params=None):
    """Persist shape parameters (and optionally the generating ranges) as JSON."""
    doc = {
        "shapes": [
            {"id": i, "centers": s.centers.tolist(), "axes": s.axes.tolist()}
            for i, s in enumerate(shapes)
        ]
    }
    if params is not None:
        doc["ranges"] = {
            "center_lo": params.center_lo.tolist(),
            "center_hi": params.center_hi.tolist(),
            "axes_lo": params.axes_lo.tolist(),
            "axes_hi": params.axes_hi.tolist(),
            "seed": params.seed,
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_family(path):
    """Read back shapes saved by save_family, ordered by id."""
    with open(path) as fh:
        doc = json.load(fh)
    shapes = [None] * len(doc["shapes"])
    for entry in doc["shapes"]:
        shapes[entry["id"]] = EllipsoidShape(
            centers=np.array(entry["centers"]), axes=np.array(entry["axes"])
        )
    return shapes
