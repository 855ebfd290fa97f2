"""Mesh and voxel geometry: distances, sampling, isosurfacing, certainty maps.

Triangle meshes are plain vertex/face arrays.  Point-to-mesh distances are
exact point-triangle distances with a KD-tree candidate prefilter whose
search radius is provably conservative; inside/outside is decided by the
generalized winding number.  Isosurfaces come from the classic 256-case
marching cubes with linear edge interpolation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import EDGE_TABLE, TRI_TABLE
from . import network as nets

__all__ = [
    "TriMesh",
    "PointObservation",
    "VoxelGrid",
    "mesh_sdf",
    "mesh_sdf_batch",
    "point_mesh_distance",
    "sample_surface_points",
    "perturb_along_normals",
    "marching_cubes",
    "extract_zero_level",
    "chamfer",
    "hausdorff",
    "certainty_map",
    "icosphere",
    "save_obj",
    "load_obj",
    "save_voxel_grid",
    "load_voxel_grid",
    "save_point_cloud",
    "load_point_cloud",
    "observations_to_arrays",
]

# Cube corners and edges of one marching-cubes cell (x right, y in, z up).
_CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    dtype=np.int64,
)
_EDGE_VERTS = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]


@dataclass
class TriMesh:
    """Triangle mesh; zero-area faces are dropped at construction."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex coordinates")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")
        if self.faces.size:
            v = self.vertices
            n = np.cross(
                v[self.faces[:, 1]] - v[self.faces[:, 0]],
                v[self.faces[:, 2]] - v[self.faces[:, 0]],
            )
            keep = np.linalg.norm(n, axis=1) > 0.0
            self.faces = self.faces[keep]
        self._closed = None

    @property
    def is_empty(self):
        return self.faces.shape[0] == 0

    def face_corners(self):
        v = self.vertices
        return v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]

    def face_normals(self, normalized=True):
        a, b, c = self.face_corners()
        n = np.cross(b - a, c - a)
        if normalized:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def face_areas(self):
        a, b, c = self.face_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def is_closed(self):
        """True when every edge is shared by exactly two faces."""
        if self._closed is None:
            if self.is_empty:
                self._closed = False
            else:
                e = np.vstack(
                    [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
                )
                e = np.sort(e, axis=1)
                _, counts = np.unique(e, axis=0, return_counts=True)
                self._closed = bool(np.all(counts == 2))
        return self._closed


@dataclass
class PointObservation:
    """One inference datum: position, claimed signed distance, surface index."""

    x: np.ndarray
    s: float
    j: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(3)
        self.s = float(self.s)
        self.j = int(self.j)
        if self.j < 1:
            raise ValueError("surface index is 1-based")
        if not (np.all(np.isfinite(self.x)) and np.isfinite(self.s)):
            raise ValueError("non-finite observation")


def observations_to_arrays(observations):
    """Stack observations into (points (K,3), s (K,), j (K,))."""
    obs = list(observations)
    if not obs:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
    x = np.array([o.x for o in obs])
    s = np.array([o.s for o in obs])
    j = np.array([o.j for o in obs], dtype=int)
    return x, s, j


@dataclass
class VoxelGrid:
    """Regular grid of values over an axis-aligned box (nodes at the corners)."""

    resolution: tuple
    bounds: tuple
    values: np.ndarray

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        lo = np.asarray(self.bounds[0], dtype=float).reshape(3)
        hi = np.asarray(self.bounds[1], dtype=float).reshape(3)
        self.bounds = (lo, hi)
        if min(self.resolution) < 2:
            raise ValueError("resolution must be at least 2 per axis")
        if np.any(hi <= lo):
            raise ValueError("degenerate bounds")
        self.values = np.asarray(self.values).reshape(self.resolution)

    def axis_coords(self):
        lo, hi = self.bounds
        return [np.linspace(lo[a], hi[a], self.resolution[a]) for a in range(3)]

    def cell_size(self):
        lo, hi = self.bounds
        return (hi - lo) / (np.array(self.resolution) - 1)


def grid_points(resolution, bounds):
    """All grid node coordinates, x-fastest in memory layout terms: (n, 3)."""
    res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    axes = [np.linspace(lo[a], hi[a], res[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]), res


# ---------------------------------------------------------------------------
# point-triangle distances and the signed mesh distance


def _point_triangle_dist2(p, v0, e0, e1):
    """Squared distances for paired points/triangles (Eberly's region split).

    p, v0, e0, e1 all (n, 3) where the triangle is v0 + s*e0 + t*e1.
    """
    d = v0 - p
    a = np.einsum("ij,ij->i", e0, e0)
    b = np.einsum("ij,ij->i", e0, e1)
    c = np.einsum("ij,ij->i", e1, e1)
    dd = np.einsum("ij,ij->i", e0, d)
    e = np.einsum("ij,ij->i", e1, d)
    det = np.maximum(a * c - b * b, 1e-300)
    s = b * e - c * dd
    t = b * dd - a * e

    s_out = np.empty_like(s)
    t_out = np.empty_like(t)

    inside = (s + t <= det) & (s >= 0) & (t >= 0)
    s_in = np.where(inside, s / det, 0.0)
    t_in = np.where(inside, t / det, 0.0)

    # edge/vertex regions: clamp each candidate parameterization
    def _clamp01(x):
        return np.clip(x, 0.0, 1.0)

    # region via nearest point on each of the three edges, take the best
    # edge v0->v0+e0 : t=0
    s0 = _clamp01(-dd / np.maximum(a, 1e-300))
    d0 = a * s0 * s0 + 2 * dd * s0
    # edge v0->v0+e1 : s=0
    t1 = _clamp01(-e / np.maximum(c, 1e-300))
    d1 = c * t1 * t1 + 2 * e * t1
    # edge v0+e0 -> v0+e1 : s+t=1, minimize Q(s, 1-s) over s
    sq = _clamp01((c + e - b - dd) / np.maximum(a - 2 * b + c, 1e-300))
    tq = 1.0 - sq
    d2 = a * sq * sq + 2 * b * sq * tq + c * tq * tq + 2 * dd * sq + 2 * e * tq

    best = np.argmin(np.stack([d0, d1, d2]), axis=0)
    s_edge = np.choose(best, [s0, np.zeros_like(s0), sq])
    t_edge = np.choose(best, [np.zeros_like(t1), t1, tq])

    s_out = np.where(inside, s_in, s_edge)
    t_out = np.where(inside, t_in, t_edge)

    diff = d + s_out[:, None] * e0 + t_out[:, None] * e1
    return np.einsum("ij,ij->i", diff, diff)


def point_mesh_distance(points, mesh, chunk_pairs=4_000_000):
    """Exact unsigned distance from each point to the mesh surface.

    A KD-tree over triangle centroids prunes candidates with the
    conservative radius d_centroid + 2 * max triangle radius, then exact
    point-triangle distances decide.
    """
    if mesh.is_empty:
        raise ValueError("mesh has no faces")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    a, b, c = mesh.face_corners()
    centroids = (a + b + c) / 3.0
    r_tri = np.sqrt(
        np.maximum.reduce(
            [
                np.sum((a - centroids) ** 2, axis=1),
                np.sum((b - centroids) ** 2, axis=1),
                np.sum((c - centroids) ** 2, axis=1),
            ]
        )
    )
    r_max = float(r_tri.max())
    tree = cKDTree(centroids)
    d0, _ = tree.query(points, k=1)
    radii = d0 + 2.0 * r_max + 1e-12
    candidates = tree.query_ball_point(points, radii)

    e0 = b - a
    e1 = c - a
    out = np.empty(points.shape[0])
    pair_p, pair_t, owners = [], [], []
    start = 0

    def _flush():
        nonlocal pair_p, pair_t, owners
        if not owners:
            return
        pi = np.concatenate(pair_p)
        ti = np.concatenate(pair_t)
        own = np.concatenate(owners)
        d2 = _point_triangle_dist2(points[pi], a[ti], e0[ti], e1[ti])
        np.minimum.at(out, own, np.sqrt(d2))
        pair_p, pair_t, owners = [], [], []

    out.fill(np.inf)
    n_pending = 0
    for i, cand in enumerate(candidates):
        cand = np.asarray(cand, dtype=np.int64)
        pair_p.append(np.full(cand.size, i, dtype=np.int64))
        pair_t.append(cand)
        owners.append(np.full(cand.size, i, dtype=np.int64))
        n_pending += cand.size
        if n_pending >= chunk_pairs:
            _flush()
            n_pending = 0
    _flush()
    return out


def winding_number(points, mesh, chunk_pairs=4_000_000):
    """Generalized winding number of each point (~1 inside a closed mesh)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fa, fb, fc = mesh.face_corners()
    m = fa.shape[0]
    out = np.zeros(points.shape[0])
    step = max(1, chunk_pairs // max(m, 1))
    for lo in range(0, points.shape[0], step):
        p = points[lo : lo + step]
        av = fa[None, :, :] - p[:, None, :]
        bv = fb[None, :, :] - p[:, None, :]
        cv = fc[None, :, :] - p[:, None, :]
        an = np.linalg.norm(av, axis=2)
        bn = np.linalg.norm(bv, axis=2)
        cn = np.linalg.norm(cv, axis=2)
        num = np.einsum("pmi,pmi->pm", av, np.cross(bv, cv))
        den = (
            an * bn * cn
            + np.einsum("pmi,pmi->pm", av, bv) * cn
            + np.einsum("pmi,pmi->pm", bv, cv) * an
            + np.einsum("pmi,pmi->pm", cv, av) * bn
        )
        out[lo : lo + step] = np.sum(2.0 * np.arctan2(num, den), axis=1)
    return out / (4.0 * np.pi)


def mesh_sdf_batch(points, mesh):
    """Signed distances to the mesh: negative where the winding number > 1/2."""
    if mesh.is_empty:
        raise ValueError("mesh has no faces")
    if not mesh.is_closed:
        warnings.warn(
            "mesh is not closed; the sign of mesh_sdf is unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
    dist = point_mesh_distance(points, mesh)
    inside = winding_number(points, mesh) > 0.5
    return np.where(inside, -dist, dist)


def mesh_sdf(mesh, x):
    """Signed distance from one point to the mesh."""
    return float(mesh_sdf_batch(np.asarray(x, dtype=float)[None, :], mesh))


# ---------------------------------------------------------------------------
# surface sampling and the observation noise model


def sample_surface_points(mesh, k, seed):
    """Area-weighted uniform surface samples; returns (points, face normals)."""
    if mesh.is_empty:
        raise ValueError("mesh has no faces")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    fi = rng.choice(len(probs), size=k, p=probs)
    a, b, c = mesh.face_corners()
    r1 = np.sqrt(rng.random(k))
    r2 = rng.random(k)
    pts = (
        (1 - r1)[:, None] * a[fi]
        + (r1 * (1 - r2))[:, None] * b[fi]
        + (r1 * r2)[:, None] * c[fi]
    )
    normals = mesh.face_normals()[fi]
    return pts, normals


def perturb_along_normals(points, normals, zeta, seed, surface=1):
    """Displace surface points along their unit normals by N(0, zeta^2).

    The emitted observations claim s = 0; the displacement is to be absorbed
    by the observation-noise term of the likelihood.
    """
    if zeta < 0:
        raise ValueError("zeta must be >= 0")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    rng = np.random.default_rng(seed)
    tau = zeta * rng.standard_normal(points.shape[0]) if zeta > 0 else np.zeros(points.shape[0])
    moved = points + tau[:, None] * normals
    return [PointObservation(x=p, s=0.0, j=surface) for p in moved]


# ---------------------------------------------------------------------------
# marching cubes


def marching_cubes(values, bounds, iso=0.0):
    """Extract the iso-surface of a sampled scalar field as a TriMesh.

    values: (nx, ny, nz) field samples on the node lattice of `bounds`.
    Triangles are oriented so their normals point toward increasing field
    values (outward for a signed distance field).  Fields with no sign
    change produce an empty mesh.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError("values must be a 3-d array")
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    res = values.shape
    axes = [np.linspace(lo[a], hi[a], res[a]) for a in range(3)]

    inside = values < iso
    idx = np.zeros(tuple(r - 1 for r in res), dtype=np.int32)
    for bit, (cx, cy, cz) in enumerate(_CORNERS):
        idx |= (
            inside[cx : res[0] - 1 + cx, cy : res[1] - 1 + cy, cz : res[2] - 1 + cz]
            << bit
        ).astype(np.int32)
    active = np.argwhere(EDGE_TABLE[idx] != 0)
    if active.size == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    verts = []
    vert_ids = {}
    faces = []

    def edge_vertex(ci, cj, ck, edge):
        va, vb = _EDGE_VERTS[edge]
        na = (_CORNERS[va][0] + ci, _CORNERS[va][1] + cj, _CORNERS[va][2] + ck)
        nb = (_CORNERS[vb][0] + ci, _CORNERS[vb][1] + cj, _CORNERS[vb][2] + ck)
        key = (na, nb) if na < nb else (nb, na)
        vid = vert_ids.get(key)
        if vid is None:
            f1 = values[na]
            f2 = values[nb]
            t = 0.5 if f2 == f1 else (iso - f1) / (f2 - f1)
            t = min(max(t, 0.0), 1.0)
            pa = np.array([axes[0][na[0]], axes[1][na[1]], axes[2][na[2]]])
            pb = np.array([axes[0][nb[0]], axes[1][nb[1]], axes[2][nb[2]]])
            vid = len(verts)
            verts.append(pa + t * (pb - pa))
            vert_ids[key] = vid
        return vid

    for ci, cj, ck in active:
        tri_edges = TRI_TABLE[idx[ci, cj, ck]]
        for k in range(0, 16, 3):
            if tri_edges[k] < 0:
                break
            v1 = edge_vertex(ci, cj, ck, tri_edges[k])
            v2 = edge_vertex(ci, cj, ck, tri_edges[k + 1])
            v3 = edge_vertex(ci, cj, ck, tri_edges[k + 2])
            # table order gives descent-facing normals; flip for gradient ascent
            faces.append((v1, v3, v2))

    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))


def _eval_field(net, z, surface, points, chunk=65536):
    """Evaluate one surface's SDF channel of a network (or a stub callable)."""
    out = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], chunk):
        block = points[lo : lo + chunk]
        if isinstance(net, nets.ShapeNetwork):
            vals = nets.forward_batch(net, block, z)
        else:
            vals = np.asarray(net(block, z))
        out[lo : lo + chunk] = vals[:, surface - 1] if vals.ndim == 2 else vals
    return out


def extract_zero_level(net, z, surface, resolution=128, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))):
    """Zero level set of one surface channel on a regular grid.

    net may be a ShapeNetwork or any callable (points, z) -> (n, L) field
    stub.  Returns an empty mesh when the field has no sign change.
    """
    if isinstance(net, nets.ShapeNetwork) and not 1 <= surface <= net.surface_count:
        raise ValueError(f"surface index must be in 1..{net.surface_count}")
    pts, res = grid_points(resolution, bounds)
    field = _eval_field(net, z, surface, pts).reshape(res)
    return marching_cubes(field, bounds, iso=0.0)


# ---------------------------------------------------------------------------
# mesh-to-mesh metrics


def chamfer(mesh_a, mesh_b, n_samples=10000, seed=0):
    """Symmetric point-sampled Chamfer distance between two surfaces."""
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("chamfer requires two nonempty meshes")
    pa, _ = sample_surface_points(mesh_a, n_samples, seed)
    pb, _ = sample_surface_points(mesh_b, n_samples, seed)
    d_ab = point_mesh_distance(pa, mesh_b)
    d_ba = point_mesh_distance(pb, mesh_a)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def hausdorff(mesh_a, mesh_b, n_samples=10000, seed=0):
    """Symmetric point-sampled Hausdorff distance between two surfaces."""
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("hausdorff requires two nonempty meshes")
    pa, _ = sample_surface_points(mesh_a, n_samples, seed)
    pb, _ = sample_surface_points(mesh_b, n_samples, seed)
    d_ab = point_mesh_distance(pa, mesh_b)
    d_ba = point_mesh_distance(pb, mesh_a)
    return max(float(d_ab.max()), float(d_ba.max()))


# ---------------------------------------------------------------------------
# certainty maps


def certainty_map(net, chain, surface, resolution=64, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), tol=None, threshold=1):
    """Voxel counts of posterior samples with |SDF| < tol, plus the mask.

    chain may be a Chain or an (n, d) array of latent samples; only the
    first latent_dim state entries are used, so joint-noise chains work too.
    tol defaults to the largest grid cell edge.
    """
    samples = np.atleast_2d(np.asarray(getattr(chain, "samples", chain), dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("chain must be nonempty")
    pts, res = grid_points(resolution, bounds)
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if tol is None:
        tol = float(np.max((hi - lo) / (np.array(res) - 1)))
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = net.latent_dim if isinstance(net, nets.ShapeNetwork) else samples.shape[1]
    counts = np.zeros(pts.shape[0], dtype=np.uint32)
    for z in samples:
        field = _eval_field(net, z[:d], surface, pts)
        counts += (np.abs(field) < tol).astype(np.uint32)
    counts = counts.reshape(res)
    grid = VoxelGrid(resolution=res, bounds=(lo, hi), values=counts)
    mask = VoxelGrid(resolution=res, bounds=(lo, hi), values=(counts >= threshold))
    return grid, mask


# ---------------------------------------------------------------------------
# primitives and file formats


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron: a nearly uniform triangulated sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
            (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
            (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
        ],
        dtype=float,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    verts = list(verts)
    for _ in range(subdivisions):
        midpoint = {}
        new_faces = []

        def mid(i, jdx):
            key = (i, jdx) if i < jdx else (jdx, i)
            if key not in midpoint:
                m = verts[i] + verts[jdx]
                m /= np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        for i, jdx, k in faces:
            a, b, c = mid(i, jdx), mid(jdx, k), mid(k, i)
            new_faces += [(i, a, c), (jdx, b, a), (k, c, b), (a, b, c)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriMesh(v, np.array(faces, dtype=np.int64))


def save_obj(path, mesh):
    """Write an ASCII OBJ file (v/f records, full double precision)."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path):
    """Read v/f records from an ASCII OBJ file."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


VOXEL_FORMAT = "shapeuq-voxel"


def save_voxel_grid(path, grid):
    """JSON header + little-endian payload, x-fastest ordering.

    Float grids are stored as <f4, integer grids (counts/masks) as <u4.
    """
    values = grid.values
    dtype = "<u4" if values.dtype.kind in "uib" else "<f4"
    header = {
        "format": VOXEL_FORMAT,
        "resolution": list(grid.resolution),
        "bounds": [grid.bounds[0].tolist(), grid.bounds[1].tolist()],
        "dtype": dtype,
        "ordering": "x-fastest",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ravel(values, order="F").astype(dtype).tobytes())


def load_voxel_grid(path):
    """Inverse of save_voxel_grid."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != VOXEL_FORMAT:
            raise ValueError(f"not a {VOXEL_FORMAT} file: {path}")
        raw = np.frombuffer(fh.read(), dtype=header["dtype"])
    res = tuple(header["resolution"])
    values = raw.reshape(res, order="F")
    return VoxelGrid(resolution=res, bounds=tuple(np.array(b) for b in header["bounds"]), values=values)


def save_point_cloud(path, observations):
    """Write observations as CSV with the x,y,z,s,j header."""
    with open(path, "w") as fh:
        fh.write("x,y,z,s,j\n")
        for o in observations:
            fh.write(f"{o.x[0]:.17g},{o.x[1]:.17g},{o.x[2]:.17g},{o.s:.17g},{o.j}\n")


def load_point_cloud(path):
    """Read a x,y,z,s,j CSV into PointObservation objects."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if [h.strip() for h in header] != ["x", "y", "z", "s", "j"]:
            raise ValueError("point cloud CSV must start with header x,y,z,s,j")
        out = []
        for line in fh:
            if not line.strip():
                continue
            vals = line.split(",")
            out.append(
                PointObservation(
                    x=[float(vals[0]), float(vals[1]), float(vals[2])],
                    s=float(vals[3]),
                    j=int(float(vals[4])),
                )
            )
    return out
