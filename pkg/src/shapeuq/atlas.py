"""Shape-atlas training: joint optimization of network weights and latent codes.

The training objective averages, over shapes, the per-point squared mismatch
between predicted and sampled signed distances (normalized by surface count
times per-shape sample count) plus a weighted squared-norm prior on each
latent code, and adds the product-of-softplus Lipschitz penalty.  Weight
normalization is applied inside every training forward pass and frozen into
the exported network.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import network as nets
from .network import NumericalError

__all__ = [
    "TrainingShape",
    "LatentTable",
    "TrainConfig",
    "training_loss",
    "train_atlas",
    "fit_prior",
    "save_training_set",
    "load_training_set",
]


@dataclass
class TrainingShape:
    """One shape's samples: points (K, 3) and signed distances (K, L)."""

    id: int
    points: np.ndarray
    sdf: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.sdf = np.atleast_2d(np.asarray(self.sdf, dtype=float))
        if self.points.shape[0] < 1:
            raise ValueError("a training shape needs at least one sample")
        if self.points.shape[1] != 3:
            raise ValueError("points must have 3 columns")
        if self.sdf.shape[0] != self.points.shape[0]:
            raise ValueError("points/sdf row count mismatch")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.sdf))):
            raise ValueError("non-finite training samples")

    @property
    def sample_count(self):
        return self.points.shape[0]


@dataclass
class LatentTable:
    """Latent codes (N, d) indexed by shape id."""

    codes: np.ndarray
    ids: list

    def __post_init__(self):
        self.codes = np.atleast_2d(np.asarray(self.codes, dtype=float))
        self.ids = [int(i) for i in self.ids]
        if self.codes.shape[0] != len(self.ids):
            raise ValueError("one code per shape id required")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("non-finite latent codes")
        self._index = {sid: row for row, sid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate shape ids")

    @property
    def latent_dim(self):
        return self.codes.shape[1]

    def code(self, shape_id):
        try:
            return self.codes[self._index[int(shape_id)]]
        except KeyError:
            raise ValueError(f"unknown shape id {shape_id}") from None

    def row(self, shape_id):
        try:
            return self._index[int(shape_id)]
        except KeyError:
            raise ValueError(f"unknown shape id {shape_id}") from None


@dataclass
class TrainConfig:
    """Optimization settings; paper-scale defaults, desk overrides allowed."""

    epochs: int = 2000
    learning_rate: float = 0.005
    lr_schedule: list = None  # list of (epoch, factor); default: 0.2 at 90% / 97.5%
    inv_sigma2: float = 1.8e-8
    alpha: float = 1.9e-6
    batch_points: int = 0  # 0: full batch whenever total points <= 1e5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    latent_dim: int = 64
    depth: int = 5
    width: int = 256
    latent_init_scale: float = 0.01

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule is None:
            self.lr_schedule = [
                (int(round(0.90 * self.epochs)), 0.2),
                (int(round(0.975 * self.epochs)), 0.2),
            ]
        for _, factor in self.lr_schedule:
            if not 0.0 < factor <= 1.0:
                raise ValueError("schedule factors must lie in (0, 1]")


def _batch_arrays(shapes, table):
    """Stack all shape samples: returns (X, S, rows, weights-per-point, n_shapes)."""
    xs, ss, rows = [], [], []
    for shape in shapes:
        xs.append(shape.points)
        ss.append(shape.sdf)
        rows.append(np.full(shape.sample_count, table.row(shape.id)))
    return np.vstack(xs), np.vstack(ss), np.concatenate(rows), len(shapes)


def training_loss(net, table, batch, cfg):
    """Evaluate the training objective on a batch of (shape_id, x, s) samples.

    Per-shape sample counts are taken over the batch itself; the data term is
    normalized by 1/(L * K_i) per shape, latent priors by cfg.inv_sigma2, and
    the Lipschitz penalty is weighted by cfg.alpha.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    ids = [int(b[0]) for b in batch]
    x = np.array([np.asarray(b[1], dtype=float) for b in batch])
    s = np.array([np.asarray(b[2], dtype=float) for b in batch])
    rows = np.array([table.row(i) for i in ids])
    uniq, counts = np.unique(rows, return_counts=True)
    k_of_row = dict(zip(uniq.tolist(), counts.tolist()))
    n_shapes = len(uniq)
    L = net.surface_count

    u0 = np.concatenate([x, table.codes[rows]], axis=1)
    pred, _ = nets.forward_normalized(net, u0)
    res2 = np.sum((pred - s) ** 2, axis=1)
    per_point_w = np.array([1.0 / (L * k_of_row[r]) for r in rows])
    data = float(np.sum(per_point_w * res2))
    prior = float(cfg.inv_sigma2 * np.sum(table.codes[uniq] ** 2))
    value = (data + prior) / n_shapes + cfg.alpha * nets.lipschitz_penalty(net)
    return value


def _loss_and_grads(net, codes, x, s, rows, point_w, uniq_rows, n_shapes, cfg):
    """Loss plus gradients for one optimization step (normalized forward)."""
    L = net.surface_count
    u0 = np.concatenate([x, codes[rows]], axis=1)
    pred, cache = nets.forward_normalized(net, u0)
    resid = pred - s
    data = float(np.sum(point_w * np.sum(resid**2, axis=1)))
    prior = float(cfg.inv_sigma2 * np.sum(codes[uniq_rows] ** 2))
    pen, pen_grad_c = nets.lipschitz_penalty_grad(net)
    value = (data + prior) / n_shapes + cfg.alpha * pen

    cot = (2.0 / n_shapes) * point_w[:, None] * resid
    grad_u0, grads_w, grads_b, grad_c = nets.backward_normalized(net, cache, cot)
    grad_codes = np.zeros_like(codes)
    np.add.at(grad_codes, rows, grad_u0[:, 3:])
    grad_codes[uniq_rows] += (2.0 * cfg.inv_sigma2 / n_shapes) * codes[uniq_rows]
    grad_c = grad_c + cfg.alpha * pen_grad_c
    return value, grads_w, grads_b, grad_c, grad_codes


class _Adam:
    def __init__(self, shape, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def train_atlas(shapes, cfg, net=None):
    """Jointly optimize network parameters and per-shape latent codes.

    Returns (net, LatentTable, loss_history).  The returned network has the
    Lipschitz normalization frozen into its weights.  Fully deterministic for
    a fixed cfg.seed.
    """
    if not shapes:
        raise ValueError("shapes must be nonempty")
    L = shapes[0].sdf.shape[1]
    if net is None:
        net = nets.init_network(cfg.latent_dim, L, cfg.depth, cfg.width, cfg.seed)
    net = net.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5A7A]))
    table = LatentTable(
        codes=cfg.latent_init_scale * rng.standard_normal((len(shapes), net.latent_dim)),
        ids=[s.id for s in shapes],
    )
    if cfg.epochs == 0:
        return nets.normalize_lipschitz(net), table, []

    x_all, s_all, rows_all, n_shapes = _batch_arrays(shapes, table)
    total_points = x_all.shape[0]
    full_batch = cfg.batch_points <= 0 and total_points <= 100_000
    uniq_rows = np.unique(rows_all)
    counts = np.bincount(rows_all, minlength=len(shapes))
    point_w_all = 1.0 / (L * counts[rows_all])

    opt_w = [_Adam(w.shape, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) for w in net.weights]
    opt_b = [_Adam(b.shape, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) for b in net.biases]
    opt_c = _Adam(net.lipschitz_logits.shape, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    opt_z = _Adam(table.codes.shape, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    schedule = dict(cfg.lr_schedule)
    lr = cfg.learning_rate
    history = []
    for epoch in range(cfg.epochs):
        if epoch in schedule:
            lr *= schedule[epoch]
        if full_batch:
            x, s, rows, point_w = x_all, s_all, rows_all, point_w_all
        else:
            keep = []
            for shape_row, shape in enumerate(shapes):
                idx = np.flatnonzero(rows_all == shape_row)
                take = min(max(cfg.batch_points, 1), idx.size)
                keep.append(rng.choice(idx, size=take, replace=False))
            keep = np.concatenate(keep)
            x, s, rows = x_all[keep], s_all[keep], rows_all[keep]
            sub_counts = np.bincount(rows, minlength=len(shapes))
            point_w = 1.0 / (L * sub_counts[rows])

        value, gw, gb, gc, gz = _loss_and_grads(
            net, table.codes, x, s, rows, point_w, uniq_rows, n_shapes, cfg
        )
        if not np.isfinite(value):
            raise NumericalError(f"training loss became non-finite at epoch {epoch}")
        for i in range(net.depth):
            net.weights[i] = opt_w[i].step(net.weights[i], gw[i], lr)
            net.biases[i] = opt_b[i].step(net.biases[i], gb[i], lr)
        net.lipschitz_logits = opt_c.step(net.lipschitz_logits, gc, lr)
        table.codes = opt_z.step(table.codes, gz, lr)
        history.append(value)

    return nets.normalize_lipschitz(net), table, history


def fit_prior(table):
    """Isotropic Gaussian MLE over the latent codes: (mean, scalar variance).

    The variance is the mean over dimensions of the per-dimension biased
    (divisor N) variance.
    """
    codes = table.codes if isinstance(table, LatentTable) else np.atleast_2d(table)
    if codes.shape[0] < 2:
        raise ValueError("at least two latent codes required")
    mu = codes.mean(axis=0)
    sigma_tilde2 = float(np.mean(np.var(codes, axis=0)))
    return mu, sigma_tilde2


def save_training_set(out_dir, shapes, manifest_name="manifest.json"):
    """Write one CSV per shape (x,y,z,s1..sL) plus a manifest listing them."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for shape in shapes:
        fname = f"shape_{shape.id:04d}.csv"
        L = shape.sdf.shape[1]
        with open(os.path.join(out_dir, fname), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "z"] + [f"s{k+1}" for k in range(L)])
            for p, s in zip(shape.points, shape.sdf):
                writer.writerow([f"{v:.17g}" for v in (*p, *s)])
        entries.append({"id": shape.id, "file": fname})
    manifest = os.path.join(out_dir, manifest_name)
    with open(manifest, "w") as fh:
        json.dump({"shapes": entries}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_training_set(manifest_path):
    """Read a manifest plus its per-shape CSVs back into TrainingShape objects."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    shapes = []
    for entry in manifest["shapes"]:
        data = np.genfromtxt(
            os.path.join(base, entry["file"]), delimiter=",", skip_header=1
        )
        data = np.atleast_2d(data)
        shapes.append(TrainingShape(id=entry["id"], points=data[:, :3], sdf=data[:, 3:]))
    return shapes
