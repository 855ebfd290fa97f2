"""Latent-conditioned multi-surface signed distance network.

A fully connected tanh network maps the concatenation of a spatial point
``x`` (3 entries) and a latent code ``z`` (``latent_dim`` entries) to one
signed distance value per surface.  Forward evaluation, exact reverse-mode
gradients and the per-layer Lipschitz-bound machinery (softplus-bounded
operator norms with weight normalization) are implemented here in plain
numpy, double precision throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeNetwork",
    "init_network",
    "forward",
    "forward_batch",
    "backprop",
    "backprop_batch",
    "lipschitz_penalty",
    "lipschitz_penalty_grad",
    "normalize_lipschitz",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "shapeuq-model"
MODEL_VERSION = 1


class NumericalError(RuntimeError):
    """Raised when an iteration produces non-finite values or fails to converge."""


def softplus(c):
    c = np.asarray(c, dtype=float)
    return np.logaddexp(0.0, c)


def softplus_inverse(y):
    """Inverse of softplus for y > 0: ln(exp(y) - 1), computed stably."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus_inverse requires positive input")
    return y + np.log1p(-np.exp(-y))


def inf_operator_norm(w):
    """Max absolute row sum, the operator norm for the sup-norm on inputs."""
    return float(np.max(np.sum(np.abs(w), axis=1))) if w.size else 0.0


@dataclass
class ShapeNetwork:
    """Weights, biases and per-layer Lipschitz logits of the SDF network.

    ``weights[i]`` has shape (n_out, n_in); the first layer consumes
    3 + latent_dim inputs and the last produces ``surface_count`` outputs.
    All hidden layers use tanh, the final layer is affine.  Instances are
    treated as immutable after construction; training code works on copies.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    lipschitz_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    latent_dim: int = 0
    surface_count: int = 0

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        self.lipschitz_logits = np.asarray(self.lipschitz_logits, dtype=float)
        if len(self.weights) < 2:
            raise ValueError("network depth must be at least 2")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases layer count mismatch")
        if self.lipschitz_logits.shape != (len(self.weights),):
            raise ValueError("one Lipschitz logit per layer required")
        if self.weights[0].shape[1] != 3 + self.latent_dim:
            raise ValueError("first layer must consume 3 + latent_dim inputs")
        if self.weights[-1].shape[0] != self.surface_count:
            raise ValueError("last layer must produce surface_count outputs")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[0],):
                raise ValueError("bias shape mismatch")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError("consecutive layer shapes incompatible")
        if not all(np.all(np.isfinite(w)) for w in self.weights):
            raise ValueError("non-finite weights")
        if not all(np.all(np.isfinite(b)) for b in self.biases):
            raise ValueError("non-finite biases")
        if not np.all(np.isfinite(self.lipschitz_logits)):
            raise ValueError("non-finite Lipschitz logits")

    @property
    def depth(self):
        return len(self.weights)

    @property
    def input_dim(self):
        return 3 + self.latent_dim

    @property
    def hidden_width(self):
        return self.weights[0].shape[0]

    @property
    def param_count(self):
        n = sum(w.size for w in self.weights) + sum(b.size for b in self.biases)
        return n + self.lipschitz_logits.size

    def copy(self):
        return ShapeNetwork(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            lipschitz_logits=self.lipschitz_logits.copy(),
            latent_dim=self.latent_dim,
            surface_count=self.surface_count,
        )


def init_network(d, L, depth, width, seed):
    """Deterministically initialize a network of the given dimensions.

    Weights are uniform on ±1/sqrt(fan_in), biases zero, and each layer's
    Lipschitz logit starts at softplus^{-1} of that layer's initial
    sup-operator norm so the bound is tight at initialization.
    """
    if min(d, L, depth, width) < 1:
        raise ValueError("d, L, depth and width must all be >= 1")
    if depth < 2:
        raise ValueError("depth must be at least 2")
    rng = np.random.default_rng(seed)
    dims = [3 + d] + [width] * (depth - 1) + [L]
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    logits = softplus_inverse(np.array([inf_operator_norm(w) for w in weights]))
    return ShapeNetwork(weights, biases, logits, latent_dim=d, surface_count=L)


def _forward_core(weights, biases, u0):
    """Run the layer stack on pre-concatenated inputs u0 of shape (n, 3+d).

    Returns (outputs (n, L), activations) where activations[i] is the input
    fed into layer i; hidden tanh outputs are reused for the backward pass.
    """
    acts = [u0]
    a = u0
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        a = a @ w.T + b
        if i != last:
            a = np.tanh(a)
        acts.append(a)
    return a, acts


def _backward_core(weights, acts, cot):
    """Exact reverse pass for sum_k <cot_k, f(u0_k)>.

    Returns (grad_u0 (n, 3+d), grad_weights list, grad_biases list).
    """
    n_layers = len(weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    delta = np.asarray(cot, dtype=float)
    for i in range(n_layers - 1, -1, -1):
        a_in = acts[i]
        grads_w[i] = delta.T @ a_in
        grads_b[i] = delta.sum(axis=0)
        delta = delta @ weights[i]
        if i > 0:
            t = acts[i]  # tanh output of layer i-1
            delta = delta * (1.0 - t * t)
    return delta, grads_w, grads_b


def _backward_inputs(weights, acts, cot):
    """Input-only reverse pass (skips weight/bias gradient accumulation)."""
    delta = np.asarray(cot, dtype=float)
    for i in range(len(weights) - 1, -1, -1):
        delta = delta @ weights[i]
        if i > 0:
            t = acts[i]
            delta = delta * (1.0 - t * t)
    return delta


def forward_batch(net, points, z):
    """Evaluate the network at many points sharing one latent code.

    points: (n, 3); z: (latent_dim,).  Returns (n, surface_count).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    if points.shape[1] != 3:
        raise ValueError("points must have 3 columns")
    if z.shape != (net.latent_dim,):
        raise ValueError(f"latent code must have length {net.latent_dim}")
    u0 = np.concatenate([points, np.broadcast_to(z, (points.shape[0], z.size))], axis=1)
    out, _ = _forward_core(net.weights, net.biases, u0)
    return out


def forward(net, x, z):
    """Evaluate the network at a single point; returns (surface_count,)."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (3,):
        raise ValueError("x must have 3 entries")
    return forward_batch(net, x[None, :], z)[0]


def _flatten_grads(grads_w, grads_b, grad_c):
    parts = [g.ravel() for g in grads_w] + [g.ravel() for g in grads_b]
    parts.append(np.asarray(grad_c, dtype=float).ravel())
    return np.concatenate(parts)


def param_vector(net):
    """Flatten parameters: all weights (row-major, layer order), all biases, logits."""
    return _flatten_grads(net.weights, net.biases, net.lipschitz_logits)


def network_from_params(flat, d, L, depth, width):
    """Rebuild a ShapeNetwork from a flat parameter vector (inverse of param_vector)."""
    dims = [3 + d] + [width] * (depth - 1) + [L]
    flat = np.asarray(flat, dtype=float)
    weights, biases = [], []
    pos = 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos : pos + n_in * n_out].reshape(n_out, n_in).copy())
        pos += n_in * n_out
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        biases.append(flat[pos : pos + n_out].copy())
        pos += n_out
    logits = flat[pos : pos + depth].copy()
    pos += depth
    if pos != flat.size:
        raise ValueError("parameter vector length mismatch")
    return ShapeNetwork(weights, biases, logits, latent_dim=d, surface_count=L)


def backprop_batch(net, points, z, cotangents):
    """Gradient of sum_k <cotangents[k], forward(net, points[k], z)>.

    Returns (grad_z (latent_dim,), grad_theta) where grad_theta follows the
    param_vector layout.  The Lipschitz logits do not enter the plain forward
    pass, so their gradient block is zero.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cot = np.atleast_2d(np.asarray(cotangents, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    if cot.shape != (points.shape[0], net.surface_count):
        raise ValueError("cotangent shape mismatch")
    if not np.all(np.isfinite(cot)):
        raise ValueError("non-finite cotangent")
    u0 = np.concatenate([points, np.broadcast_to(z, (points.shape[0], z.size))], axis=1)
    _, acts = _forward_core(net.weights, net.biases, u0)
    grad_u0, grads_w, grads_b = _backward_core(net.weights, acts, cot)
    grad_z = grad_u0[:, 3:].sum(axis=0)
    grad_theta = _flatten_grads(grads_w, grads_b, np.zeros_like(net.lipschitz_logits))
    return grad_z, grad_theta


def backprop(net, x, z, cotangent):
    """Single-point exact reverse-mode gradient of <cotangent, forward(net, x, z)>."""
    x = np.asarray(x, dtype=float).ravel()
    cotangent = np.asarray(cotangent, dtype=float).ravel()
    if cotangent.shape != (net.surface_count,):
        raise ValueError(f"cotangent must have length {net.surface_count}")
    return backprop_batch(net, x[None, :], z, cotangent[None, :])


def lipschitz_penalty(net):
    """Product of per-layer softplus Lipschitz bounds."""
    return float(np.prod(softplus(net.lipschitz_logits)))


def lipschitz_penalty_grad(net):
    """Penalty value and its gradient with respect to the Lipschitz logits."""
    sp = softplus(net.lipschitz_logits)
    value = float(np.prod(sp))
    sig = expit(net.lipschitz_logits)
    # d/dc_i prod_j sp_j = sigmoid(c_i) * prod_{j != i} sp_j
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = np.where(sp > 0, value / sp, 0.0) * sig
    if not np.all(np.isfinite(grad)):  # rebuild exactly if any sp underflowed
        grad = np.array(
            [sig[i] * np.prod(np.delete(sp, i)) for i in range(sp.size)]
        )
    return value, grad


def _layer_scales(weights, logits):
    """Per-layer normalization scale min(1, softplus(c)/||W||_inf) with row info."""
    scales, rows, norms = [], [], []
    bounds = softplus(logits)
    for w, p in zip(weights, bounds):
        rowsums = np.sum(np.abs(w), axis=1)
        r = int(np.argmax(rowsums))
        n = float(rowsums[r])
        s = 1.0 if n <= p or n == 0.0 else float(p / n)
        scales.append(s)
        rows.append(r)
        norms.append(n)
    return scales, rows, norms


def effective_weights(net_or_weights, logits=None):
    """Weights after Lipschitz normalization, plus the scale diagnostics."""
    if logits is None:
        weights, logits = net_or_weights.weights, net_or_weights.lipschitz_logits
    else:
        weights = net_or_weights
    scales, rows, norms = _layer_scales(weights, logits)
    eff = [w if s == 1.0 else s * w for w, s in zip(weights, scales)]
    return eff, scales, rows, norms


def normalize_lipschitz(net):
    """Return a network with the normalization frozen into the weights.

    Each weight matrix is rescaled by min(1, softplus(c)/||W||_inf) so the
    sup-operator norm of every layer is bounded by its softplus logit.
    """
    eff, _, _, _ = effective_weights(net)
    return ShapeNetwork(
        weights=[w.copy() for w in eff],
        biases=[b.copy() for b in net.biases],
        lipschitz_logits=net.lipschitz_logits.copy(),
        latent_dim=net.latent_dim,
        surface_count=net.surface_count,
    )


def forward_normalized(net, u0):
    """Training-time forward through normalized weights; returns (out, cache)."""
    eff, scales, rows, norms = effective_weights(net)
    out, acts = _forward_core(eff, net.biases, u0)
    return out, (eff, scales, rows, norms, acts)


def backward_normalized(net, cache, cot):
    """Training-time reverse pass through the normalization.

    Differentiates sum_k <cot_k, f(u0_k)> with respect to the raw weights,
    biases, Lipschitz logits and the stacked inputs.  When a layer's bound
    binds (scale < 1), the scale s = softplus(c)/n couples the data term to
    both c and the argmax row of |W| through n = max abs row sum.
    """
    eff, scales, rows, norms, acts = cache
    grad_u0, grads_eff, grads_b = _backward_core(eff, acts, cot)
    sig = expit(net.lipschitz_logits)
    bounds = softplus(net.lipschitz_logits)
    grads_w = []
    grad_c = np.zeros_like(net.lipschitz_logits)
    for i, (w, g_eff) in enumerate(zip(net.weights, grads_eff)):
        s, r, n = scales[i], rows[i], norms[i]
        if s == 1.0:
            grads_w.append(g_eff)
            continue
        inner = float(np.sum(g_eff * w))  # <dL/dWeff, W>
        gw = s * g_eff
        gw[r, :] -= (bounds[i] / n**2) * inner * np.sign(w[r, :])
        grads_w.append(gw)
        grad_c[i] += sig[i] * inner / n
    return grad_u0, grads_w, grads_b, grad_c


def save_model(path, net, seed=None, latents=None, meta=None):
    """Write the model file: one JSON header line + float64 LE parameter payload.

    Payload layout matches param_vector (weights row-major in layer order,
    then biases, then Lipschitz logits); an optional latent table (n, d) is
    appended row-major for checkpoints.
    """
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "latent_dim": int(net.latent_dim),
        "surface_count": int(net.surface_count),
        "depth": int(net.depth),
        "width": int(net.hidden_width),
        "norm_p": "inf",
        "seed": seed,
        "param_count": int(net.param_count),
        "latent_count": 0 if latents is None else int(np.asarray(latents).shape[0]),
    }
    if meta:
        header["meta"] = meta
    payload = param_vector(net)
    if latents is not None:
        payload = np.concatenate([payload, np.asarray(latents, dtype=float).ravel()])
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload.astype("<f8").tobytes())


def load_model(path):
    """Read a model file; returns (net, header, latents-or-None)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} file: {path}")
        payload = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    d, L = header["latent_dim"], header["surface_count"]
    depth, width = header["depth"], header["width"]
    n_params = header["param_count"]
    net = network_from_params(payload[:n_params], d, L, depth, width)
    latents = None
    if header.get("latent_count", 0) > 0:
        latents = payload[n_params:].reshape(header["latent_count"], d).copy()
    return net, header, latents
