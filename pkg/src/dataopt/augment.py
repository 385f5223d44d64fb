"""Per-point differentiable geometric augmentation.

Each train record owns magnitude and gate hyperparameters for a fixed
sequence of affine operations.  Magnitudes come from a reparameterized
Gaussian whose variance is sigmoid(lambda_m); gates are Bernoulli
switches relaxed with Gumbel-softmax so gradients reach lambda_b.  The
gated sequence blends each warped stage with its input, and every step
is an affine warp executed by bilinear grid sampling with zero padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .seeding import derive_rng

GATE_INIT_PROB = 0.25


class AugmentError(Exception):
    pass


@dataclass(frozen=True)
class AugOpSpec:
    """One learnable operation: prior mean and magnitude range."""

    kind: str
    mu: float
    rng: float

    def __post_init__(self):
        if self.kind not in _WARPS:
            raise AugmentError(f"unknown augmentation op {self.kind!r}")
        if self.rng <= 0:
            raise AugmentError("magnitude range must be positive")


def default_ops():
    """The six geometric operations with their standard [mu, rng] settings."""
    return [
        AugOpSpec("rotate", 0.0, 30.0),
        AugOpSpec("scale", 1.0, 0.5),
        AugOpSpec("translateX", 0.0, 0.45),
        AugOpSpec("translateY", 0.0, 0.45),
        AugOpSpec("shearX", 0.0, 0.3),
        AugOpSpec("shearY", 0.0, 0.3),
    ]


class AugHypers:
    """Magnitude and gate hyperparameters, one row per train record.

    In shared mode a single row is broadcast to every record, emulating
    a dataset-wide augmentation policy.
    """

    def __init__(self, n_points, ops=None, shared=False, m_norm=10.0):
        self.ops = list(ops) if ops is not None else default_ops()
        self.n_points = n_points
        self.shared = shared
        self.m_norm = m_norm
        rows = 1 if shared else n_points
        a = len(self.ops)
        self.lambda_m = Tensor(np.zeros((rows, a)), requires_grad=True)
        init_b = math.log(GATE_INIT_PROB / (1.0 - GATE_INIT_PROB))
        self.lambda_b = Tensor(np.full((rows, a), init_b), requires_grad=True)

    @property
    def n_ops(self):
        return len(self.ops)

    def row_indices(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        if self.shared:
            return np.zeros(len(indices), dtype=np.int64)
        return indices

    def mu_vector(self):
        return np.array([op.mu for op in self.ops])

    def rng_vector(self):
        return np.array([op.rng for op in self.ops])


def sample_magnitudes(hypers: AugHypers, indices, noise_seed) -> Tensor:
    """Reparameterized magnitude draw: mu + rng*(M/10)*sqrt(sigmoid(lambda_m))*z.

    Clamped to [mu - rng, mu + rng] so warps stay within each operation's
    stated range; differentiable wrt lambda_m through the fixed noise z.
    Noise is keyed by each record's row, so estimates are invariant to
    the order of examples inside a batch.
    """
    indices = np.asarray(indices, dtype=np.int64)
    lam = dc.gather_rows(hypers.lambda_m, hypers.row_indices(indices))
    z = derive_rng(noise_seed, 11).standard_normal((hypers.n_points, hypers.n_ops))[indices]
    mu = hypers.mu_vector()
    rng = hypers.rng_vector()
    scale = rng * (hypers.m_norm / 10.0)
    dev = dc.mul(dc.sqrt(dc.sigmoid(lam)), dc.constant(scale * z))
    m = dc.add(dc.constant(mu), dev)
    return dc.clamp(m, mu - rng, mu + rng)


def sample_gates(hypers: AugHypers, indices, temperature, noise_seed,
                 straight_through=False) -> Tensor:
    """Gumbel-softmax relaxed Bernoulli gates, differentiable wrt lambda_b.

    The straight-through variant rounds the forward value while keeping
    the relaxed gradient.
    """
    if temperature <= 0:
        raise AugmentError("temperature must be positive")
    indices = np.asarray(indices, dtype=np.int64)
    lam = dc.gather_rows(hypers.lambda_b, hypers.row_indices(indices))
    rng = derive_rng(noise_seed, 13)
    full = (hypers.n_points, hypers.n_ops)
    g0 = -np.log(-np.log(rng.uniform(size=full)))[indices]
    g1 = -np.log(-np.log(rng.uniform(size=full)))[indices]
    relaxed = dc.sigmoid(dc.mul(dc.add(lam, dc.constant(g1 - g0)),
                                dc.constant(1.0 / temperature)))
    if straight_through:
        hard = (relaxed.data > 0.5).astype(np.float64)
        return dc.add(relaxed, dc.constant(hard - relaxed.data))
    return relaxed


_GRID_CACHE = {}


def _mesh(h, w):
    if (h, w) not in _GRID_CACHE:
        ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w),
                             indexing="ij")
        _GRID_CACHE[(h, w)] = (xs, ys)
    return _GRID_CACHE[(h, w)]


def _affine_coeffs(kind, m):
    """Inverse-map coefficients (a11,a12,a13,a21,a22,a23) for output->source coords."""
    one = dc.constant(1.0)
    zero = dc.constant(0.0)
    if kind == "rotate":
        phi = dc.mul(m, dc.constant(math.pi / 180.0))
        c, s = dc.cos(phi), dc.sin(phi)
        return c, s, zero, dc.neg(s), c, zero
    if kind == "scale":
        inv = dc.div(one, m)
        return inv, zero, zero, zero, inv, zero
    if kind == "translateX":
        return one, zero, dc.mul(m, dc.constant(-2.0)), zero, one, zero
    if kind == "translateY":
        return one, zero, zero, zero, one, dc.mul(m, dc.constant(-2.0))
    if kind == "shearX":
        return one, dc.neg(m), zero, zero, one, zero
    if kind == "shearY":
        return one, zero, zero, dc.neg(m), one, zero
    raise AugmentError(f"unknown augmentation op {kind!r}")


_WARPS = {"rotate", "scale", "translateX", "translateY", "shearX", "shearY"}


def warp(x: Tensor, kind: str, m: Tensor) -> Tensor:
    """Affine warp of a [B,C,H,W] batch by per-sample magnitude m [B]."""
    b, _, h, w = x.shape
    xs, ys = _mesh(h, w)
    xc, yc = dc.constant(xs), dc.constant(ys)
    coeffs = [t if t.ndim == 0 else dc.reshape(t, (b, 1, 1))
              for t in _affine_coeffs(kind, m)]
    a11, a12, a13, a21, a22, a23 = coeffs
    gx = dc.add(dc.add(dc.mul(a11, xc), dc.mul(a12, yc)), a13)
    gy = dc.add(dc.add(dc.mul(a21, xc), dc.mul(a22, yc)), a23)
    if gx.shape != (b, h, w):
        gx = dc.broadcast_to(gx, (b, h, w))
    if gy.shape != (b, h, w):
        gy = dc.broadcast_to(gy, (b, h, w))
    return dc.grid_sample(x, gx, gy)


def apply_chain(x: Tensor, gates: Tensor, magnitudes: Tensor, ops) -> Tensor:
    """Sequentially blend each gated warp with its input.

    Stage a computes gate*warp(x, m_a) + (1-gate)*x, so a closed gate is
    an exact pass-through and the whole chain stays differentiable in
    the image, the gates, and the magnitudes.
    """
    if not np.all(np.isfinite(magnitudes.data)):
        raise AugmentError("non-finite augmentation magnitude")
    b = x.shape[0]
    for a, op in enumerate(ops):
        m = dc.reshape(dc.narrow(magnitudes, 1, a, 1), (b,))
        g = dc.reshape(dc.narrow(gates, 1, a, 1), (b, 1, 1, 1))
        warped = warp(x, op.kind, m)
        x = dc.add(dc.mul(g, warped), dc.mul(dc.sub(dc.constant(1.0), g), x))
    return x


def augment_batch(x: Tensor, hypers: AugHypers, indices, temperature, noise_seed,
                  straight_through=False):
    """Sample gates and magnitudes for a batch and run the chain."""
    mags = sample_magnitudes(hypers, indices, noise_seed)
    gates = sample_gates(hypers, indices, temperature, noise_seed,
                         straight_through=straight_through)
    return apply_chain(x, gates, mags, hypers.ops)
