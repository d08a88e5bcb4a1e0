"""Planar normalizing flows: layers, stacks, log-determinants and a numerical inverse.

A layer maps ``x -> x + u * tanh(w.x + b)``. Stacks keep their *raw* ``u``
parameters (what the optimiser moves); :meth:`FlowStack.constrained` swaps
each ``u`` for the invertible direction ``u_hat`` with ``w.u_hat > -1``.
:func:`planar_forward` and :func:`stack_forward` take layers as given, so
callers holding raw parameters must constrain first.
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ContractViolation, DegenerateLayerError, InversionFailure
from .kernels import _is_concrete, as_key

# Raw u = IDENTITY_OFFSET * w / |w|^2 constrains to u_hat = 0 exactly in exact arithmetic.
IDENTITY_OFFSET = float(np.log(np.e - 1.0))


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class PlanarLayer:
    u: jax.Array
    w: jax.Array
    b: jax.Array

    @property
    def dim(self):
        return self.u.shape[-1]


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class FlowStack:
    """K planar layers over dimension d, stored as (K, d), (K, d) and (K,) arrays."""

    u: jax.Array
    w: jax.Array
    b: jax.Array

    @property
    def depth(self):
        return self.u.shape[0]

    @property
    def dim(self):
        return self.u.shape[1]

    @property
    def layers(self):
        return tuple(PlanarLayer(self.u[k], self.w[k], self.b[k]) for k in range(self.depth))

    @classmethod
    def identity(cls, d: int):
        z = jnp.zeros((0, d), dtype=jnp.float64)
        return cls(z, z, jnp.zeros((0,), dtype=jnp.float64))

    @classmethod
    def from_layers(cls, layers, d=None):
        layers = list(layers)
        if not layers:
            if d is None:
                raise ContractViolation("dimension required for an empty stack")
            return cls.identity(d)
        dims = {int(jnp.shape(l.u)[-1]) for l in layers} | {int(jnp.shape(l.w)[-1]) for l in layers}
        if len(dims) != 1 or (d is not None and dims != {d}):
            raise ContractViolation("all layers must share one dimension")
        return cls(
            jnp.stack([jnp.asarray(l.u, dtype=jnp.float64) for l in layers]),
            jnp.stack([jnp.asarray(l.w, dtype=jnp.float64) for l in layers]),
            jnp.stack([jnp.asarray(l.b, dtype=jnp.float64) for l in layers]),
        )

    @classmethod
    def init(cls, rng, depth: int, d: int, w_scale: float = 0.1):
        """Identity-start initialisation: w ~ N(0, w_scale^2 I), b = 0, u_hat = 0."""
        if depth < 0:
            raise ContractViolation("flow depth must be >= 0")
        if depth == 0:
            return cls.identity(d)
        w = w_scale * jax.random.normal(as_key(rng), (depth, d), dtype=jnp.float64)
        u = IDENTITY_OFFSET * w / jnp.sum(w * w, axis=1, keepdims=True)
        return cls(u, w, jnp.zeros((depth,), dtype=jnp.float64))

    def constrained(self):
        if self.depth == 0:
            return self
        return dataclasses.replace(self, u=jax.vmap(constrained_direction)(self.u, self.w))


def _m(a):
    return -1.0 + jax.nn.softplus(a)


def constrained_direction(u, w):
    """u_hat = u + (m(w.u) - w.u) w / |w|^2 with m(a) = -1 + log(1 + e^a)."""
    wu = jnp.dot(w, u)
    return u + (_m(wu) - wu) * w / jnp.dot(w, w)


def planar_constrain(layer: PlanarLayer) -> PlanarLayer:
    w = jnp.asarray(layer.w, dtype=jnp.float64)
    if _is_concrete(w) and float(jnp.linalg.norm(w)) < 1e-12:
        raise DegenerateLayerError("planar layer has |w| < 1e-12")
    return PlanarLayer(constrained_direction(jnp.asarray(layer.u, dtype=jnp.float64), w), w, layer.b)


def planar_forward(layer: PlanarLayer, x):
    """Apply one (already constrained) layer to x (..., d); returns (y, logdet)."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape[-1] != layer.u.shape[-1]:
        raise ContractViolation(f"input dimension {x.shape[-1]} != layer dimension {layer.u.shape[-1]}")
    h = jnp.tanh(x @ layer.w + layer.b)
    y = x + h[..., None] * layer.u
    # 1 + u.psi(x) with psi(x) = (1 - h^2) w
    logdet = jnp.log(jnp.abs(1.0 + (1.0 - h * h) * jnp.dot(layer.u, layer.w)))
    return y, logdet


def stack_forward(stack: FlowStack, x):
    """Compose the layers in order; the log-det is that of the forward map."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape[-1] != stack.dim:
        raise ContractViolation(f"input dimension {x.shape[-1]} != stack dimension {stack.dim}")
    logdet = jnp.zeros(x.shape[:-1], dtype=jnp.float64)
    for layer in stack.layers:
        x, ld = planar_forward(layer, x)
        logdet = logdet + ld
    return x, logdet


def stack_inverse(stack: FlowStack, y, tol: float = 1e-10, max_iter: int = 200):
    """Invert a constrained stack by bisection on the scalar w.x of each layer.

    For a layer, ``w.y = a + (w.u) tanh(a + b)`` is strictly increasing in
    ``a = w.x`` when ``w.u > -1``, and the root lies within ``|w.u|`` of
    ``w.y``. Works on numpy arrays of shape (..., d).
    """
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    y = np.asarray(y, dtype=np.float64)
    x = y.copy()
    layers = [(np.asarray(l.u), np.asarray(l.w), float(l.b)) for l in stack.layers]
    for u, w, b in reversed(layers):
        c = float(w @ u)
        if c <= -1.0:
            raise ContractViolation("layer is not invertible (w.u <= -1); constrain it first")
        target = x @ w
        lo = target - abs(c) - 1.0
        hi = target + abs(c) + 1.0
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            g = mid + c * np.tanh(mid + b) - target
            lo = np.where(g < 0, mid, lo)
            hi = np.where(g < 0, hi, mid)
            if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid))):
                break
        a = 0.5 * (lo + hi)
        x = x - np.tanh(a + b)[..., None] * u
    recon, _ = stack_forward(stack, jnp.asarray(x))
    err = float(np.max(np.abs(np.asarray(recon) - y))) if y.size else 0.0
    if not np.isfinite(err) or err > tol:
        raise InversionFailure(f"inverse residual {err:.3g} exceeds tol {tol:.3g}")
    return x
