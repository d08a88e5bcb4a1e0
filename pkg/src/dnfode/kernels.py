"""Squared-exponential kernel, Gram matrices and random Fourier feature bases."""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ContractViolation, SingularMatrixError

DEFAULT_RELATIVE_JITTER = 1e-6
MAX_RELATIVE_JITTER = 1e-4


def as_key(rng):
    """Accept an integer seed or an existing PRNG key."""
    if isinstance(rng, (int, np.integer)):
        return jax.random.PRNGKey(int(rng))
    return rng


def _is_concrete(*xs):
    return not any(isinstance(x, jax.core.Tracer) for x in xs)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class SEKernelParams:
    """ARD squared-exponential hyperparameters, stored in log space.

    One kernel is shared by every output dimension of the vector field.
    """

    log_lengthscales: jax.Array
    log_variance: jax.Array
    jitter: float = dataclasses.field(default=1e-6, metadata=dict(static=True))

    @classmethod
    def create(cls, lengthscales, signal_variance=1.0, jitter=None):
        ls = jnp.atleast_1d(jnp.asarray(lengthscales, dtype=jnp.float64))
        var = jnp.asarray(signal_variance, dtype=jnp.float64)
        if _is_concrete(ls, var):
            if np.any(np.asarray(ls) <= 0) or float(var) <= 0:
                raise ContractViolation("lengthscales and signal variance must be positive")
        if jitter is None:
            jitter = DEFAULT_RELATIVE_JITTER * float(var)
        if jitter < 0:
            raise ContractViolation("jitter must be nonnegative")
        return cls(jnp.log(ls), jnp.log(var), float(jitter))

    @property
    def lengthscales(self):
        return jnp.exp(self.log_lengthscales)

    @property
    def signal_variance(self):
        return jnp.exp(self.log_variance)

    @property
    def dim(self):
        return self.log_lengthscales.shape[0]


def _check_dim(d, params):
    if d != params.dim:
        raise ContractViolation(f"input dimension {d} does not match kernel dimension {params.dim}")


def se_kernel(x, x2, params: SEKernelParams):
    """k(x, x') = s2 * exp(-0.5 * sum_j (x_j - x'_j)^2 / l_j^2)."""
    x = jnp.asarray(x, dtype=jnp.float64)
    x2 = jnp.asarray(x2, dtype=jnp.float64)
    if x.shape[-1] != x2.shape[-1]:
        raise ContractViolation(f"dimension mismatch: {x.shape[-1]} vs {x2.shape[-1]}")
    _check_dim(x.shape[-1], params)
    r = (x - x2) / params.lengthscales
    return params.signal_variance * jnp.exp(-0.5 * jnp.sum(r * r, axis=-1))


def cross_gram(X, Z, params: SEKernelParams):
    """Kernel matrix between the rows of X (..., N, d) and Z (M, d), no jitter."""
    if X.shape[-1] != Z.shape[-1]:
        raise ContractViolation(f"column counts differ: {X.shape[-1]} vs {Z.shape[-1]}")
    _check_dim(X.shape[-1], params)
    ls = params.lengthscales
    Xs = X / ls
    Zs = Z / ls
    # Explicit differences keep the diagonal exact (no cancellation from the expanded square).
    diff = Xs[..., :, None, :] - Zs
    return params.signal_variance * jnp.exp(-0.5 * jnp.sum(diff * diff, axis=-1))


def gram(X, Z, params: SEKernelParams, same=None):
    """Gram matrix K(X, Z); jitter is added to the diagonal when X and Z are the same matrix."""
    X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
    Z = jnp.atleast_2d(jnp.asarray(Z, dtype=jnp.float64))
    K = cross_gram(X, Z, params)
    if same is None:
        same = X is Z or (
            _is_concrete(X, Z) and X.shape == Z.shape and bool(jnp.all(X == Z))
        )
    if same:
        K = K + params.jitter * jnp.eye(X.shape[0])
    return K


def chol_psd(A, params: SEKernelParams):
    """Cholesky factor of a symmetric matrix with escalating diagonal jitter.

    Returns ``(L, added_jitter)``. Tries the matrix as given first, then adds
    ``1e-6 * s2`` and grows it tenfold per retry up to ``1e-4 * s2``.
    """
    A = jnp.asarray(A, dtype=jnp.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractViolation("chol_psd expects a square matrix")
    var = float(params.signal_variance)
    eye = jnp.eye(A.shape[0])
    jitter = 0.0
    max_jitter = MAX_RELATIVE_JITTER * var
    while True:
        L = jnp.linalg.cholesky(A + jitter * eye)
        if bool(jnp.all(jnp.isfinite(L))):
            return L, jitter
        jitter = DEFAULT_RELATIVE_JITTER * var if jitter == 0.0 else jitter * 10.0
        if jitter > max_jitter * (1 + 1e-12):
            raise SingularMatrixError(
                f"Cholesky failed after jitter escalation to {max_jitter:.3g}"
            )


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class FourierBasis:
    """Random Fourier features whose weighted sum is one approximate prior draw."""

    frequencies: jax.Array  # (B, d)
    phases: jax.Array  # (B,)
    weights: jax.Array  # (B, d_out)
    amplitude: jax.Array

    @property
    def size(self):
        return self.frequencies.shape[0]


def basis_from_draws(params: SEKernelParams, unit_frequencies, phases, weights):
    """Scale standard-normal frequency draws by the current lengthscales.

    Keeping the unit draws fixed lets the basis follow the kernel
    hyperparameters while they are optimised.
    """
    B = unit_frequencies.shape[0]
    return FourierBasis(
        frequencies=unit_frequencies / params.lengthscales,
        phases=phases,
        weights=weights,
        amplitude=jnp.sqrt(2.0 * params.signal_variance / B),
    )


def draw_basis_skeleton(key, B: int, d: int):
    """Unit-scale frequencies (B, d) and phases in [0, 2pi)."""
    if B < 1:
        raise ContractViolation("number of basis functions must be >= 1")
    k1, k2 = jax.random.split(key)
    freqs = jax.random.normal(k1, (B, d), dtype=jnp.float64)
    phases = jax.random.uniform(k2, (B,), dtype=jnp.float64, minval=0.0, maxval=2 * jnp.pi)
    return freqs, phases


def sample_fourier_basis(params: SEKernelParams, B: int, d_out: int, rng) -> FourierBasis:
    if B < 1 or d_out < 1:
        raise ContractViolation("B and d_out must be positive")
    key = as_key(rng)
    k_basis, k_w = jax.random.split(key)
    freqs, phases = draw_basis_skeleton(k_basis, B, params.dim)
    weights = jax.random.normal(k_w, (B, d_out), dtype=jnp.float64)
    return basis_from_draws(params, freqs, phases, weights)


def rff_features(basis: FourierBasis, x):
    """Feature matrix (..., B) at states x (..., d)."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape[-1] != basis.frequencies.shape[1]:
        raise ContractViolation(
            f"state dimension {x.shape[-1]} does not match basis dimension "
            f"{basis.frequencies.shape[1]}"
        )
    return basis.amplitude * jnp.cos(x @ basis.frequencies.T + basis.phases)


def rff_prior_eval(basis: FourierBasis, x):
    """Prior function sample at x: amplitude * sum_b weights_b cos(freq_b . x + phase_b)."""
    return rff_features(basis, x) @ basis.weights
