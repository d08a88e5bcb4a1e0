"""Inducing-point representation of the GP vector field and pathwise (Matheron) sampling."""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
from jax.scipy.linalg import cho_solve, solve_triangular

from .errors import ContractViolation, SingularMatrixError
from .kernels import (
    FourierBasis,
    SEKernelParams,
    _is_concrete,
    as_key,
    basis_from_draws,
    cross_gram,
    draw_basis_skeleton,
    gram,
    rff_prior_eval,
)

LOG_2PI = float(jnp.log(2 * jnp.pi))


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class InducingModel:
    """Inducing locations, shared kernel, fixed Fourier skeleton and observation noise.

    ``basis_frequencies`` are unit-scale draws; they are divided by the current
    lengthscales whenever a basis is assembled.
    """

    Z: jax.Array  # (M, d)
    kernel: SEKernelParams
    basis_frequencies: jax.Array  # (B, d)
    basis_phases: jax.Array  # (B,)
    noise_R: jax.Array  # (d_obs,)

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def dim(self):
        return self.Z.shape[1]

    @property
    def n_basis(self):
        return self.basis_frequencies.shape[0]


def make_inducing_model(Z, kernel, noise_R, n_basis=256, rng=0):
    Z = jnp.atleast_2d(jnp.asarray(Z, dtype=jnp.float64))
    freqs, phases = draw_basis_skeleton(as_key(rng), n_basis, Z.shape[1])
    noise = jnp.atleast_1d(jnp.asarray(noise_R, dtype=jnp.float64))
    if _is_concrete(noise) and bool(jnp.any(noise <= 0)):
        raise ContractViolation("noise variances must be positive")
    return InducingModel(Z, kernel, freqs, phases, noise)


def init_inducing_locations(states, M: int, rng):
    """Uniform draws inside the bounding box of the (finite) training states."""
    states = jnp.asarray(states, dtype=jnp.float64)
    finite = jnp.all(jnp.isfinite(states), axis=1)
    s = states[finite]
    lo, hi = jnp.min(s, axis=0), jnp.max(s, axis=0)
    return lo + (hi - lo) * jax.random.uniform(as_key(rng), (M, s.shape[1]), dtype=jnp.float64)


def gram_cholesky(model: InducingModel):
    """Cholesky factor of K(Z, Z) + jitter I, reused by every solve for this snapshot."""
    L = jnp.linalg.cholesky(gram(model.Z, model.Z, model.kernel, same=True))
    if _is_concrete(L) and not bool(jnp.all(jnp.isfinite(L))):
        raise SingularMatrixError("K(Z, Z) is not positive definite at the configured jitter")
    return L


def _check_U(U, model):
    if U.shape != (model.num_inducing, model.dim):
        raise ContractViolation(f"U must have shape {(model.num_inducing, model.dim)}, got {U.shape}")


def prior_u_logpdf(U, model: InducingModel, L=None):
    """Sum over output columns of log N(U[:, j]; 0, K(Z, Z) + jitter I)."""
    U = jnp.asarray(U, dtype=jnp.float64)
    _check_U(U, model)
    if L is None:
        L = gram_cholesky(model)
    M, d = U.shape
    alpha = solve_triangular(L, U, lower=True)
    half_logdet = jnp.sum(jnp.log(jnp.diag(L)))
    return -0.5 * d * M * LOG_2PI - d * half_logdet - 0.5 * jnp.sum(alpha * alpha)


def conditional_moments(x, model: InducingModel, U, L=None):
    """Mean K(x,Z) K^-1 U and the shared scalar variance k(x,x) - K(x,Z) K^-1 K(Z,x).

    Accepts a single state (d,) or a batch (N, d).
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    U = jnp.asarray(U, dtype=jnp.float64)
    _check_U(U, model)
    single = x.ndim == 1
    X = jnp.atleast_2d(x)
    if L is None:
        L = gram_cholesky(model)
    Kxz = cross_gram(X, model.Z, model.kernel)
    A = cho_solve((L, True), Kxz.T)  # (M, N)
    mean = A.T @ U
    var = model.kernel.signal_variance - jnp.sum(Kxz * A.T, axis=1)
    if _is_concrete(var) and bool(jnp.any(var < -1e-9)):
        raise SingularMatrixError("negative conditional variance; Gram matrix is ill-conditioned")
    var = jnp.maximum(var, 0.0)
    if single:
        return mean[0], var[0]
    return mean, var


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class PathSample:
    """One function draw f(.)|U; evaluating it twice at the same x gives the same value."""

    U_sample: jax.Array  # (M, d)
    prior_weights: jax.Array  # (B, d)
    basis: FourierBasis
    cached_solve: jax.Array  # (M, d) = (K + jitter I)^-1 (U - U_prior(Z))


def matheron_sample(model: InducingModel, U, rng, L=None, resample_basis=False) -> PathSample:
    """f(x)|U = f_prior(x) + K(x,Z) K^-1 (U - f_prior(Z)) with fresh Fourier weights.

    ``resample_basis`` additionally redraws frequencies and phases, which makes the
    prior draw exact in its second moments (used by the moment-matching checks).
    """
    U = jnp.asarray(U, dtype=jnp.float64)
    _check_U(U, model)
    key = as_key(rng)
    k_w, k_b = jax.random.split(key)
    weights = jax.random.normal(k_w, (model.n_basis, model.dim), dtype=jnp.float64)
    if resample_basis:
        freqs, phases = draw_basis_skeleton(k_b, model.n_basis, model.dim)
    else:
        freqs, phases = model.basis_frequencies, model.basis_phases
    return path_from_weights(model, U, weights, freqs, phases, L=L)


def path_from_weights(model, U, weights, freqs=None, phases=None, L=None) -> PathSample:
    if freqs is None:
        freqs, phases = model.basis_frequencies, model.basis_phases
    if L is None:
        L = gram_cholesky(model)
    basis = basis_from_draws(model.kernel, freqs, phases, weights)
    U_prior = rff_prior_eval(basis, model.Z)
    cached = cho_solve((L, True), U - U_prior)
    return PathSample(U, weights, basis, cached)


def path_eval(sample: PathSample, model: InducingModel, x):
    """Evaluate the conditioned draw at x (d,) or (..., d)."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape[-1] != model.dim:
        raise ContractViolation(f"state dimension {x.shape[-1]} != model dimension {model.dim}")
    single = x.ndim == 1
    X = x[None] if single else x
    out = rff_prior_eval(sample.basis, X) + cross_gram(X, model.Z, model.kernel) @ sample.cached_solve
    return out[0] if single else out
