"""Double-flow variational posterior, Monte-Carlo ELBO, gradients, training and prediction."""

from __future__ import annotations

import dataclasses
import functools
import logging
import time
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
import optax
from jax.flatten_util import ravel_pytree
from jax.scipy.linalg import solve_triangular

from .data import ObservationSet, PcaMap, pca_project
from .dynamics import (
    DIVERGENCE_NORM,
    ShootingPlan,
    TimeGrid,
    Trajectory,
    make_shooting_plan,
    rk4_solve,
    shooting_layout,
    shooting_solve,
)
from .errors import ContractViolation, DivergenceError, TrainingFailure
from .flows import FlowStack, stack_forward
from .kernels import (
    DEFAULT_RELATIVE_JITTER,
    SEKernelParams,
    as_key,
    cross_gram,
    draw_basis_skeleton,
    gram,
)
from .sparse_gp import (
    LOG_2PI,
    InducingModel,
    gram_cholesky,
    init_inducing_locations,
    path_eval,
    path_from_weights,
    prior_u_logpdf,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "total", "recon", "kl_u", "kl_x0", "kl_shooting", "grad_norm", "wall_time")


# ---------------------------------------------------------------------------
# parameter containers


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class PosteriorU:
    """q(U): V ~ N(0, I) -> loc + exp(log_scale) * V -> planar flow -> unflatten.

    The diagonal affine step is the mean-field Gaussian; with zero planar
    layers q(U) is exactly that Gaussian.
    """

    loc: jax.Array  # (M*d,)
    log_scale: jax.Array  # (M*d,)
    flow: FlowStack  # over M*d


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class VariationalState:
    posterior_u: PosteriorU
    x0_mean: jax.Array  # (d,)
    x0_log_var: jax.Array  # (d,)
    shoot_means: jax.Array  # (S-1, d) factors for segments 2..S
    shoot_log_vars: jax.Array  # (S-1, d)

    @property
    def x0_var(self):
        return jnp.exp(self.x0_log_var)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class ModelParameters:
    """Every trainable quantity; ``flatten``/``unflatten`` give the optimizer layout."""

    kernel: SEKernelParams
    log_noise: jax.Array  # (d_obs,)
    Z: jax.Array  # (M, d)
    prior_flow: FlowStack
    variational: VariationalState

    def flatten(self):
        return ravel_pytree(self)[0]

    def unflatten(self, flat):
        return ravel_pytree(self)[1](jnp.asarray(flat, dtype=jnp.float64))

    @property
    def noise_R(self):
        return jnp.exp(self.log_noise)


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Hashable shape and integration settings; fixed for the lifetime of a model."""

    state_dim: int
    obs_dim: int
    num_inducing: int = 16
    prior_depth: int = 0
    posterior_depth: int = 0
    n_basis: int = 256
    substeps: int = 5
    jitter: float = DEFAULT_RELATIVE_JITTER
    shooting_boundaries: tuple | None = None
    continuity_variance: float = 1e-4
    has_emission: bool = False
    whiten: bool = True
    skip_flows: bool = False
    max_interval: float = float("inf")

    @property
    def num_segments(self):
        return 1 if self.shooting_boundaries is None else len(self.shooting_boundaries) - 1

    def to_dict(self):
        d = dataclasses.asdict(self)
        if self.shooting_boundaries is not None:
            d["shooting_boundaries"] = list(self.shooting_boundaries)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("shooting_boundaries") is not None:
            d["shooting_boundaries"] = tuple(int(v) for v in d["shooting_boundaries"])
        return cls(**d)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class FixedArrays:
    """Non-trainable arrays: the Fourier skeleton, the linear emission and the time origin."""

    basis_frequencies: jax.Array
    basis_phases: jax.Array
    emission_mean: jax.Array  # (d_obs,)
    emission_components: jax.Array  # (d, d_obs)
    t0: jax.Array


@dataclasses.dataclass(frozen=True)
class GPODE:
    spec: ModelSpec
    params: ModelParameters
    fixed: FixedArrays

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def inducing_model(self, params=None):
        return _inducing(self.params if params is None else params, self.fixed)

    @property
    def pca(self):
        if not self.spec.has_emission:
            return None
        return PcaMap(np.asarray(self.fixed.emission_mean), np.asarray(self.fixed.emission_components))


def _inducing(params: ModelParameters, fixed: FixedArrays) -> InducingModel:
    return InducingModel(
        params.Z, params.kernel, fixed.basis_frequencies, fixed.basis_phases, params.noise_R
    )


def template_parameters(spec: ModelSpec) -> ModelParameters:
    """Zero-filled parameters with the shapes implied by ``spec``."""
    d, M = spec.state_dim, spec.num_inducing
    Md = M * d
    z = lambda *s: jnp.zeros(s, dtype=jnp.float64)  # noqa: E731
    S1 = spec.num_segments - 1
    return ModelParameters(
        kernel=SEKernelParams(z(d), z(), spec.jitter),
        log_noise=z(spec.obs_dim),
        Z=z(M, d),
        prior_flow=FlowStack(z(spec.prior_depth, d), z(spec.prior_depth, d), z(spec.prior_depth)),
        variational=VariationalState(
            PosteriorU(z(Md), z(Md), FlowStack(z(spec.posterior_depth, Md), z(spec.posterior_depth, Md),
                                               z(spec.posterior_depth))),
            z(d), z(d), z(S1, d), z(S1, d),
        ),
    )


def init_model(data: ObservationSet, rng, num_inducing=16, prior_depth=0, posterior_depth=0,
               n_basis=256, substeps=5, pca: PcaMap | None = None, shooting_segments=None,
               continuity_std=1e-2, noise_init_fraction=0.1, x0_std_init=0.1,
               u_scale_init=0.1, whiten=True, velocity_init=True) -> GPODE:
    """Data-driven initialisation.

    Inducing locations are uniform in the bounding box of the (projected)
    observations, lengthscales start at the per-dimension state spread, the
    noise at ``noise_init_fraction`` of each observed variance and q(x(0)) at
    the first observed row. Both flows start at the identity. With
    ``velocity_init`` the mean of q(U) starts at a kernel smoother of
    finite-difference velocities evaluated at Z.
    """
    key = as_key(rng)
    k_z, k_basis, k_pf, k_qf = jax.random.split(key, 4)
    y = np.where(data.mask, data.observations, np.nan)
    if pca is not None:
        filled = np.where(data.mask, data.observations, pca.mean)
        latent = pca_project(pca, filled)
    else:
        latent = y
    d = latent.shape[1]
    d_obs = data.dim
    finite_rows = np.all(np.isfinite(latent), axis=1)
    if not finite_rows.any():
        raise ContractViolation("need at least one fully observed row to initialise")
    lat = latent[finite_rows]
    spread = np.std(lat, axis=0)
    spread = np.where(spread > 0, spread, 1.0)
    obs_var = np.nanvar(y, axis=0)
    obs_var = np.where(np.isfinite(obs_var) & (obs_var > 0), obs_var, 1.0)

    boundaries = None
    plan = None
    if shooting_segments is not None and shooting_segments > 1:
        lat_full = np.where(finite_rows[:, None], latent, np.nan)
        plan = make_shooting_plan(data.grid, shooting_segments, lat_full, mask=np.isfinite(lat_full),
                                  continuity_std=continuity_std)
        boundaries = tuple(plan.boundaries)

    spec = ModelSpec(
        state_dim=d, obs_dim=d_obs, num_inducing=num_inducing, prior_depth=prior_depth,
        posterior_depth=posterior_depth, n_basis=n_basis, substeps=substeps,
        jitter=DEFAULT_RELATIVE_JITTER, shooting_boundaries=boundaries,
        continuity_variance=continuity_std**2, has_emission=pca is not None, whiten=whiten,
        max_interval=float(np.max(np.diff(data.times))) if len(data) > 1 else float("inf"),
    )
    kernel = SEKernelParams.create(spread, 1.0, jitter=spec.jitter)
    Z = init_inducing_locations(lat, num_inducing, k_z)
    Md = num_inducing * d
    loc = jnp.zeros(Md)
    if velocity_init:
        U0 = _velocity_guess(data.times[finite_rows], lat, Z, kernel)
        if whiten:
            L = jnp.linalg.cholesky(gram(Z, Z, kernel, same=True))
            U0 = solve_triangular(L, U0, lower=True)
        loc = flatten_u(U0)
    x0 = lat[0]
    if plan is not None:
        sm = jnp.asarray(plan.init_means[1:])
        slv = jnp.log(jnp.asarray(plan.init_vars[1:]))
    else:
        sm = jnp.zeros((0, d))
        slv = jnp.zeros((0, d))
    params = ModelParameters(
        kernel=kernel,
        log_noise=jnp.log(jnp.asarray(noise_init_fraction * obs_var)),
        Z=Z,
        prior_flow=FlowStack.init(k_pf, prior_depth, d),
        variational=VariationalState(
            PosteriorU(loc, jnp.full(Md, np.log(u_scale_init)),
                       FlowStack.init(k_qf, posterior_depth, Md)),
            jnp.asarray(x0, dtype=jnp.float64),
            jnp.full(d, 2 * np.log(x0_std_init)),
            sm, slv,
        ),
    )
    freqs, phases = draw_basis_skeleton(k_basis, n_basis, d)
    if pca is not None:
        em_mean, em_comp = jnp.asarray(pca.mean), jnp.asarray(pca.components)
    else:
        em_mean, em_comp = jnp.zeros(d), jnp.eye(d)
    fixed = FixedArrays(freqs, phases, em_mean, em_comp, jnp.asarray(float(data.times[0])))
    return GPODE(spec, params, fixed)


def _velocity_guess(times, states, Z, kernel):
    """Kernel-ridge estimate of the vector field at Z from central differences."""
    t = np.asarray(times)
    x = np.asarray(states)
    if t.size < 3:
        return jnp.zeros(Z.shape)
    v = (x[2:] - x[:-2]) / (t[2:] - t[:-2])[:, None]
    X = jnp.asarray(x[1:-1])
    Kxx = gram(X, X, kernel, same=True)
    noise = np.var(v, axis=0).mean() * 0.5 + 1e-6
    alpha = jnp.linalg.solve(Kxx + noise * jnp.eye(X.shape[0]), jnp.asarray(v))
    return cross_gram(Z, X, kernel) @ alpha


# ---------------------------------------------------------------------------
# posterior over inducing outputs


def _std_normal_logpdf(v):
    return -0.5 * jnp.sum(v * v, axis=-1) - 0.5 * v.shape[-1] * LOG_2PI


def posterior_transform(post: PosteriorU, V, skip_flows=False):
    """Push base draws V (..., M*d) through q(U)'s map; returns (flat U, log|det|)."""
    scale = jnp.exp(post.log_scale)
    W = post.loc + scale * V
    logdet = jnp.sum(post.log_scale)
    if skip_flows:
        return W, jnp.broadcast_to(logdet, V.shape[:-1])
    W, ld = stack_forward(post.flow.constrained(), W)
    return W, logdet + ld


def unflatten_u(flat, M, d):
    """Column-major vectorisation: entries j*M .. (j+1)*M - 1 are output dimension j."""
    return jnp.swapaxes(flat.reshape(flat.shape[:-1] + (d, M)), -1, -2)


def flatten_u(U):
    return jnp.swapaxes(U, -1, -2).reshape(U.shape[:-2] + (-1,))


def sample_posterior_u(vs: VariationalState, rng, M: int, d: int, skip_flows=False, L=None):
    """Draw U = phi(V), V ~ N(0, I); log q(U) = log pi(V) - log|det dphi/dV|.

    With a Cholesky factor ``L`` of K(Z, Z) the map ends with the linear layer
    U[:, j] = L W[:, j] (whitened parameterisation); its log-determinant
    d * sum(log diag L) is part of log|det dphi/dV|.
    """
    Md = M * d
    V = jax.random.normal(as_key(rng), (Md,), dtype=jnp.float64)
    flat, logdet = posterior_transform(vs.posterior_u, V, skip_flows)
    U = unflatten_u(flat, M, d)
    if L is not None:
        U = L @ U
        logdet = logdet + d * jnp.sum(jnp.log(jnp.diag(L)))
    return U, _std_normal_logpdf(V) - logdet


def kl_u_mc(vs: VariationalState, model: InducingModel, n_samples: int, rng=0, whiten=False):
    """Monte-Carlo KL(q(U) || p(U)) with its standard error.

    Per draw: log pi(V) - log|det dphi/dV| - log p(phi(V)); no constants dropped.
    """
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    M, d = model.num_inducing, model.dim
    L = gram_cholesky(model)
    keys = jax.random.split(as_key(rng), n_samples)

    def one(k):
        U, log_q = sample_posterior_u(vs, k, M, d, L=L if whiten else None)
        return log_q - prior_u_logpdf(U, model, L)

    vals = np.asarray(jax.jit(jax.vmap(one))(keys))
    se = float(vals.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("nan")
    return float(vals.mean()), se


def kl_x0(vs: VariationalState):
    """KL(N(mu, diag s2) || N(0, I)) = sum 0.5 (s2 + mu^2 - 1 - log s2)."""
    return 0.5 * jnp.sum(vs.x0_var + vs.x0_mean**2 - 1.0 - vs.x0_log_var)


def neg_entropy_shooting(vs: VariationalState):
    """E_q[log q] of the segment-state factors (segments 2..S)."""
    return -0.5 * jnp.sum(1.0 + LOG_2PI + vs.shoot_log_vars)


# ---------------------------------------------------------------------------
# likelihood


def gaussian_loglik(y, mask, pred, noise_R):
    """Sum over observed entries of log N(y; pred, R_j); masked entries contribute 0."""
    y = jnp.where(mask, y, 0.0)
    pred = jnp.where(mask, pred, 0.0)
    r = y - pred
    ll = -0.5 * (LOG_2PI + jnp.log(noise_R) + r * r / noise_R)
    return jnp.sum(jnp.where(mask, ll, 0.0), axis=(-2, -1))


def reconstruction_term(pred, obs: ObservationSet, noise_R):
    """MC average over the ensemble of the summed diagonal-Gaussian log-likelihood.

    ``pred`` is a list of Trajectories in observation space or an array (S, N, d_obs).
    """
    if isinstance(pred, Trajectory):
        pred = [pred]
    if isinstance(pred, (list, tuple)):
        for p in pred:
            if p.grid.times.shape != obs.times.shape or not np.allclose(p.grid.times, obs.times,
                                                                          rtol=0, atol=1e-12):
                raise ContractViolation("prediction times do not align with observation times")
        arr = np.stack([p.states for p in pred])
    else:
        arr = np.asarray(pred, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.shape[1:] != obs.observations.shape:
        raise ContractViolation(f"prediction shape {arr.shape[1:]} != observations {obs.observations.shape}")
    R = jnp.asarray(noise_R, dtype=jnp.float64)
    ll = gaussian_loglik(jnp.asarray(np.nan_to_num(obs.observations)), jnp.asarray(obs.mask),
                         jnp.asarray(arr), R)
    return float(jnp.mean(ll))


# ---------------------------------------------------------------------------
# ELBO


class DataArrays(NamedTuple):
    times: jax.Array
    y: jax.Array
    mask: jax.Array


def data_arrays(data: ObservationSet) -> DataArrays:
    return DataArrays(
        jnp.asarray(data.times),
        jnp.asarray(np.where(data.mask, data.observations, 0.0)),
        jnp.asarray(data.mask),
    )


@dataclasses.dataclass(frozen=True)
class ElboEstimate:
    total: float
    recon: float
    kl_u: float
    kl_x0: float
    kl_shooting: float
    n_mc_samples: int


def _emit(states, fixed: FixedArrays, spec: ModelSpec):
    if not spec.has_emission:
        return states
    return states @ fixed.emission_components + fixed.emission_mean


def _max_norm(states):
    n = jnp.sqrt(jnp.sum(states * states, axis=-1))
    return jnp.max(jnp.where(jnp.isfinite(n), n, jnp.inf))


def _field_for(params, fixed, spec, U, weights, L):
    model = _inducing(params, fixed)
    path = path_from_weights(model, U, weights, L=L)
    prior = params.prior_flow.constrained()

    def field(x):
        f = path_eval(path, model, x)
        if spec.skip_flows or prior.depth == 0:
            return f
        return stack_forward(prior, f)[0]

    return field


def _one_sample(params: ModelParameters, fixed: FixedArrays, spec: ModelSpec, data: DataArrays, key):
    M, d = spec.num_inducing, spec.state_dim
    k_x0, k_v, k_w, k_s = jax.random.split(key, 4)
    vs = params.variational
    model = _inducing(params, fixed)
    L = gram_cholesky(model)

    x0 = vs.x0_mean + jnp.exp(0.5 * vs.x0_log_var) * jax.random.normal(k_x0, (d,), dtype=jnp.float64)
    U, log_q = sample_posterior_u(vs, k_v, M, d, spec.skip_flows, L if spec.whiten else None)
    kl_u = log_q - prior_u_logpdf(U, model, L)
    weights = jax.random.normal(k_w, (spec.n_basis, d), dtype=jnp.float64)
    field = _field_for(params, fixed, spec, U, weights, L)

    if spec.shooting_boundaries is None:
        states = rk4_solve(field, x0, data.times, spec.substeps)
        continuity = 0.0
        guard = _max_norm(states)
    else:
        layout = shooting_layout(spec.shooting_boundaries)
        eps = jax.random.normal(k_s, vs.shoot_means.shape, dtype=jnp.float64)
        s = vs.shoot_means + jnp.exp(0.5 * vs.shoot_log_vars) * eps
        inits = jnp.concatenate([x0[None], s], axis=0)
        states, ends = shooting_solve(field, inits, data.times, layout, spec.substeps)
        r = s - ends[:-1]
        cv = spec.continuity_variance
        continuity = jnp.sum(-0.5 * (LOG_2PI + jnp.log(cv) + r * r / cv))
        guard = jnp.maximum(_max_norm(states), _max_norm(ends))

    pred = _emit(states, fixed, spec)
    recon = gaussian_loglik(data.y, data.mask, pred, params.noise_R) + continuity
    return recon, kl_u, guard


def _elbo_terms(params, fixed, spec, data, key, n_mc):
    keys = jax.random.split(key, n_mc)
    recon, kl_u, guard = jax.vmap(lambda k: _one_sample(params, fixed, spec, data, k))(keys)
    vs = params.variational
    terms = dict(
        recon=jnp.mean(recon),
        kl_u=jnp.mean(kl_u),
        kl_x0=kl_x0(vs),
        kl_shooting=neg_entropy_shooting(vs) if spec.shooting_boundaries is not None else jnp.zeros(()),
    )
    terms["total"] = terms["recon"] - terms["kl_u"] - terms["kl_x0"] - terms["kl_shooting"]
    return terms, guard


@functools.partial(jax.jit, static_argnames=("spec", "n_mc"))
def _elbo_jit(params, fixed, spec, data, key, n_mc):
    return _elbo_terms(params, fixed, spec, data, key, n_mc)


@functools.partial(jax.jit, static_argnames=("spec", "n_mc"))
def _elbo_grad_jit(params, fixed, spec, data, key, n_mc):
    def objective(p):
        terms, guard = _elbo_terms(p, fixed, spec, data, key, n_mc)
        return terms["total"], (terms, guard)

    (_, (terms, guard)), grads = jax.value_and_grad(objective, has_aux=True)(params)
    return terms, guard, grads


def _estimate(terms, n_mc):
    t = {k: float(v) for k, v in terms.items()}
    return ElboEstimate(t["total"], t["recon"], t["kl_u"], t["kl_x0"], t["kl_shooting"], n_mc)


def _check_divergence(guard, what):
    g = np.asarray(guard)
    bad = ~np.isfinite(g) | (g > DIVERGENCE_NORM)
    if bad.any():
        i = int(np.argmax(bad))
        raise DivergenceError(f"{what}: Monte-Carlo sample {i} diverged", sample=i)


def _check_n_mc(n_mc):
    if int(n_mc) < 1:
        raise ContractViolation("n_mc must be >= 1")
    return int(n_mc)


def elbo(model: GPODE, data: ObservationSet, n_mc: int, rng) -> ElboEstimate:
    """Monte-Carlo ELBO with its component breakdown; deterministic given the seed."""
    n_mc = _check_n_mc(n_mc)
    terms, guard = _elbo_jit(model.params, model.fixed, model.spec, data_arrays(data), as_key(rng), n_mc)
    _check_divergence(guard, "elbo")
    return _estimate(terms, n_mc)


def grad_elbo(model: GPODE, data: ObservationSet, n_mc: int, rng):
    """Exact gradient of the realised MC estimate, flattened like ``params.flatten()``."""
    n_mc = _check_n_mc(n_mc)
    _, guard, grads = _elbo_grad_jit(model.params, model.fixed, model.spec, data_arrays(data),
                                     as_key(rng), n_mc)
    _check_divergence(guard, "grad_elbo")
    return np.asarray(ravel_pytree(grads)[0])


def elbo_flat(model: GPODE, data: ObservationSet, n_mc: int, rng):
    """ELBO total as a function of the flat parameter vector (finite-difference helper)."""
    n_mc = _check_n_mc(n_mc)
    unravel = ravel_pytree(model.params)[1]
    arrays = data_arrays(data)
    key = as_key(rng)

    def f(flat):
        terms, _ = _elbo_jit(unravel(jnp.asarray(flat)), model.fixed, model.spec, arrays, key, n_mc)
        return float(terms["total"])

    return f


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    step_size: float = 1e-2
    decay_points: tuple = (0.6, 0.85)
    decay_factor: float = 0.3
    n_mc: int = 5
    seed: int = 0
    clip_norm: float = 10.0
    max_resamples: int = 2
    max_divergent_steps: int = 3
    record_wall_time: bool = False
    log_every: int = 0


@dataclasses.dataclass(frozen=True)
class HistoryRow:
    step: int
    total: float
    recon: float
    kl_u: float
    kl_x0: float
    kl_shooting: float
    grad_norm: float
    wall_time: float | None = None


def _optimizer(cfg: TrainConfig):
    boundaries = {int(round(p * cfg.steps)): cfg.decay_factor for p in cfg.decay_points}
    schedule = optax.piecewise_constant_schedule(cfg.step_size, boundaries)
    return optax.chain(optax.clip_by_global_norm(cfg.clip_norm), optax.adam(schedule))


def train(model: GPODE, data: ObservationSet, config: TrainConfig | None = None):
    """Stochastic ascent on the ELBO; returns (model, list of HistoryRow).

    A step whose Monte-Carlo batch diverges is redrawn up to
    ``max_resamples`` times; if it still diverges the update is skipped and
    ``max_divergent_steps`` consecutive skips abort training.
    """
    cfg = config or TrainConfig()
    if cfg.steps < 0 or cfg.n_mc < 1 or cfg.step_size <= 0 or cfg.clip_norm <= 0:
        raise ContractViolation(f"invalid training configuration {cfg}")
    if cfg.steps == 0:
        return model, []
    opt = _optimizer(cfg)
    params = model.params
    state = opt.init(params)
    arrays = data_arrays(data)
    base = jax.random.PRNGKey(cfg.seed)
    history = []
    divergent = 0
    t_start = time.perf_counter()

    @jax.jit
    def apply(params, state, grads):
        neg = jax.tree_util.tree_map(lambda g: -g, grads)
        updates, state = opt.update(neg, state, params)
        return optax.apply_updates(params, updates), state, optax.tree.norm(grads)

    for step in range(cfg.steps):
        step_key = jax.random.fold_in(base, step)
        for attempt in range(cfg.max_resamples + 1):
            key = jax.random.fold_in(step_key, attempt)
            terms, guard, grads = _elbo_grad_jit(params, model.fixed, model.spec, arrays, key, cfg.n_mc)
            g = np.asarray(guard)
            flat_ok = bool(np.all(np.isfinite(ravel_pytree(grads)[0])))
            if np.all(np.isfinite(g) & (g <= DIVERGENCE_NORM)) and flat_ok and np.isfinite(float(terms["total"])):
                break
        else:
            divergent += 1
            log.warning("step %d: all Monte-Carlo resamples diverged", step)
            if divergent >= cfg.max_divergent_steps:
                raise TrainingFailure(
                    f"{divergent} consecutive divergent steps at step {step}",
                    diagnostics={"step": step, "last_guard": np.asarray(guard).tolist(),
                                 "last_total": float(terms["total"])},
                )
            continue
        divergent = 0
        params, state, gnorm = apply(params, state, grads)
        est = _estimate(terms, cfg.n_mc)
        wall = time.perf_counter() - t_start if cfg.record_wall_time else None
        history.append(HistoryRow(step, est.total, est.recon, est.kl_u, est.kl_x0, est.kl_shooting,
                                  float(gnorm), wall))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d elbo %.4f recon %.4f kl_u %.4f", step, est.total, est.recon, est.kl_u)
    return model.replace(params=params), history


def history_csv(history) -> str:
    """Fixed-format CSV text; wall_time is blank unless it was recorded."""
    lines = [",".join(HISTORY_COLUMNS)]
    for h in history:
        vals = [str(h.step)] + [format(v, ".17g") for v in (h.total, h.recon, h.kl_u, h.kl_x0,
                                                          h.kl_shooting, h.grad_norm)]
        vals.append("" if h.wall_time is None else format(h.wall_time, ".6f"))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# prediction


@dataclasses.dataclass
class Prediction:
    grid: TimeGrid
    samples: np.ndarray  # (S_valid, N, d_obs) in observation space
    latent: np.ndarray  # (S_valid, N, d)
    n_divergent: int

    @property
    def trajectories(self):
        return [Trajectory(self.grid, s) for s in self.samples]

    @property
    def mean(self):
        return self.samples.mean(axis=0)


@functools.partial(jax.jit, static_argnames=("spec", "n_mc", "substeps"))
def _predict_jit(params, fixed, spec, times, key, n_mc, substeps):
    M, d = spec.num_inducing, spec.state_dim

    def one(k):
        k_x0, k_v, k_w = jax.random.split(k, 3)
        vs = params.variational
        model = _inducing(params, fixed)
        L = gram_cholesky(model)
        x0 = vs.x0_mean + jnp.exp(0.5 * vs.x0_log_var) * jax.random.normal(k_x0, (d,), dtype=jnp.float64)
        U, _ = sample_posterior_u(vs, k_v, M, d, spec.skip_flows, L if spec.whiten else None)
        weights = jax.random.normal(k_w, (spec.n_basis, d), dtype=jnp.float64)
        field = _field_for(params, fixed, spec, U, weights, L)
        states = rk4_solve(field, x0, times, substeps)
        return states

    latent = jax.vmap(one)(jax.random.split(key, n_mc))
    return latent, _emit(latent, fixed, spec)


def _refined_times(times, t0, max_interval):
    """Integration grid from t0 through ``times``; returns (grid, indices of the requested times).

    Intervals longer than ``max_interval`` are split evenly so prediction uses
    steps no coarser than training did.
    """
    pts = np.concatenate([[t0], times]) if times[0] > t0 + 1e-12 else np.asarray(times)
    out = [pts[0]]
    keep = [0]
    for a, b in zip(pts[:-1], pts[1:]):
        n = 1 if not np.isfinite(max_interval) else max(1, int(np.ceil((b - a) / max_interval - 1e-9)))
        out.extend(a + (b - a) * np.arange(1, n + 1) / n)
        out[-1] = b
        keep.append(len(out) - 1)
    keep = np.asarray(keep)
    if pts.size > times.size:
        keep = keep[1:]
    return np.asarray(out), keep


def predict(model: GPODE, grid: TimeGrid, n_mc: int, rng, substeps=None) -> Prediction:
    """n_mc independent (x(0), U, path) draws integrated from the model's time origin.

    Grid times earlier than the origin are rejected. The integration grid starts
    at the origin and is refined wherever the requested spacing is coarser than
    the training spacing; only the requested times are returned. Divergent
    samples are dropped and counted.
    """
    n_mc = _check_n_mc(n_mc)
    t0 = float(model.fixed.t0)
    times = grid.times
    if times[0] < t0 - 1e-12:
        raise ContractViolation(f"prediction grid starts before the model origin t0={t0}")
    full, keep = _refined_times(times, t0, model.spec.max_interval)
    sub = int(substeps or model.spec.substeps)
    latent, obs = _predict_jit(model.params, model.fixed, model.spec, jnp.asarray(full),
                               as_key(rng), n_mc, sub)
    latent, obs = np.asarray(latent)[:, keep], np.asarray(obs)[:, keep]
    norms = np.linalg.norm(latent, axis=-1)
    ok = np.all(np.isfinite(norms) & (norms <= DIVERGENCE_NORM), axis=1)
    n_div = int((~ok).sum())
    if n_div:
        log.warning("predict: %d of %d samples diverged and were dropped", n_div, n_mc)
    return Prediction(grid, obs[ok], latent[ok], n_div)
