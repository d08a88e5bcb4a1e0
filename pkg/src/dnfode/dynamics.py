"""Flow-warped vector field, fixed-step RK4 and multiple shooting."""

from __future__ import annotations

import dataclasses
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ContractViolation, DivergenceError
from .flows import FlowStack, stack_forward
from .sparse_gp import InducingModel, PathSample, path_eval

DIVERGENCE_NORM = 1e6


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray
    substeps_per_interval: int = 5

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if t.size < 1:
            raise ContractViolation("time grid is empty")
        if not np.all(np.isfinite(t)):
            raise ContractViolation("time grid contains non-finite values")
        if np.any(np.diff(t) <= 0):
            raise ContractViolation("time grid must be strictly increasing")
        if int(self.substeps_per_interval) < 1:
            raise ContractViolation("substeps_per_interval must be >= 1")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "substeps_per_interval", int(self.substeps_per_interval))

    def __len__(self):
        return self.times.size

    def with_substeps(self, substeps):
        return TimeGrid(self.times, substeps)


@dataclasses.dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != len(self.grid):
            raise ContractViolation("trajectory rows must match the grid length")
        object.__setattr__(self, "states", s)


def vector_field_eval(sample: PathSample, model: InducingModel, prior_flow: FlowStack, x):
    """dx/dt = G(f(x)): the Matheron path value pushed through the prior flow.

    ``prior_flow`` is applied as given; pass ``stack.constrained()`` for raw parameters.
    """
    f = path_eval(sample, model, x)
    if prior_flow.depth == 0:
        return f
    return stack_forward(prior_flow, f)[0]


def rk4_solve(field: Callable, x0, times, substeps: int):
    """Traceable classical RK4; every interval is split into ``substeps`` equal steps.

    Returns the states at every grid time, shape (N, d), with row 0 equal to x0.
    """
    times = jnp.asarray(times, dtype=jnp.float64)
    dts = jnp.diff(times) / substeps

    def interval(x, dt):
        def step(x, _):
            k1 = field(x)
            k2 = field(x + 0.5 * dt * k1)
            k3 = field(x + 0.5 * dt * k2)
            k4 = field(x + dt * k3)
            return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), None

        x, _ = jax.lax.scan(step, x, None, length=substeps)
        return x, x

    _, xs = jax.lax.scan(interval, x0, dts)
    return jnp.concatenate([x0[None], xs], axis=0)


def diverged_rows(states):
    """Boolean per row: non-finite or norm above the divergence guard."""
    states = np.asarray(states)
    norms = np.linalg.norm(states, axis=-1)
    return ~np.isfinite(norms) | (norms > DIVERGENCE_NORM)


def rk4_integrate(field: Callable, x0, grid: TimeGrid) -> Trajectory:
    x0 = jnp.asarray(x0, dtype=jnp.float64)
    if len(grid) == 1:
        return Trajectory(grid, np.asarray(x0)[None])
    states = np.asarray(rk4_solve(field, x0, grid.times, grid.substeps_per_interval))
    bad = diverged_rows(states)
    if bad.any():
        i = int(np.argmax(bad))
        raise DivergenceError(f"integration diverged at t={grid.times[i]:.6g}", time=float(grid.times[i]))
    return Trajectory(grid, states)


@dataclasses.dataclass(frozen=True)
class ShootingPlan:
    """Partition of a grid into S contiguous segments sharing their boundary times.

    ``boundaries`` holds S + 1 grid indices, first 0 and last N - 1.
    ``init_means`` / ``init_vars`` are the starting values of the per-segment
    Gaussian factors over segment initial states.
    """

    boundaries: tuple
    init_means: np.ndarray
    init_vars: np.ndarray
    continuity_variance: float = 1e-4

    @property
    def num_segments(self):
        return len(self.boundaries) - 1

    @property
    def segment_lengths(self):
        b = self.boundaries
        return tuple(b[j + 1] - b[j] for j in range(self.num_segments))


def partition_indices(n_points: int, S: int):
    """Near-equal split of n_points - 1 intervals into S segments, earlier ones larger."""
    n_int = n_points - 1
    if S < 1 or S > n_int:
        raise ContractViolation(f"number of segments must be in [1, {n_int}], got {S}")
    base, extra = divmod(n_int, S)
    sizes = [base + (1 if j < extra else 0) for j in range(S)]
    return tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)]))


def make_shooting_plan(grid: TimeGrid, S: int, observations=None, mask=None,
                       init_std: float = 0.1, continuity_std: float = 1e-2) -> ShootingPlan:
    boundaries = partition_indices(len(grid), S)
    starts = boundaries[:-1]
    if observations is None:
        raise ContractViolation("observations are needed to initialise segment states")
    obs = np.asarray(observations, dtype=np.float64)
    observed = np.all(np.asarray(mask, dtype=bool), axis=1) if mask is not None else np.all(np.isfinite(obs), axis=1)
    if not observed.any():
        raise ContractViolation("no fully observed rows to initialise segments from")
    idx = np.flatnonzero(observed)
    means = np.stack([obs[idx[np.argmin(np.abs(grid.times[idx] - grid.times[s]))]] for s in starts])
    return ShootingPlan(boundaries, means, np.full_like(means, init_std**2), continuity_std**2)


class ShootingLayout(NamedTuple):
    """Static gather tables for the vectorised shooting solve."""

    seg_times_index: np.ndarray  # (S, Lmax + 1) grid indices, padded with the segment end
    row_segment: np.ndarray  # (N,)
    row_local: np.ndarray  # (N,)
    end_local: np.ndarray  # (S,)


def shooting_layout(boundaries) -> ShootingLayout:
    b = np.asarray(boundaries, dtype=int)
    S = b.size - 1
    lengths = np.diff(b)
    Lmax = int(lengths.max())
    seg_idx = np.stack([np.minimum(b[j] + np.arange(Lmax + 1), b[j + 1]) for j in range(S)])
    N = int(b[-1]) + 1
    row_segment = np.empty(N, dtype=int)
    row_local = np.empty(N, dtype=int)
    for j in range(S):
        rows = np.arange(b[j], b[j + 1])
        row_segment[rows] = j
        row_local[rows] = rows - b[j]
    row_segment[N - 1] = S - 1
    row_local[N - 1] = lengths[-1]
    return ShootingLayout(seg_idx, row_segment, row_local, lengths)


def shooting_solve(field: Callable, inits, times, layout: ShootingLayout, substeps: int):
    """Integrate each segment from its own initial state.

    Segments shorter than the longest one are padded with zero-length steps,
    which RK4 leaves unchanged. Returns (states on the full grid, segment
    endpoints (S, d)).
    """
    seg_times = jnp.asarray(times, dtype=jnp.float64)[layout.seg_times_index]
    seg_states = jax.vmap(lambda x0, t: rk4_solve(field, x0, t, substeps))(inits, seg_times)
    states = seg_states[layout.row_segment, layout.row_local]
    ends = seg_states[np.arange(len(layout.end_local)), layout.end_local]
    return states, ends


def integrate_shooting(sample: PathSample, model: InducingModel, prior_flow: FlowStack,
                       plan: ShootingPlan, segment_inits, grid: TimeGrid):
    """Returns (list of per-segment trajectories, list of (end_j, init_{j+1}) pairs)."""
    inits = jnp.asarray(segment_inits, dtype=jnp.float64)
    if inits.shape[0] != plan.num_segments:
        raise ContractViolation("one initial state per segment is required")
    if plan.boundaries[-1] != len(grid) - 1:
        raise ContractViolation("shooting plan does not match the grid")

    def field(x):
        return vector_field_eval(sample, model, prior_flow, x)

    layout = shooting_layout(plan.boundaries)
    seg_times = grid.times[layout.seg_times_index]
    solve = jax.vmap(lambda x0, t: rk4_solve(field, x0, t, grid.substeps_per_interval))
    seg_states = np.asarray(solve(inits, jnp.asarray(seg_times)))
    pieces = []
    for j in range(plan.num_segments):
        a, b = plan.boundaries[j], plan.boundaries[j + 1]
        st = seg_states[j, : b - a + 1]
        bad = diverged_rows(st)
        if bad.any():
            i = a + int(np.argmax(bad))
            raise DivergenceError(
                f"segment {j} diverged at t={grid.times[i]:.6g}", time=float(grid.times[i]), segment=j
            )
        pieces.append(Trajectory(TimeGrid(grid.times[a : b + 1], grid.substeps_per_interval), st))
    pairs = [(pieces[j].states[-1], np.asarray(inits[j + 1])) for j in range(plan.num_segments - 1)]
    return pieces, pairs
