import math

import jax.numpy as jnp
import numpy as np
import pytest

from dnfode.data import vdp_field
from dnfode.dynamics import (TimeGrid, integrate_shooting, make_shooting_plan, partition_indices,
                             rk4_integrate, vector_field_eval)
from dnfode.errors import ContractViolation, DivergenceError
from dnfode.flows import FlowStack, PlanarLayer, stack_forward
from dnfode.kernels import SEKernelParams
from dnfode.sparse_gp import make_inducing_model, matheron_sample, path_eval
from oracles import rk4_reference


def vdp_numpy(x):
    return np.array([x[1], -x[0] + 0.5 * x[1] * (1 - x[0] ** 2)])


def decay(x):
    return -x


def test_grid_validation():
    with pytest.raises(ContractViolation):
        TimeGrid([0.0, 1.0, 1.0])
    with pytest.raises(ContractViolation):
        TimeGrid([0.0, np.nan])
    with pytest.raises(ContractViolation):
        TimeGrid([0.0, 1.0], substeps_per_interval=0)


def test_zero_field_is_constant():
    tr = rk4_integrate(lambda x: jnp.zeros_like(x), jnp.array([1.0, -2.0]), TimeGrid(np.linspace(0, 3, 7)))
    np.testing.assert_array_equal(tr.states, np.tile([1.0, -2.0], (7, 1)))


def test_exponential_decay_closed_form():
    tr = rk4_integrate(decay, jnp.array([1.0]), TimeGrid([0.0, 1.0], 100))
    assert tr.states[0, 0] == 1.0
    assert tr.states[-1, 0] == pytest.approx(math.exp(-1), abs=1e-9)


def endpoint(field, x0, T, n):
    return rk4_integrate(field, jnp.asarray(x0), TimeGrid([0.0, T], n)).states[-1]


def test_halving_step_reduces_error_16x():
    e1 = abs(endpoint(decay, [1.0], 1.0, 10)[0] - math.exp(-1))
    e2 = abs(endpoint(decay, [1.0], 1.0, 20)[0] - math.exp(-1))
    assert 16 * 0.8 <= e1 / e2 <= 16 * 1.2


def empirical_order(field, x0, T, exact, ns):
    errs = [np.max(np.abs(endpoint(field, x0, T, n) - exact)) for n in ns]
    return np.polyfit(np.log(1.0 / np.asarray(ns, float)), np.log(errs), 1)[0]


def test_rk4_order_decay_and_vdp():
    order = empirical_order(decay, [1.0], 2.0, np.array([math.exp(-2)]), [8, 16, 32, 64])
    assert abs(order - 4.0) <= 0.2
    ref = rk4_reference(vdp_numpy, [-1.5, 2.5], 0.0, 2.0, 20_000)
    order = empirical_order(vdp_field, [-1.5, 2.5], 2.0, ref, [16, 32, 64, 128])
    assert abs(order - 4.0) <= 0.2


def test_matches_independent_integrator():
    tr = rk4_integrate(vdp_field, jnp.array([-1.5, 2.5]), TimeGrid(np.linspace(0, 7, 8), 20))
    ref = rk4_reference(vdp_numpy, [-1.5, 2.5], 0.0, 7.0, 140)
    np.testing.assert_allclose(tr.states[-1], ref, atol=1e-10)


def test_refined_grid_then_subsample():
    coarse = rk4_integrate(vdp_field, jnp.array([1.0, 0.0]), TimeGrid(np.linspace(0, 4, 5), 40))
    fine = rk4_integrate(vdp_field, jnp.array([1.0, 0.0]), TimeGrid(np.linspace(0, 4, 41), 4))
    np.testing.assert_allclose(fine.states[::10], coarse.states, atol=1e-12)


def test_divergence_reports_time():
    with pytest.raises(DivergenceError) as info:
        rk4_integrate(lambda x: x**2, jnp.array([1.0]), TimeGrid(np.linspace(0, 2, 21), 5))
    assert info.value.time is not None and 0.9 <= info.value.time <= 1.2


def small_model(seed=0):
    gen = np.random.default_rng(seed)
    Z = gen.normal(size=(5, 2))
    m = make_inducing_model(Z, SEKernelParams.create([1.0, 1.0], 0.5), np.ones(2), 64, seed)
    U = jnp.asarray(0.3 * gen.normal(size=(5, 2)))
    return m, matheron_sample(m, U, seed)


def test_vector_field_identity_flow_is_path():
    m, s = small_model()
    x = jnp.array([0.2, -0.4])
    np.testing.assert_array_equal(np.asarray(vector_field_eval(s, m, FlowStack.identity(2), x)),
                                  np.asarray(path_eval(s, m, x)))


def test_vector_field_composition(rng):
    m, s = small_model()
    flow = FlowStack.from_layers([PlanarLayer(jnp.asarray(rng.normal(size=2)), jnp.asarray(rng.normal(size=2)),
                                              jnp.asarray(0.3))]).constrained()
    x = jnp.asarray(rng.normal(size=2))
    expected = stack_forward(flow, path_eval(s, m, x))[0]
    np.testing.assert_allclose(np.asarray(vector_field_eval(s, m, flow, x)), np.asarray(expected), atol=1e-15)


def test_partition_sizes():
    # 10 observation intervals (11 grid points) split as 4, 3, 3
    assert partition_indices(11, 3) == (0, 4, 7, 10)
    assert partition_indices(10, 3) == (0, 3, 6, 9)
    assert partition_indices(10, 1) == (0, 9)
    with pytest.raises(ContractViolation):
        partition_indices(10, 10)
    b = partition_indices(23, 5)
    assert b[0] == 0 and b[-1] == 22 and all(x < y for x, y in zip(b, b[1:]))


def test_shooting_plan_initial_states():
    grid = TimeGrid(np.linspace(0, 1, 11))
    obs = np.arange(22.0).reshape(11, 2)
    plan = make_shooting_plan(grid, 3, obs, np.ones_like(obs, bool))
    assert plan.segment_lengths == (4, 3, 3)
    np.testing.assert_array_equal(plan.init_means, obs[[0, 4, 7]])
    np.testing.assert_allclose(plan.init_vars, 0.01)
    assert plan.continuity_variance == pytest.approx(1e-4)


def test_single_segment_equals_rk4():
    m, s = small_model(1)
    grid = TimeGrid(np.linspace(0, 2, 9))
    x0 = jnp.array([0.1, 0.2])
    plan = make_shooting_plan(grid, 1, np.zeros((9, 2)))
    pieces, pairs = integrate_shooting(s, m, FlowStack.identity(2), plan, x0[None], grid)
    ref = rk4_integrate(lambda x: path_eval(s, m, x), x0, grid)
    assert pairs == []
    np.testing.assert_allclose(pieces[0].states, ref.states, atol=1e-13)


def test_exact_inits_close_continuity():
    m, s = small_model(2)
    grid = TimeGrid(np.linspace(0, 3, 13))
    x0 = jnp.array([0.3, -0.1])
    ref = rk4_integrate(lambda x: path_eval(s, m, x), x0, grid)
    plan = make_shooting_plan(grid, 4, ref.states)
    inits = ref.states[list(plan.boundaries[:-1])]
    pieces, pairs = integrate_shooting(s, m, FlowStack.identity(2), plan, inits, grid)
    assert len(pairs) == 3
    for end, start in pairs:
        np.testing.assert_allclose(end, start, atol=1e-12)
    np.testing.assert_allclose(np.concatenate([p.states[:-1] for p in pieces] + [pieces[-1].states[-1:]]),
                               ref.states, atol=1e-12)


def test_zero_field_pairs_identical():
    m, s = small_model(3)
    zero = type(s)(s.U_sample, s.prior_weights * 0, s.basis.__class__(s.basis.frequencies, s.basis.phases,
                                                                         s.basis.weights * 0, s.basis.amplitude),
                   s.cached_solve * 0)
    grid = TimeGrid(np.linspace(0, 1, 7))
    plan = make_shooting_plan(grid, 3, np.zeros((7, 2)))
    inits = np.tile([0.5, 0.5], (3, 1))
    _, pairs = integrate_shooting(zero, m, FlowStack.identity(2), plan, inits, grid)
    for end, start in pairs:
        np.testing.assert_array_equal(end, start)
