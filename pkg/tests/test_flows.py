import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from dnfode.errors import ContractViolation, DegenerateLayerError, InversionFailure
from dnfode.flows import (FlowStack, PlanarLayer, planar_constrain, planar_forward, stack_forward,
                          stack_inverse)
from oracles import numerical_jacobian, planar_apply


def random_stack(gen, K, d, scale=1.0):
    layers = [PlanarLayer(jnp.asarray(gen.normal(size=d) * scale), jnp.asarray(gen.normal(size=d) * scale),
                          jnp.asarray(gen.normal())) for _ in range(K)]
    return FlowStack.from_layers(layers, d).constrained()


def test_constrain_hand_values():
    l = planar_constrain(PlanarLayer(jnp.array([0.0, 1.0]), jnp.array([1.0, 0.0]), 0.0))
    assert float(l.w @ l.u) == pytest.approx(-1 + math.log(2), abs=1e-12)
    l = planar_constrain(PlanarLayer(jnp.array([-5.0]), jnp.array([1.0]), 0.0))
    # -1 + log(1 + e^-5)
    assert float(l.w @ l.u) == pytest.approx(-0.99328465151, abs=1e-10)
    assert float(l.w @ l.u) > -1
    u = jnp.array([40.0, 3.0])
    l = planar_constrain(PlanarLayer(u, jnp.array([1.0, 0.0]), 0.0))
    # m(a) -> a - 1 for large a, so u_hat -> u - w / |w|^2
    np.testing.assert_allclose(np.asarray(l.u), [39.0, 3.0], atol=1e-12)


def test_constrain_rejects_zero_w():
    with pytest.raises(DegenerateLayerError):
        planar_constrain(PlanarLayer(jnp.ones(2), jnp.zeros(2), 0.0))


def test_zero_u_is_identity():
    x = jnp.array([0.3, -1.2, 4.0])
    y, ld = planar_forward(PlanarLayer(jnp.zeros(3), jnp.array([1.0, 2.0, 3.0]), 0.5), x)
    np.testing.assert_array_equal(np.asarray(y), np.asarray(x))
    assert float(ld) == 0.0


def test_forward_hand_case():
    l = planar_constrain(PlanarLayer(jnp.array([1.0]), jnp.array([1.0]), 0.0))
    assert float(l.u[0]) == pytest.approx(0.31326169, abs=1e-8)
    y, ld = planar_forward(l, jnp.array([0.0]))
    assert float(y[0]) == 0.0
    # log(1 + u_hat) = log(log(1 + e))
    assert float(ld) == pytest.approx(0.27251388050, abs=1e-10)


def test_forward_matches_oracle_and_numerical_jacobian(rng):
    st = random_stack(rng, 1, 2)
    l = st.layers[0]
    x = rng.normal(size=2)
    y, ld = planar_forward(l, jnp.asarray(x))
    u, w, b = np.asarray(l.u), np.asarray(l.w), float(l.b)
    np.testing.assert_allclose(np.asarray(y), planar_apply(u, w, b, x), atol=1e-14)
    J = numerical_jacobian(lambda v: planar_apply(u, w, b, v), x)
    assert abs(float(ld) - math.log(abs(np.linalg.det(J)))) < 1e-6


def test_empty_and_zero_stacks():
    x = jnp.array([1.0, -2.0])
    for st in (FlowStack.identity(2), FlowStack.from_layers([PlanarLayer(jnp.zeros(2), jnp.ones(2), 0.0)] * 2)):
        y, ld = stack_forward(st, x)
        np.testing.assert_array_equal(np.asarray(y), np.asarray(x))
        assert float(ld) == 0.0
    np.testing.assert_array_equal(stack_inverse(FlowStack.identity(2), np.asarray(x)), np.asarray(x))


def test_identity_init_is_near_identity():
    st = FlowStack.init(0, 3, 4).constrained()
    x = jnp.array([0.5, -1.0, 2.0, 0.1])
    y, ld = stack_forward(st, x)
    np.testing.assert_allclose(np.asarray(y), np.asarray(x), atol=1e-12)
    assert abs(float(ld)) < 1e-12
    assert np.all(np.asarray(st.b) == 0)


def test_stack_is_sequential_composition_and_additive(rng):
    st = random_stack(rng, 3, 2)
    x = jnp.asarray(rng.normal(size=2))
    y, total = stack_forward(st, x)
    z, parts = x, []
    for layer in st.layers:
        z, ld = planar_forward(layer, z)
        parts.append(float(ld))
    np.testing.assert_allclose(np.asarray(y), np.asarray(z), atol=0)
    assert float(total) == pytest.approx(sum(parts), abs=1e-13)
    J = numerical_jacobian(lambda v: np.asarray(stack_forward(st, jnp.asarray(v))[0]), np.asarray(x))
    assert abs(float(total) - math.log(abs(np.linalg.det(J)))) < 1e-5


def test_batched_input_matches_rows(rng):
    st = random_stack(rng, 2, 3)
    X = rng.normal(size=(7, 3))
    Y, LD = stack_forward(st, jnp.asarray(X))
    for i in range(7):
        y, ld = stack_forward(st, jnp.asarray(X[i]))
        np.testing.assert_allclose(np.asarray(Y[i]), np.asarray(y), atol=1e-14)
        assert float(LD[i]) == pytest.approx(float(ld), abs=1e-14)


def test_population_logdet_and_round_trip():
    """200 random constrained stacks with d <= 5, K <= 3."""
    gen = np.random.default_rng(2024)
    worst_ld, worst_rt = 0.0, 0.0
    for _ in range(200):
        d, K = int(gen.integers(1, 6)), int(gen.integers(1, 4))
        st = random_stack(gen, K, d)
        x = gen.normal(size=d)
        y, ld = stack_forward(st, jnp.asarray(x))
        J = numerical_jacobian(lambda v: np.asarray(stack_forward(st, jnp.asarray(v))[0]), x)
        worst_ld = max(worst_ld, abs(float(ld) - math.log(abs(np.linalg.det(J)))))
        worst_rt = max(worst_rt, float(np.max(np.abs(stack_inverse(st, np.asarray(y)) - x))))
    assert worst_ld <= 1e-6
    assert worst_rt <= 1e-8


def test_inverse_requires_constrained_layer():
    bad = FlowStack.from_layers([PlanarLayer(jnp.array([-3.0]), jnp.array([1.0]), 0.0)])
    with pytest.raises(ContractViolation):
        stack_inverse(bad, np.array([0.2]))


def test_inverse_reports_non_convergence(rng):
    st = random_stack(rng, 2, 2, scale=3.0)
    with pytest.raises(InversionFailure):
        stack_inverse(st, np.array([0.3, 0.1]), tol=1e-10, max_iter=3)


def test_forward_gradients_match_finite_differences(rng):
    l = random_stack(rng, 1, 3).layers[0]
    x = jnp.asarray(rng.normal(size=3))

    def scalar(u, w, b, x):
        y, ld = planar_forward(PlanarLayer(u, w, b), x)
        return jnp.sum(jnp.sin(y)) + 0.7 * ld

    args = (l.u, l.w, jnp.asarray(l.b), x)
    grads = jax.grad(scalar, argnums=(0, 1, 2, 3))(*args)
    h = 1e-6
    for i, (a, g) in enumerate(zip(args, grads)):
        flat = np.atleast_1d(np.asarray(a, dtype=float))
        fd = np.empty_like(flat)
        for j in range(flat.size):
            e = np.zeros_like(flat)
            e[j] = h
            up = [*args]
            dn = [*args]
            up[i] = jnp.asarray((flat + e).reshape(np.shape(a)))
            dn[i] = jnp.asarray((flat - e).reshape(np.shape(a)))
            fd[j] = (float(scalar(*up)) - float(scalar(*dn))) / (2 * h)
        g = np.atleast_1d(np.asarray(g))
        assert np.max(np.abs(g - fd) / np.maximum(1e-3, np.abs(fd))) < 1e-5


def test_dimension_mismatch():
    with pytest.raises(ContractViolation):
        stack_forward(FlowStack.identity(2), jnp.zeros(3))
    with pytest.raises(ContractViolation):
        FlowStack.from_layers([PlanarLayer(jnp.zeros(2), jnp.ones(2), 0.0), PlanarLayer(jnp.zeros(3), jnp.ones(3), 0.0)])
