import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radiprior import autodiff as ad
from radiprior.autodiff import (Adam, AdamState, DomainError, GradientTape, Parameter, adam_step, constant,
                                finite_diff_gradient, stop_gradient)


def grad_of(fn, x0):
    p = Parameter("x", np.array(x0, dtype=np.float64))
    tape = GradientTape()
    out = fn(tape.watch(p))
    return tape.backward(out)["x"]


def test_square_gradient():
    assert grad_of(lambda x: x * x, 3.0) == pytest.approx(6.0)


def test_stop_gradient_factor_only_contributes_value():
    assert grad_of(lambda x: stop_gradient(x) * x, 2.0) == pytest.approx(2.0)


def test_stop_gradient_value_and_idempotence():
    p = Parameter("x", np.array(5.0))
    tape = GradientTape()
    x = tape.watch(p)
    s = stop_gradient(x)
    assert float(s) == 5.0 and s.is_constant
    assert float(stop_gradient(s)) == float(s)
    # result does not reach the tape: the parameter is unreachable and maps to zero
    out = s * 3.0
    assert out.is_constant


def test_stop_gradient_in_squared_difference():
    a, b = Parameter("a", np.array(1.5)), Parameter("b", np.array(0.25))
    tape = GradientTape()
    ta, tb = tape.watch(a), tape.watch(b)
    loss = (stop_gradient(ta) - tb) ** 2
    g = tape.backward(loss)
    assert g["a"] == 0.0
    assert g["b"] == pytest.approx(-2 * (1.5 - 0.25))


def test_constants_get_no_node():
    tape = GradientTape()
    c = constant(np.ones(3)) * 2.0 + 1.0
    assert c.is_constant
    assert len(tape) == 0


def test_one_node_per_primitive():
    p = Parameter("x", np.ones(4))
    tape = GradientTape()
    x = tape.watch(p)
    n0 = len(tape)
    y = ad.exp(x)
    assert len(tape) == n0 + 1
    y = y * x
    assert len(tape) == n0 + 2
    ad.sum_(y)
    assert len(tape) == n0 + 3


def test_backward_visits_each_node_once():
    p = Parameter("x", np.array(0.3))
    tape = GradientTape()
    x = tape.watch(p)
    y = x * x
    z = y + y * x          # y reused twice
    tape.backward(z)
    assert tape.last_backward_visits == len(tape)


def test_foreign_tape_rejected():
    p = Parameter("x", np.array(1.0))
    t1, t2 = GradientTape(), GradientTape()
    y = t1.watch(p) * 2.0
    with pytest.raises(ValueError):
        t2.backward(y)


def test_unreachable_parameter_maps_to_zero():
    a, b = Parameter("a", np.ones(3)), Parameter("b", np.ones(2))
    tape = GradientTape()
    ta = tape.watch(a)
    tape.watch(b)
    g = tape.backward(ad.sum_(ta * ta))
    np.testing.assert_array_equal(g["b"], 0.0)
    np.testing.assert_allclose(g["a"], 2.0)


def test_checkpoint_rollback():
    p = Parameter("x", np.array(2.0))
    tape = GradientTape()
    x = tape.watch(p)
    y = x * x
    g_before = tape.backward(y)["x"]
    mark = tape.checkpoint()
    for _ in range(5):
        ad.exp(y) * x
    tape.rollback(mark)
    assert len(tape) == mark
    assert tape.backward(y)["x"] == g_before


def test_domain_guards():
    with pytest.raises(DomainError):
        ad.log(constant(np.array([1.0, 0.0])))
    with pytest.raises(DomainError):
        ad.div(1.0, constant(np.array(0.0)))
    with pytest.raises(DomainError):
        ad.sqrt(constant(np.array(-1.0)))


def _random_dag(rng, x, depth=5):
    """A random expression DAG over the entries of ``x`` using smooth, domain-safe ops."""
    nodes = [x[i] for i in range(x.shape[0])]
    for _ in range(depth):
        a, b = (nodes[i] for i in rng.integers(len(nodes), size=2))
        op = rng.integers(7)
        if op == 0:
            n = a + b
        elif op == 1:
            n = a * b
        elif op == 2:
            n = ad.sigmoid(a) - b
        elif op == 3:
            n = ad.softplus(a) * 0.5
        elif op == 4:
            n = a / (ad.exp(b) + 1.0)
        elif op == 5:
            n = ad.log(a * a + 1.0)
        else:
            n = ad.sqrt(b * b + 0.5) * a
        nodes.append(n)
    return nodes[-1] + 0.1 * nodes[-2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_random_dag_matches_finite_differences(seed):
    rng_state = np.random.default_rng(seed).bit_generator.state
    x0 = np.random.default_rng(seed + 1).uniform(-1.5, 1.5, 4)

    def f(xv):
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        return float(_random_dag(rng, constant(xv)).value)

    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    p = Parameter("x", x0.copy())
    tape = GradientTape()
    g = tape.backward(_random_dag(rng, tape.watch(p)))["x"]
    fd = finite_diff_gradient(f, x0, 1e-5)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_of_backward(seed, a, b):
    x0 = np.random.default_rng(seed).uniform(-1, 1, 5)
    p = Parameter("x", x0)

    def f(x):
        return ad.sum_(ad.sigmoid(x) * x)

    def h(x):
        return ad.sum_(ad.exp(x * 0.3))

    tape = GradientTape()
    x = tape.watch(p)
    gf = tape.backward(f(x))["x"]
    gh = tape.backward(h(x))["x"]
    gc = tape.backward(f(x) * a + h(x) * b)["x"]
    np.testing.assert_allclose(gc, a * gf + b * gh, rtol=1e-12, atol=1e-12)


OPS = {
    "leaky_relu": lambda x: ad.sum_(ad.leaky_relu(x, 0.1) * x),
    "softplus": lambda x: ad.sum_(ad.softplus(x)),
    "sigmoid": lambda x: ad.sum_(ad.sigmoid(x) ** 2),
    "matmul": lambda x: ad.sum_(ad.matmul(ad.reshape(x, (2, 3)), constant(np.arange(6.0).reshape(3, 2)) * 0.1) ** 2),
    "linear": lambda x: ad.sum_(ad.linear(ad.reshape(x, (2, 3)), constant(np.ones((3, 4)) * 0.2),
                                          constant(np.ones(4))) ** 2),
    "broadcast": lambda x: ad.sum_(ad.broadcast_to(ad.reshape(x, (1, 6)), (3, 6)) * constant(np.arange(18.0).reshape(3, 6))),
    "getitem": lambda x: ad.sum_(x[np.array([0, 0, 2, 5])] ** 2),
    "concat": lambda x: ad.sum_(ad.concat([x, x * 2.0], axis=0) ** 2),
    "stack": lambda x: ad.sum_(ad.stack([x, ad.exp(x)], axis=-1)),
    "where": lambda x: ad.sum_(ad.where(np.array([True, False] * 3), x * x, x * 3.0)),
    "mean": lambda x: ad.mean(ad.reshape(x, (2, 3)) ** 3),
    "dot": lambda x: ad.sum_(ad.dot(ad.reshape(x, (2, 3)), constant(np.ones((2, 3)))) ** 2),
    "scatter_rows": lambda x: ad.sum_(ad.scatter_rows(4, [(np.array([0, 3]), ad.reshape(x, (2, 3)))], 3) ** 2),
    "index_add": lambda x: ad.sum_(ad.index_add(constant(np.ones((3, 2))), np.array([0, 0, 2]),
                                                ad.reshape(x, (3, 2))) ** 2),
    "gather_weighted": lambda x: ad.sum_(ad.gather_weighted(ad.reshape(x, (3, 2)), np.array([[0, 1], [2, 2]]),
                                                            np.array([[0.25, 0.75], [0.5, 0.5]])) ** 2),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_vjps_match_finite_differences(name):
    fn = OPS[name]
    x0 = np.random.default_rng(3).uniform(-1, 1, 6)
    g = grad_of(fn, x0)
    fd = finite_diff_gradient(lambda v: float(fn(constant(v)).value), x0, 1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_cubic():
    g = finite_diff_gradient(lambda p: p[0] ** 3, np.array([2.0]), 1e-4)
    assert g[0] == pytest.approx(12.0, abs=1e-6)


def test_finite_diff_constant_function():
    np.testing.assert_array_equal(finite_diff_gradient(lambda p: 4.0, np.ones(5)), 0.0)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params():
    state = AdamState.for_params([np.array([1.0, -2.0])], lr=0.1)
    new, st1 = adam_step([np.array([1.0, -2.0])], [np.zeros(2)], state)
    np.testing.assert_array_equal(new[0], [1.0, -2.0])
    assert st1.t == 1


@pytest.mark.parametrize("g", [3.7, -0.02, 1e3])
def test_adam_first_step_is_signed_lr(g):
    lr = 5e-4
    state = AdamState.for_params([np.array(0.0)], lr=lr)
    new, _ = adam_step([np.array(0.0)], [np.array(g)], state)
    assert float(new[0]) == pytest.approx(-lr * math.copysign(1, g), abs=lr * 1e-6)


def _reference_adam(x, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float Adam on f(x) = x^2, written independently of the library."""
    m = v = 0.0
    traj = []
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(x)
    return traj


def test_adam_three_steps_match_reference():
    ref = _reference_adam(1.0, 0.1, 3)
    p = Parameter("x", np.array(1.0))
    opt = Adam([p], lr=0.1)
    got = []
    for _ in range(3):
        opt.step({"x": 2.0 * p.data})
        got.append(float(p.data))
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_adam_length_mismatch():
    state = AdamState.for_params([np.zeros(2)])
    with pytest.raises(ValueError):
        adam_step([np.zeros(2), np.zeros(2)], [np.zeros(2)], state)


def test_adam_projection_and_nonnegative_second_moment():
    p = Parameter("env", np.array([0.001, 0.5]))
    opt = Adam([p], lr=0.1, project={"env": lambda d: np.maximum(d, 0.0)})
    opt.step({"env": np.array([1.0, -1.0])})
    assert np.all(p.data >= 0)
    assert all(np.all(v >= 0) for v in opt.state.v)


def test_clear_drops_graph_and_frees_intermediates():
    import gc
    import weakref

    class Big(np.ndarray):
        pass

    gc.disable()
    try:
        tape = ad.GradientTape()
        x = tape.watch(ad.Parameter("x", np.ones(4)))
        big = np.arange(4.0).view(Big)
        ref = weakref.ref(big)
        y = ad.sum_(x * big)
        del big
        tape.backward(y)
        tape.clear()
        del y, x
        assert len(tape) == 0
        assert ref() is None          # freed by reference counting alone, no cycle left
    finally:
        gc.enable()
