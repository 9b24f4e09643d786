import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lbt_lab import diffcore as dc
from lbt_lab.diffcore import ContractError, DomainError, Rng, ShapeError


def grad_of(f, x):
    v = dc.variable(x)
    (g,) = dc.gradient(f(v), [v])
    return g.value


# -- primitives ------------------------------------------------------------


def test_add_elementwise():
    out = dc.apply_primitive("add", dc.constant([1.0, 2.0]), dc.constant([3.0, 4.0]))
    np.testing.assert_array_equal(out.value, [4.0, 6.0])


def test_logsumexp_is_stable_at_large_inputs():
    out = dc.logsumexp(dc.constant([1000.0, 1000.0]))
    assert out.item() == pytest.approx(1000.0 + np.log(2.0), abs=1e-9)


def test_logsumexp_no_overflow_up_to_1e6():
    x = np.array([1e6, -1e6, 5e5, 1e6])
    v = dc.logsumexp(dc.constant(x)).item()
    assert np.isfinite(v)
    assert v == pytest.approx(1e6 + np.log(2.0))


def test_matmul_of_ones():
    out = dc.matmul(dc.constant(np.ones((2, 3))), dc.constant(np.ones((3, 2))))
    np.testing.assert_array_equal(out.value, np.full((2, 2), 3.0))


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as exc:
        dc.matmul(dc.constant(np.ones((2, 3))), dc.constant(np.ones((2, 3))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_add_shape_mismatch_raises():
    with pytest.raises(ShapeError) as exc:
        dc.add(dc.constant(np.ones(3)), dc.constant(np.ones(4)))
    assert "add" in str(exc.value)


def test_log_of_non_positive_is_domain_error():
    with pytest.raises(DomainError):
        dc.log(dc.constant([1.0, 0.0]))
    with pytest.raises(DomainError):
        dc.log(dc.constant([-2.0]))


def test_division_by_zero_is_domain_error():
    with pytest.raises(DomainError):
        dc.div(dc.constant([1.0]), dc.constant([0.0]))


def test_unknown_primitive():
    with pytest.raises(ContractError):
        dc.apply_primitive("relu", dc.constant(1.0))


def test_concat_and_slice():
    a, b = dc.constant(np.ones((2, 2))), dc.constant(np.zeros((1, 2)))
    c = dc.apply_primitive("concat", a, b, axis=0)
    assert c.shape == (3, 2)
    np.testing.assert_array_equal(dc.slice(c, 2).value, [0.0, 0.0])


def test_sigmoid_extremes_are_finite():
    v = dc.sigmoid(dc.constant([-800.0, 0.0, 800.0])).value
    np.testing.assert_allclose(v, [0.0, 0.5, 1.0])
    ls = dc.log_sigmoid(dc.constant([-50.0, 50.0])).value
    assert np.all(np.isfinite(ls))


# -- gradient --------------------------------------------------------------


def test_gradient_of_square():
    assert grad_of(lambda x: x * x, 3.0) == pytest.approx(6.0)


def test_second_derivative_of_square():
    for x0 in (-2.0, 0.0, 5.5):
        x = dc.variable(x0)
        (g,) = dc.gradient(x * x, [x])
        (h,) = dc.gradient(g, [x])
        assert h.item() == pytest.approx(2.0)


def test_logsumexp_gradient_is_softmax():
    np.testing.assert_allclose(grad_of(dc.logsumexp, np.zeros(2)), [0.5, 0.5])


def test_non_scalar_output_is_contract_error():
    x = dc.variable(np.ones(3))
    with pytest.raises(ContractError):
        dc.gradient(x * 2.0, [x])


def test_wrt_must_require_grad():
    c = dc.constant(np.ones(3))
    with pytest.raises(ContractError):
        dc.gradient(dc.sum(c), [c])


def test_unconnected_node_gets_zero_gradient():
    x, y = dc.variable(np.ones(3)), dc.variable(np.ones((2, 2)))
    gx, gy = dc.gradient(dc.sum(x * x), [x, y])
    np.testing.assert_array_equal(gy.value, np.zeros((2, 2)))
    np.testing.assert_array_equal(gx.value, 2.0 * np.ones(3))


def test_gradient_result_is_a_graph_node():
    x = dc.variable(np.array([1.0, 2.0]))
    (g,) = dc.gradient(dc.sum(dc.exp(x)), [x])
    assert isinstance(g, dc.Node) and g.requires_grad


def test_evaluation_is_bit_deterministic():
    x = np.linspace(-1, 1, 7)

    def run():
        v = dc.variable(x)
        f = dc.sum(dc.tanh(v) * dc.exp(v)) + dc.logsumexp(v)
        (g,) = dc.gradient(f, [v])
        return f.value.tobytes(), g.value.tobytes()

    assert run() == run()


# every primitive at 100 random points, first and second order
_UNARY = {
    "exp": dc.exp,
    "log": lambda v: dc.log(v * v + 0.5),
    "sqrt": lambda v: dc.sqrt(v * v + 0.5),
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "softplus": dc.softplus,
    "square": dc.square,
    "neg": dc.neg,
    "logsumexp": lambda v: dc.logsumexp(dc.reshape(v, (2, 2)), axis=1),
    "mean": lambda v: dc.mean(dc.reshape(v, (2, 2)), axis=0) * v[:2],
    "broadcast": lambda v: dc.broadcast(dc.reshape(v, (1, 4)), (3, 4)),
    "transpose": lambda v: dc.transpose(dc.reshape(v, (2, 2))) * dc.reshape(v, (2, 2)),
    "concat": lambda v: dc.concat([v, v * v], axis=0),
    "slice": lambda v: dc.slice(v, np.array([0, 2, 2])) * v[1],
    "add": lambda v: v + dc.reshape(v[::-1], (4,)),
    "sub": lambda v: v - v * v,
    "mul": lambda v: v * v[::-1],
    "div": lambda v: v / (v * v + 1.0),
    "matmul": lambda v: dc.matmul(dc.reshape(v, (2, 2)), dc.reshape(v * v, (2, 2))),
}


def _scalarise(h):
    return lambda v: dc.sum(h(v) * dc.constant(np.linspace(0.3, 1.7, h(v).size).reshape(h(v).shape)))


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_primitive_gradients_match_finite_differences(name):
    f = _scalarise(_UNARY[name])
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst1 = worst2 = 0.0
    for _ in range(100):
        p = rng.uniform(-1.5, 1.5, 4)
        worst1 = max(worst1, dc.finite_difference_check(f, p).error)
        worst2 = max(worst2, dc.second_order_check(f, p).error)
    assert worst1 < 1e-6
    assert worst2 < 1e-4


def test_finite_difference_examples():
    sq = lambda v: dc.sum(v * v)
    assert dc.finite_difference_check(sq, [1.0, -2.0]).error < 1e-7
    const = lambda v: dc.sum(v * 0.0) + 3.0
    assert dc.finite_difference_check(const, [1.0, 2.0]).error == 0.0


def test_finite_difference_on_gaussian_log_likelihood():
    x = np.array([0.3, -1.2, 2.5])

    def f(phi):
        r = dc.constant(x) - dc.broadcast(phi, (3,))
        return dc.mean(-0.5 * r * r)

    res = dc.finite_difference_check(f, [0.4])
    assert res.error < 1e-6
    assert res.analytic[0] == pytest.approx(x.mean() - 0.4)


def test_non_finite_perturbation_reports_coordinate():
    res = dc.finite_difference_check(lambda v: dc.sum(dc.log(v)), [1.0, 5e-6])
    assert res.error == np.inf and res.index == 1


# -- rng -------------------------------------------------------------------


def test_splitmix64_reference_value():
    _, out = dc.splitmix64(0)
    assert out == 0xE220A8397B1DCDAF


def test_seeded_normals_are_bit_identical():
    a = dc.sample_standard_normal(Rng(42), (1000,))
    b = dc.sample_standard_normal(Rng(42), (1000,))
    assert a.tobytes() == b.tobytes()


def test_normal_moments():
    x = dc.sample_standard_normal(Rng(7), (100000,))
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.03


def test_empty_shape():
    assert dc.sample_standard_normal(Rng(1), (0,)).shape == (0,)


def test_uniform_range_and_spawn_independence():
    r = Rng(3)
    u = r.uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    a, b = Rng(3).spawn(1).uniform(100), Rng(3).spawn(2).uniform(100)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(Rng(3).spawn(1).uniform(100), a)


def test_categorical_frequencies():
    idx = Rng(5).categorical([0.2, 0.8], 20000)
    assert abs(np.mean(idx == 1) - 0.8) < 0.02
    assert set(np.unique(idx)) <= {0, 1}


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**63))
def test_any_seed_is_reproducible(seed):
    assert Rng(seed).next_u64(4).tolist() == Rng(seed).next_u64(4).tolist()
