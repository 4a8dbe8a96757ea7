"""
反向模式自动微分测试
"""

import numpy as np
import pytest

from voronoi_flows.errors import DivisionByZero, LogOfNonPositive, NoExit, NonScalarRoot, ShapeMismatch
from voronoi_flows.models import autodiff as ad
from voronoi_flows.models.cell_map import map_forward
from voronoi_flows.models.tessellation import geometry_vars, register_geometry


def _params(**values):
    params = ad.ParameterSet()
    for name, value in values.items():
        params.add(name, value)
    return params


def test_square_derivative():
    tape = ad.Tape(_params(x=3.0))
    x = tape.param("x")
    grads = tape.backward(x * x)
    assert grads["x"] == pytest.approx(6.0)


def test_log_exp_identity():
    tape = ad.Tape(_params(x=-1.7))
    grads = tape.backward(ad.log(ad.exp(tape.param("x"))))
    assert grads["x"] == pytest.approx(1.0)


def test_select_min_positive_one_hot():
    tape = ad.Tape(_params(v=[-1.0, 2.0, 5.0]))
    smallest, index = ad.select_min_positive(tape.param("v"))
    assert index == 1
    assert float(smallest.value) == 2.0
    np.testing.assert_array_equal(tape.backward(smallest)["v"], [0.0, 1.0, 0.0])


def test_select_min_positive_batched_mask():
    tape = ad.Tape(_params(v=[[3.0, 1.0, 2.0], [4.0, -1.0, 6.0]]))
    values, index = ad.select_min_positive(tape.param("v"), mask=[[True, False, True], [True, True, True]])
    np.testing.assert_array_equal(index, [2, 0])
    np.testing.assert_array_equal(values.value, [2.0, 4.0])
    grad = tape.backward(ad.sum(values))["v"]
    np.testing.assert_array_equal(grad, [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    with pytest.raises(NoExit):
        ad.select_min_positive(tape.constant([-1.0, 0.0]))


def test_dot_gradient():
    x = np.array([1.0, -2.0, 0.5])
    tape = ad.Tape(_params(w=[0.3, 0.1, 0.7]))
    grads = tape.backward(ad.dot(tape.param("w"), x))
    np.testing.assert_allclose(grads["w"], x)


def test_unused_parameters_get_zero_gradient():
    params = _params(a=[1.0, 2.0], b=np.ones((2, 3)))
    tape = ad.Tape(params)
    grads = tape.backward(ad.sum(ad.square(tape.param("a"))))
    np.testing.assert_array_equal(grads["b"], np.zeros((2, 3)))


def test_frozen_parameters_are_constants():
    params = _params(a=2.0, b=3.0)
    params.freeze("b")
    tape = ad.Tape(params)
    grads = tape.backward(tape.param("a") * tape.param("b"))
    assert grads["a"] == pytest.approx(3.0)
    assert grads["b"] == 0.0


def test_non_scalar_root_rejected():
    tape = ad.Tape(_params(a=[1.0, 2.0]))
    with pytest.raises(NonScalarRoot):
        tape.backward(tape.param("a") * 2.0)


def test_primitive_errors():
    tape = ad.Tape(_params(a=[1.0, 0.0], m=np.ones((2, 3))))
    with pytest.raises(LogOfNonPositive):
        ad.log(tape.param("a"))
    with pytest.raises(DivisionByZero):
        1.0 / tape.param("a")
    with pytest.raises(ShapeMismatch):
        ad.matmul(tape.param("m"), tape.param("m"))
    with pytest.raises(ShapeMismatch):
        tape.param("a") + np.ones(3)


def test_chain_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = _params(w=rng.normal(size=(3, 4)), b=rng.normal(size=4), v=rng.normal(size=4))
    x = rng.normal(size=(5, 3))

    def f(tape):
        h = ad.tanh(ad.matmul(tape.constant(x), tape.param("w")) + tape.param("b"))
        s = ad.softplus(h) * ad.sigmoid(h)
        return ad.sum(ad.logsumexp(s * tape.param("v"), axis=1)) + ad.sum(ad.sqrt(ad.exp(h)))

    assert ad.grad_check(f, params, step=1e-5) <= 1e-6


def test_quadratic_form_grad_check():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    params = _params(x=rng.normal(size=4))

    def f(tape):
        x = tape.param("x")
        return ad.dot(x, ad.matvec(tape.constant(a), x))

    assert ad.grad_check(f, params, step=1e-5) <= 1e-8


def test_linearity_of_backward():
    rng = np.random.default_rng(2)
    params = _params(x=rng.normal(size=6))

    def f(tape):
        return ad.sum(ad.exp(tape.param("x")))

    def g(tape):
        return ad.sum(ad.swish(tape.param("x")) * ad.gelu(tape.param("x")))

    tape = ad.Tape(params)
    combined = tape.backward(2.0 * f(tape) - 3.0 * g(tape))["x"]
    tape_f, tape_g = ad.Tape(params), ad.Tape(params)
    separate = 2.0 * tape_f.backward(f(tape_f))["x"] - 3.0 * tape_g.backward(g(tape_g))["x"]
    np.testing.assert_allclose(combined, separate, rtol=1e-12)


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    params = _params(x=rng.normal(size=(3, 3)))

    def grads():
        tape = ad.Tape(params)
        return tape.backward(ad.sum(ad.tanh(ad.matmul(tape.param("x"), tape.param("x")))))["x"]

    np.testing.assert_array_equal(grads(), grads())


def test_indexing_primitives():
    params = _params(m=np.arange(12.0).reshape(4, 3))
    tape = ad.Tape(params)
    m = tape.param("m")
    rows = ad.take(m, [0, 0, 3])
    picked = ad.pick(m, [2, 1, 0, 0])
    sliced = m[:, [0, 2]]
    total = ad.sum(rows) + ad.sum(picked) + ad.sum(ad.concat([sliced, ad.where(np.eye(4, 3) > 0, m, 0.0)], axis=1))
    grad = tape.backward(total)["m"]
    expected = np.zeros((4, 3))
    expected[0] += 2.0
    expected[3] += 1.0
    expected[[0, 1, 2, 3], [2, 1, 0, 0]] += 1.0
    expected[:, [0, 2]] += 1.0
    expected += np.eye(4, 3)
    np.testing.assert_array_equal(grad, expected)


def test_non_recording_tape_matches_values():
    params = _params(x=[0.5, 1.5])
    recorded = ad.Tape(params)
    plain = ad.Tape(params, record=False)
    a = ad.sum(ad.exp(recorded.param("x")))
    b = ad.sum(ad.exp(plain.param("x")))
    assert float(a.value) == float(b.value)
    assert len(plain) == 0


def test_parameter_snapshot_isolated_from_updates():
    params = _params(x=1.0)
    tape = ad.Tape(params)
    params["x"] = 5.0
    assert float(tape.param("x").value) == 1.0
    with pytest.raises(ShapeMismatch):
        params["x"] = np.ones(2)


def test_cell_map_logdet_gradient_wrt_geometry():
    rng = np.random.default_rng(4)
    params = ad.ParameterSet()
    anchors = rng.uniform(-1.0, 1.0, size=(5, 3))
    register_geometry(params, "g", anchors, -2.0 * np.ones(3), 2.0 * np.ones(3),
                      scales=rng.uniform(0.5, 2.0, size=5))
    ks = rng.integers(5, size=12)
    x = anchors[ks] + rng.normal(0.0, 0.6, size=(12, 3))

    def f(tape):
        return ad.sum(map_forward(tape, geometry_vars(tape, "g"), ks, x).logdet)

    assert ad.grad_check(f, params, step=1e-6) <= 1e-4
