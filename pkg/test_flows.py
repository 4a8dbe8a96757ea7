"""
仿射耦合流测试
"""

import numpy as np
import pytest

from voronoi_flows.checks import perturb
from voronoi_flows.models import autodiff as ad
from voronoi_flows.models.flows import FlowStack, SinhTail, coupling_masks, flow_logprob, flow_sample


def _stack(dim, num_blocks=4, seed=0, std=0.1, name="f", **kwargs):
    rng = np.random.default_rng(seed)
    params = ad.ParameterSet()
    stack = FlowStack(name, dim, num_blocks=num_blocks, hidden=(16, 16), **kwargs)
    stack.init_params(params, rng)
    if std:
        perturb(params, rng, name, std=std)
    return stack, params


def test_masks_cover_both_halves():
    masks = coupling_masks(5, 4)
    assert [m.tolist() for m in masks[:2]] == [[True, True, False, False, False],
                                               [False, False, True, True, True]]
    assert masks[2].tolist() == [False, True, False, True, False]
    assert coupling_masks(1, 3)[0].tolist() == [False]


def test_zero_initialized_stack_is_identity():
    stack, params = _stack(3, std=0.0)
    x = np.random.default_rng(1).normal(size=(50, 3))
    y, logdet = stack.forward(ad.Tape(params, record=False), x)
    np.testing.assert_array_equal(y.value, x)
    np.testing.assert_array_equal(logdet.value, np.zeros(50))


@pytest.mark.parametrize("dim", [1, 2, 5])
def test_forward_inverse_round_trip(dim):
    stack, params = _stack(dim, seed=dim)
    tape = ad.Tape(params, record=False)
    z = np.random.default_rng(2).normal(size=(200, dim))
    x, ld_forward = stack.forward(tape, z)
    back, ld_inverse = stack.inverse(tape, x.value)
    np.testing.assert_allclose(back.value, z, atol=1e-10)
    np.testing.assert_allclose(ld_forward.value + ld_inverse.value, 0.0, atol=1e-10)


def test_logdet_matches_finite_difference_jacobian():
    stack, params = _stack(4, seed=3, std=0.3)
    z = np.random.default_rng(4).normal(size=4)
    step = 1e-6

    def push(point):
        return stack.forward(ad.Tape(params, record=False), point[None, :])[0].value[0]

    jac = np.empty((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = step
        jac[:, j] = (push(z + e) - push(z - e)) / (2 * step)
    _, reference = np.linalg.slogdet(jac)
    logdet = stack.forward(ad.Tape(params, record=False), z[None, :])[1].value[0]
    assert logdet == pytest.approx(reference, abs=1e-6)


def test_empty_stack_is_standard_gaussian():
    params = ad.ParameterSet()
    stack = FlowStack("f", 2, num_blocks=0)
    assert flow_logprob(params, stack, np.zeros((1, 2)))[0] == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert flow_logprob(params, stack, np.zeros((1, 2)))[0] == pytest.approx(-1.8379, abs=1e-4)


def test_base_std_controls_sample_spread():
    params = ad.ParameterSet()
    stack = FlowStack("f", 2, num_blocks=0, base_std=0.2)
    samples = flow_sample(params, stack, 100000, np.random.default_rng(5))
    assert np.std(samples) == pytest.approx(0.2, abs=0.005)


def test_density_integrates_to_one_on_grid():
    stack, params = _stack(2, seed=6)
    size, half = 400, 8.0
    xs = -half + (np.arange(size) + 0.5) * 2 * half / size
    gx, gy = np.meshgrid(xs, xs)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    total = np.sum(np.exp(flow_logprob(params, stack, points))) * (2 * half / size) ** 2
    assert total == pytest.approx(1.0, abs=1e-2)


def test_appending_identity_block_keeps_density():
    stack, params = _stack(2, num_blocks=2, seed=7)
    longer = FlowStack("f", 2, num_blocks=3, hidden=(16, 16))
    longer.blocks[2].init_params(params, np.random.default_rng(8))
    x = np.random.default_rng(9).normal(size=(100, 2))
    np.testing.assert_allclose(flow_logprob(params, longer, x), flow_logprob(params, stack, x), atol=1e-12)


def test_conditional_stack_uses_embeddings():
    stack, params = _stack(2, num_blocks=2, seed=10, num_conditions=3, cond_dim=2)
    x = np.random.default_rng(11).normal(size=(4, 2))
    a = flow_logprob(params, stack, x, cond_ids=np.zeros(4, dtype=np.int64))
    b = flow_logprob(params, stack, x, cond_ids=np.full(4, 2))
    assert not np.allclose(a, b)
    # 同一条件下结果只由参数和输入决定
    np.testing.assert_array_equal(a, flow_logprob(params, stack, x, cond_ids=np.zeros(4, dtype=np.int64)))


def test_sampling_is_deterministic_for_a_seed():
    stack, params = _stack(3, seed=12)
    a = flow_sample(params, stack, 20, np.random.default_rng(13))
    b = flow_sample(params, stack, 20, np.random.default_rng(13))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        flow_sample(params, stack, 0, np.random.default_rng(13))


def test_log_scale_is_clamped():
    stack, params = _stack(2, num_blocks=1, seed=14, std=50.0, clamp=2.0)
    tape = ad.Tape(params, record=False)
    _, log_scale = stack.blocks[0].shift_and_log_scale(tape, tape.constant(np.full((10, 2), 3.0)))
    assert np.all(np.abs(log_scale.value) <= 2.0)


@pytest.mark.parametrize("dim", [1, 3])
def test_tail_layer_round_trip(dim):
    stack, params = _stack(dim, seed=11, tail_scale=0.3)
    tape = ad.Tape(params, record=False)
    z = np.random.default_rng(12).normal(size=(300, dim))
    x, ld_forward = stack.forward(tape, z)
    back, ld_inverse = stack.inverse(tape, x.value)
    np.testing.assert_allclose(back.value, z, atol=1e-9)
    np.testing.assert_allclose(ld_forward.value + ld_inverse.value, 0.0, atol=1e-9)


def test_tail_layer_logdet_matches_derivative():
    tail = SinhTail(0.5)
    x = np.array([[-30.0, -1.0, 0.0, 0.2, 4.0, 300.0]])
    y, logdet = tail.forward(ad.Tape(record=False), x)
    np.testing.assert_allclose(y.value, 0.5 * np.sinh(x / 0.5))
    assert logdet.value[0] == pytest.approx(np.sum(np.log(np.cosh(x / 0.5))), rel=1e-12)
    u = np.array([[-1e6, -2.0, 0.0, 1e-3, 7.0, 1e8]])
    w, inverse_logdet = tail.inverse(ad.Tape(record=False), u)
    np.testing.assert_allclose(w.value, 0.5 * np.arcsinh(u / 0.5))
    expected = -0.5 * np.sum(np.log1p((u / 0.5) ** 2))
    assert inverse_logdet.value[0] == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        SinhTail(0.0)


def test_one_dimensional_tail_density_normalizes_and_is_heavy():
    params = ad.ParameterSet()
    stack = FlowStack("f", 1, num_blocks=0, tail_scale=0.5)
    plain = FlowStack("g", 1, num_blocks=0)
    # w = τ asinh(x/τ) 上的均匀网格
    w = np.linspace(-9.0, 9.0, 20001)
    x = 0.5 * np.sinh(w / 0.5)
    dx_dw = np.cosh(w / 0.5)
    density = np.exp(flow_logprob(params, stack, x[:, None])) * dx_dw
    assert np.sum(density) * (w[1] - w[0]) == pytest.approx(1.0, abs=1e-6)
    far = np.array([[40.0]])
    assert flow_logprob(params, stack, far)[0] > flow_logprob(params, plain, far)[0] + 500.0
