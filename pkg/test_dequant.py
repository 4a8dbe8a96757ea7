"""
Voronoi 去量化测试
"""

import numpy as np
import pytest

from voronoi_flows.checks import InvariantSuite, perturb, small_config
from voronoi_flows.data import synth_categorical
from voronoi_flows.models import autodiff as ad
from voronoi_flows.models.cell_map import map_forward
from voronoi_flows.models.dequant import (
    DequantModel,
    JointDensity,
    PushforwardDensity,
    dequantize,
    elbo,
    log_evidence_estimate,
    log_q,
    nll_bound,
    quantize,
    sample_codes,
    train,
)
from voronoi_flows.models.tessellation import geometry_vars


def _model(cards, seed=0, **dequant):
    rng = np.random.default_rng(seed)
    settings = {"embed_dim": 2, "num_blocks": 2}
    settings.update(dequant)
    config = small_config(dequant=settings, density={"num_blocks": 2})
    params = ad.ParameterSet()
    model = DequantModel.build(params, cards, config, rng)
    density = JointDensity.build(params, model.total_dim, config, rng)
    if settings["num_blocks"]:
        perturb(params, rng, "dequant.flow")
    perturb(params, rng, "density")
    return model, density, config


def _codes(cards, n, seed=1):
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(c, size=n) for c in cards], axis=1)


def test_quantize_inverts_dequantize():
    model, _, _ = _model([3, 2, 5])
    y = _codes([3, 2, 5], 300)
    x, logq = dequantize(model, y, np.random.default_rng(2))
    assert x.shape == (300, 6)
    assert np.all(np.isfinite(logq))
    np.testing.assert_array_equal(quantize(model, x), y)


def test_single_code_vector():
    model, _, _ = _model([3, 2])
    x, logq = dequantize(model, np.array([2, 1]), np.random.default_rng(3))
    assert x.shape == (4,)
    assert isinstance(logq, float)
    np.testing.assert_array_equal(quantize(model, x), [2, 1])
    assert log_q(model, x, np.array([2, 1])) == pytest.approx(logq, abs=1e-9)


def test_log_q_matches_sampling_density():
    model, _, _ = _model([4, 3], seed=4)
    y = _codes([4, 3], 200, seed=5)
    x, logq = dequantize(model, y, np.random.default_rng(6))
    np.testing.assert_allclose(log_q(model, x, y), logq, atol=1e-8)


def test_identity_flow_reduces_to_cell_map_density():
    model, _, _ = _model([3], seed=7, num_blocks=0)
    y = _codes([3], 100, seed=8)
    noise = model.draw_noise(len(y), np.random.default_rng(9))
    tape = ad.Tape(model.params, record=False)
    x, logq = model.dequantize_tape(tape, y, noise=noise)

    geom = geometry_vars(tape, model.tess_prefix(0))
    codes = y[:, 0]
    mapped = map_forward(tape, geom, codes, model.tessellation(0).anchors[codes] + noise[0])
    base = model.flows[0][0].base.log_prob_value(noise[0])
    np.testing.assert_allclose(x.value, mapped.point.value, atol=1e-12)
    np.testing.assert_allclose(logq.value, base - mapped.logdet.value, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 3])
def test_conditional_density_normalizes_over_each_cell(seed):
    passed, detail = InvariantSuite(seed=seed).check_dequant_normalization()
    assert passed, detail


@pytest.mark.parametrize("probs", [(0.5, 0.5), (0.7, 0.3)])
def test_pushforward_density_makes_elbo_tight(probs):
    model, _, _ = _model([2], seed=10, embed_dim=1)
    density = PushforwardDensity(model, np.log(probs))
    y = np.array([[0], [1], [0]])
    bound = elbo(model, density, y, 4, np.random.default_rng(11))
    np.testing.assert_allclose(bound, np.log(np.asarray(probs)[y[:, 0]]), atol=1e-8)


def test_elbo_below_importance_estimate():
    model, density, _ = _model([3, 4], seed=12)
    y = _codes([3, 4], 50, seed=13)
    lower = elbo(model, density, y, 8, np.random.default_rng(14))
    estimate = log_evidence_estimate(model, density, y, 8, np.random.default_rng(14))
    assert np.all(lower <= estimate + 1e-12)
    with pytest.raises(ValueError):
        elbo(model, density, y, 0, np.random.default_rng(14))
    for estimator in (log_evidence_estimate, nll_bound):
        with pytest.raises(ValueError):
            estimator(model, density, y, 0, np.random.default_rng(14))


def test_invalid_codes_rejected():
    model, _, _ = _model([3, 2])
    with pytest.raises(ValueError):
        dequantize(model, np.array([[3, 0]]), np.random.default_rng(0))
    with pytest.raises(ValueError):
        dequantize(model, np.array([[0, 0, 0]]), np.random.default_rng(0))


def test_short_training_run_keeps_best_epoch():
    table = synth_categorical((0.9, 0.1), 600, seed=0)
    codes = table.codes
    model, density, config = _model([2], seed=15, embed_dim=1)
    config.optimizer.epochs = 3
    config.optimizer.batch_size = 100
    rng = np.random.default_rng(16)
    report = train(model, density, codes[:500], codes[500:], config.optimizer, rng)
    assert 1 <= len(report.history) <= 3
    assert np.isfinite(report.best_val_nll)
    assert report.best_val_nll == min(r.val_nll for r in report.history)
    # 锚点始终留在盒内
    tess = model.tessellation(0)
    assert np.all((tess.anchors > tess.box_lo) & (tess.anchors < tess.box_hi))


def test_max_cells_mode_samples_only_valid_codes():
    model, density, _ = _model([2, 4], seed=17, cells="max")
    assert model.num_cells == [4, 4]
    codes = sample_codes(model, density, 500, np.random.default_rng(18))
    assert codes.shape == (500, 2)
    assert np.all(codes[:, 0] < 2)
    assert np.all(codes[:, 1] < 4)


def test_independent_flows_per_variable():
    model, _, _ = _model([3, 2], seed=19, shared_flow=False)
    assert model.flows[0][0] is not model.flows[1][0]
    y = _codes([3, 2], 50, seed=20)
    x, _ = dequantize(model, y, np.random.default_rng(21))
    np.testing.assert_array_equal(quantize(model, x), y)


def test_two_symmetric_anchors_split_by_sign():
    model, _, _ = _model([2], seed=22, embed_dim=1)
    model.params[f"{model.tess_prefix(0)}.anchors"] = np.array([[-1.0], [1.0]])
    model.params[f"{model.tess_prefix(0)}.box_center"] = np.zeros(1)
    x = np.linspace(-3.0, 3.0, 60)[:, None]
    np.testing.assert_array_equal(quantize(model, x)[:, 0], (x[:, 0] > 0).astype(np.int64))
