"""
不变量自检套件测试
套件本身在小规模下应当通过，在注入错误的 logdet 时应当失败
"""

import numpy as np
import pytest

from voronoi_flows.checks import InvariantSuite, bisect_exit, random_tessellation, small_config
from voronoi_flows.models import autodiff as ad, cell_map
from voronoi_flows.models.tessellation import geometry_constants

FAST_CHECKS = [
    "出口距离 λ* 与二分法一致",
    "正逆映射互为逆且 logdet 相反",
    "logdet 与显式雅可比一致",
    "logdet 与差分雅可比一致",
    "几何参数梯度与差分一致",
    "ELBO 梯度与差分一致",
]


@pytest.fixture
def suite():
    return InvariantSuite(seed=1, scale=0.05)


def test_fast_checks_pass(suite):
    results = suite.run(only=FAST_CHECKS)
    assert [r.name for r in results] == FAST_CHECKS
    failed = [f"{r.name}: {r.detail}" for r in results if not r.passed]
    assert not failed
    assert suite.all_passed


def test_report_lists_every_result(suite):
    suite.run(only=FAST_CHECKS[:2])
    report = suite.report()
    assert "✅ " + FAST_CHECKS[0] in report
    assert "2/2" in report


def test_wrong_logdet_is_caught(suite, monkeypatch):
    original = cell_map._rank_two_logdet

    def flipped(dim, c, s1, s2, v1, direction):
        return original(dim, c, -1.0 * s1, s2, v1, direction)

    monkeypatch.setattr(cell_map, "_rank_two_logdet", flipped)
    results = suite.run(only=["logdet 与显式雅可比一致"])
    assert not results[0].passed
    assert not suite.all_passed
    assert "❌" in suite.report()


def test_exceptions_become_failures(suite, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("broken")

    monkeypatch.setattr(cell_map, "ray_exit", boom)
    monkeypatch.setattr("voronoi_flows.checks.ray_exit", boom)
    results = suite.run(only=["出口距离 λ* 与二分法一致"])
    assert not results[0].passed
    assert "RuntimeError" in results[0].detail


def test_bisection_reference_agrees_with_box_distance():
    rng = np.random.default_rng(0)
    tess = random_tessellation(rng, 1, 3, half_width=1.5)
    direction = np.array([0.0, 0.0, 1.0])
    expected = 1.5 - tess.anchors[0, 2]
    assert bisect_exit(tess, 0, direction) == pytest.approx(expected, abs=1e-10)


def test_small_config_overrides():
    config = small_config(task="mixture", mixture={"num_components": 3})
    assert config.task == "mixture"
    assert config.mixture.num_components == 3
    assert config.network.hidden_units == 8


def test_mixture_cost_does_not_grow_with_components():
    results = InvariantSuite(seed=0).run(only=["混合密度耗时与 K 无关"])
    assert results[0].passed, results[0].detail


def test_ray_geometry_avoids_per_cell_normal_tensors(monkeypatch):
    """一次求值中不应出现 N×K×D 的中间张量"""
    rng = np.random.default_rng(4)
    tess = random_tessellation(rng, 64, 2)
    ks = rng.integers(64, size=300)
    x = tess.anchors[ks] + rng.normal(0.0, 0.3, size=(300, 2))
    shapes = []
    original = ad.Tape._node

    def recording(self, value, parents, vjp):
        shapes.append(np.shape(value))
        return original(self, value, parents, vjp)

    monkeypatch.setattr(ad.Tape, "_node", recording)
    tape = ad.Tape(record=False)
    cell_map.map_forward(tape, geometry_constants(tape, tess), ks, x)
    assert shapes
    assert max(int(np.prod(s)) for s in shapes) < 300 * 64 * 2
