"""
配置加载与校验测试
"""

import os

import pytest

from voronoi_flows.config import (
    LR_PRESETS,
    config_from_dict,
    config_to_flat,
    configure_threads,
    fold_sections,
    load_config,
)
from voronoi_flows.errors import ConfigInvalid

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")


def _write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_load_flat_sections(tmp_path):
    path = _write(tmp_path, "# 注释\ntask = mixture\ndata.generator = two_gaussians\n"
                            "mixture.num_components = 3\noptimizer.lr = 0.005\ndata.ratios = 0.6,0.2,0.2\n")
    config = load_config(path)
    assert config.task == "mixture"
    assert config.mixture.num_components == 3
    assert config.optimizer.learning_rate == pytest.approx(0.005)
    assert config.data.ratios == (0.6, 0.2, 0.2)
    # 未给出的键使用默认值
    assert config.network.hidden_units == 128


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(_write(tmp_path, "mixture.num_componets = 3\n"))
    with pytest.raises(ConfigInvalid):
        load_config(_write(tmp_path, "colour = red\n"))
    with pytest.raises(ConfigInvalid):
        load_config(_write(tmp_path, "a.b.c = 1\n"))


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(_write(tmp_path, "optimizer.epochs = 0\n"))
    with pytest.raises(ConfigInvalid):
        load_config(_write(tmp_path, "network.activation = relu6\n"))
    with pytest.raises(ConfigInvalid):
        load_config(_write(tmp_path, "data.source = csv\n"))
    with pytest.raises(ConfigInvalid):
        load_config(str(tmp_path / "missing.cfg"))


def test_dequant_needs_discrete_generator():
    with pytest.raises(ConfigInvalid):
        config_from_dict({"task": "dequant", "data": {"generator": "eight_gaussians"}})
    config = config_from_dict({"task": "mixture", "data": {"generator": "eight_gaussians"}})
    assert config.data.generator == "eight_gaussians"


def test_learning_rate_presets():
    config = config_from_dict({"optimizer": {"lr_preset": "uci-5e-4"}})
    assert config.optimizer.learning_rate == LR_PRESETS["uci-5e-4"] == 5e-4
    with pytest.raises(ConfigInvalid):
        config_from_dict({"optimizer": {"lr_preset": "fast"}})


def test_fold_sections():
    assert fold_sections({"task": "flow", "data.seed": "3"}) == {"task": "flow", "data": {"seed": "3"}}
    with pytest.raises(ConfigInvalid):
        fold_sections({"data": "x", "data.seed": "3"})
    with pytest.raises(ConfigInvalid):
        fold_sections({"task": None})


def test_flat_round_trip():
    config = config_from_dict({"task": "flow", "data": {"generator": "rings"}, "density": {"num_blocks": 2}})
    flat = config_to_flat(config)
    assert flat["density.num_blocks"] == 2
    again = config_from_dict(fold_sections({k: v for k, v in flat.items() if v is not None}))
    assert again == config


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIG_DIR)))
def test_shipped_configs_are_valid(name):
    config = load_config(os.path.join(CONFIG_DIR, name))
    assert config.output.dir.startswith("outputs/")


def test_thread_limit_from_environment(monkeypatch):
    monkeypatch.delenv("VF_THREADS", raising=False)
    monkeypatch.setattr("voronoi_flows.config.load_dotenv", lambda: False)
    assert configure_threads() is None
    monkeypatch.setenv("VF_THREADS", "1")
    limits = configure_threads()
    assert limits is not None
    limits.restore_original_limits()
    monkeypatch.setenv("VF_THREADS", "zero")
    with pytest.raises(ConfigInvalid):
        configure_threads()
    monkeypatch.setenv("VF_THREADS", "0")
    with pytest.raises(ConfigInvalid):
        configure_threads()
