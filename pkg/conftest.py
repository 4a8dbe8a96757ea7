"""
pytest 公共设置: 标记为 slow 的训练测试默认跳过，加 --runslow 运行
"""

import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行完整训练的 slow 测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 按附带配置完整训练, 耗时数分钟")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
