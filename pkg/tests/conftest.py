"""共享夹具与 slow 标记开关。"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cellular_basis import sample_basis  # noqa: E402
from field_grid import Grid2D  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="运行全分辨率验收场景")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def grid33():
    return Grid2D(33)


@pytest.fixture(scope="session")
def grid65():
    return Grid2D(65)


@pytest.fixture(scope="session")
def grid129():
    return Grid2D(129)


@pytest.fixture(scope="session")
def basis12_33(grid33):
    return sample_basis(grid33, (1, 2))


@pytest.fixture(scope="session")
def basis12_65(grid65):
    return sample_basis(grid65, (1, 2))


@pytest.fixture(autouse=True)
def _clean_mixing_env(monkeypatch):
    # 先 setenv 再 delenv，测试中由 .env 写入的变量在结束时也会被撤销
    for var in ("MIXING_OUTPUT_DIR", "MIXING_LOG_LEVEL", "MIXING_DETERMINISTIC"):
        monkeypatch.setenv(var, "")
        monkeypatch.delenv(var)
