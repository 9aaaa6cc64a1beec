import pytest
import torch


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run training experiments')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: trains models; needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
