import pytest


def pytest_addoption(parser):
    parser.addoption('--run-benchmarks', action='store_true', default=False,
                     help='run the long synthetic benchmarks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-benchmarks'):
        return
    skip = pytest.mark.skip(reason='needs --run-benchmarks')
    for item in items:
        if 'benchmark' in item.keywords:
            item.add_marker(skip)
