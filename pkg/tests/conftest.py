import numpy as np
import pytest

from invgeo import FlatTorus, Product, RoundRP2, WarpedTorus, catalog_entry, catalog_names


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def all_models():
    return [FlatTorus(2), FlatTorus(3), WarpedTorus(2, "cos", 0.3, 1), WarpedTorus(2, "two-well", 0.25, 1),
            WarpedTorus(2, "cos-xy", 0.2, 0), RoundRP2(), Product(FlatTorus(1), RoundRP2())]


@pytest.fixture(params=catalog_names())
def catalog(request):
    return (request.param,) + catalog_entry(request.param)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
