import numpy as np
import pytest

from cycdepth import autodiff as ad

BACKENDS = ["numpy"] + (["torch"] if ad._torch is not None else [])


@pytest.fixture(params=BACKENDS)
def conv_backend(request):
    prev = ad.set_conv_backend(request.param)
    yield request.param
    ad.set_conv_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, grad=True):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
