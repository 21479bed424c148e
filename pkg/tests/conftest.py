import numpy as np
import pytest
import torch


def pytest_configure(config):
    # tests build tensors in 64-bit unless they opt into float32 explicitly
    torch.set_default_dtype(torch.float64)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.RESULTS:
        terminalreporter.write_line(line)
