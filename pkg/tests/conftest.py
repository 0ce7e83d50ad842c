import numpy as np
import pytest

from moqe import analysis
from moqe.model import TOY_DENSE, TOY_MOE, init_checkpoint


@pytest.fixture(scope="session")
def toy_ckpt():
    return init_checkpoint(TOY_MOE, seed=0)


@pytest.fixture(scope="session")
def outlier_ckpt():
    return analysis.outlier_checkpoint(TOY_MOE, seed=0)


@pytest.fixture(scope="session")
def outlier_dense():
    return analysis.outlier_checkpoint(TOY_DENSE, seed=0)


@pytest.fixture(scope="session")
def probe():
    rng = np.random.default_rng(1)
    return [rng.integers(0, TOY_MOE.vocab, 24).tolist() for _ in range(4)]


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
