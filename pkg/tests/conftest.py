import numpy as np
import pytest

from colora.data import make_blobs_task


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    return make_blobs_task(n_train=64, n_val=16, n_test=16, seed=3)


@pytest.fixture(scope="session")
def blobs_dir(tmp_path_factory, blobs):
    from colora.data import save_dataset

    path = tmp_path_factory.mktemp("blobs")
    save_dataset(blobs, path)
    return path


# Acceptance criteria append "PASS|FAIL name: detail" lines here; they are
# echoed in the terminal summary so a plain `pytest` run shows the gate.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
