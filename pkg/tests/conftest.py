import numpy as np
import pytest

from aelstm import pipeline as pl
from aelstm.config import RunConfig
from aelstm.env import generate_dataset, training_scenarios
from aelstm.preprocess import modality_slices


@pytest.fixture(scope="session")
def run_config():
    return RunConfig()


@pytest.fixture(scope="session")
def raw_dataset(run_config):
    return generate_dataset(training_scenarios(run_config.env), run_config.env)


@pytest.fixture(scope="session")
def data(run_config, raw_dataset):
    return pl.prepare_data(run_config, raw_dataset)


@pytest.fixture(scope="session")
def tactile_frames(run_config, data):
    e = run_config.env
    sl = modality_slices(e.n_joints, e.whole_dim, e.thumb_dim)["whole"]
    return (np.concatenate([x.inputs[:, sl] for x in data.train]),
            np.concatenate([x.inputs[:, sl] for x in data.val]))


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """record(n, name, passed, detail) stores one acceptance line."""
    def record(n, name, passed, detail=""):
        _CRITERIA[n] = f"criterion {n} {name}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        print(_CRITERIA[n])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
