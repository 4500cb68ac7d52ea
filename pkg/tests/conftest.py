import dataclasses

import numpy as np
import pytest

from kbmpc import edmd, pipeline
from kbmpc.config import RunConfig
from kbmpc.lifting import eval_psi_x

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def desk_cfg():
    return RunConfig().validate()


@pytest.fixture(scope="session")
def desk_dataset(desk_cfg):
    return edmd.generate_dataset(pipeline.data_config(desk_cfg))


@pytest.fixture(scope="session")
def basis2(desk_cfg):
    return pipeline.make_basis(desk_cfg)


@pytest.fixture(scope="session")
def desk_model(desk_cfg, desk_dataset, basis2):
    return pipeline.identify(desk_cfg, desk_dataset, basis2)


@pytest.fixture(scope="session")
def fixed_point_model(desk_model):
    """desk_model with a rank-one correction so that A psi(0) = psi(0) exactly."""
    p = eval_psi_x(desk_model.basis, np.zeros(6))
    A = desk_model.A + np.outer(p - desk_model.A @ p, p) / (p @ p)
    return dataclasses.replace(desk_model, A=A)


@pytest.fixture(scope="session")
def parking_ref(desk_cfg):
    return pipeline.load_reference(desk_cfg)[0]


@pytest.fixture(scope="session")
def tracking_runs(desk_cfg, desk_model, parking_ref):
    return {name: pipeline.run_tracking(desk_cfg, name, desk_model, parking_ref)
            for name in ("kbmpc", "lmpc")}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
