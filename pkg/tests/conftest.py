import numpy as np
import pytest

from ddstc import closedloop, dataset, experiment, stm
from ddstc.plant import pendulum_zoh
from ddstc.topology import build_graph_matrices


@pytest.fixture(scope="session")
def pendulum():
    return pendulum_zoh()


@pytest.fixture(scope="session")
def pendulum_cfg(tmp_path_factory):
    out = tmp_path_factory.mktemp("pendulum")
    return experiment.parse_config(experiment.pendulum_config(str(out)))


@pytest.fixture(scope="session")
def pendulum_gm(pendulum_cfg):
    return build_graph_matrices(pendulum_cfg.topology())


@pytest.fixture(scope="session")
def rho80_data(pendulum_cfg):
    return experiment.trajectories(pendulum_cfg, 80)


@pytest.fixture(scope="session")
def rho80_theta(pendulum, rho80_data):
    dm = dataset.assemble_matrices(rho80_data[0], 1, 80)
    return dataset.build_theta(dm, dataset.ball_noise_qmi(0.01, 80, 2), pendulum.e)


@pytest.fixture(scope="session")
def rho80_design(pendulum_cfg, rho80_data):
    return experiment.design_for(pendulum_cfg, experiment.MODE_DATA, 80, 0.2, 2.0, rho80_data)


@pytest.fixture(scope="session")
def rho80_families(pendulum_cfg, rho80_data):
    return experiment.families_for(pendulum_cfg, 80, rho80_data)


@pytest.fixture(scope="session")
def rho80_run(pendulum_cfg, rho80_design, rho80_families):
    """Data-driven closed loop of the pendulum network, 1000 steps."""
    return experiment.simulate_design(pendulum_cfg, rho80_design, stm.DATA_DRIVEN, rho80_families)


@pytest.fixture(scope="session")
def rho80_contexts(pendulum_cfg, rho80_design, rho80_run):
    return closedloop.event_contexts(rho80_run, pendulum_cfg.topology(), rho80_design)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
