import numpy as np
import pytest

from delaybs.coefficients import chebyshev_profile, make_delay, standard_coefficients

D1_DELAY = ("cosine-chebyshev", {"offset": 3.0, "amplitude": 0.5, "order": 5.0})
D2_DELAY = ("exponential", {"amplitude": 0.5, "rate": -1.6})
X0 = {"amplitude": 5.0, "order": 4.0, "shift": 0.2}
DT = {"D1": 0.02, "D2": 0.005}


@pytest.fixture(scope="session")
def coeffs():
    return standard_coefficients()


@pytest.fixture(scope="session")
def tau_d1():
    return make_delay(*D1_DELAY, 41)


@pytest.fixture(scope="session")
def tau_d2():
    return make_delay(*D2_DELAY, 41)


@pytest.fixture(scope="session")
def x0():
    return chebyshev_profile(np.linspace(0.0, 1.0, 41), **X0)


DESK_COUNTS = {"D1": 20, "D2": 40}
DESK_STRIDES = {"D1": 10, "D2": 20}


def desk_configs(T=10.0):
    from delaybs.simulator import SimConfig

    return {r: SimConfig(dt=DT[r], T=T) for r in ("D1", "D2")}


@pytest.fixture(scope="session")
def desk_dataset(coeffs):
    from delaybs.coefficients import ScenarioSampler
    from delaybs.operator_learning import generate_dataset

    return generate_dataset(
        ScenarioSampler(seed=0), DESK_COUNTS, desk_configs(), coeffs, DESK_STRIDES, gain_range=(0.5, 1.5), gain_runs=1
    )


@pytest.fixture(scope="session")
def desk_model(desk_dataset):
    from delaybs.operator_learning import ModelConfig, train

    return train(desk_dataset, ModelConfig(seed=0, loss_units="normalized"))


# acceptance report ---------------------------------------------------------------

_CRITERIA = {}


@pytest.fixture
def criterion():
    def report(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        return bool(ok)

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
