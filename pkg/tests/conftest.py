import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from forward_fbsde.ergodic import solve_ergodic
from forward_fbsde.functions import constant, linear, tanh_scaled
from forward_fbsde.market import MarketModel, simulate_factor_paths

settings.register_profile("desk", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("desk")


def make_model(theta=0.0, drift=-1.0, rho=0.5, gamma=1.0, tanh_theta=False, **kw):
    th = tanh_scaled(theta) if tanh_theta else constant(theta)
    bound = max(abs(theta), 0.1)
    return MarketModel(theta=th, drift_l=linear(drift) if drift else constant(0.0), rho=rho, gamma=gamma,
                       theta_bound=bound, lipschitz_theta=abs(theta) if tanh_theta else 0.0,
                       dissipativity=kw.pop("dissipativity", 1.0 if tanh_theta else None), **kw)


@pytest.fixture(scope="session")
def flat_model():
    return make_model(theta=0.2)


@pytest.fixture(scope="session")
def flat_erg(flat_model):
    return solve_ergodic(flat_model)


@pytest.fixture(scope="session")
def zero_model():
    return make_model(theta=0.0)


@pytest.fixture(scope="session")
def zero_erg(zero_model):
    return solve_ergodic(zero_model)


@pytest.fixture(scope="session")
def tanh_model():
    return make_model(theta=0.3, tanh_theta=True)


@pytest.fixture(scope="session")
def tanh_erg(tanh_model):
    return solve_ergodic(tanh_model)


@pytest.fixture(scope="session")
def flat_paths(flat_model):
    return simulate_factor_paths(flat_model, 0.0, 0.8, 1 / 250, 20000, 11)


@pytest.fixture(scope="session")
def zero_paths(zero_model):
    return simulate_factor_paths(zero_model, 0.0, 0.8, 1 / 250, 20000, 12)


@pytest.fixture(scope="session")
def tanh_paths(tanh_model):
    return simulate_factor_paths(tanh_model, 0.0, 0.8, 1 / 250, 20000, 13)


def z_stat(mean, se):
    return abs(mean) / se if se > 0 else abs(mean)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion checked by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _CRITERIA.setdefault(mark.args[0], []).append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if all(ok) else 'FAIL'} ({sum(ok)}/{len(ok)} checks)")
