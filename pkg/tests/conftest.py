import numpy as np
import pytest

from railcap import model


def single_route(headway=2.0, passenger=True, name="r"):
    """One route with pure local traffic and a single request."""
    return model.Junction(
        routes=(model.Route(0, name),),
        train_types=(model.TrainType(0, "lo", passenger),),
        requests=(model.Request(0, 0),),
        headways=np.array([[headway]]),
    )


def parallel_routes(headways, passenger=True):
    """Mutually independent routes, one local request each."""
    k = len(headways)
    return model.Junction(
        routes=tuple(model.Route(i, f"r{i + 1}") for i in range(k)),
        train_types=(model.TrainType(0, "lo", passenger),),
        requests=tuple(model.Request(i, 0) for i in range(k)),
        headways=np.diag(np.asarray(headways, dtype=float)),
    )


def mm1k_distribution(rho, capacity):
    w = rho ** np.arange(capacity + 1)
    return w / w.sum()


@pytest.fixture
def one_route():
    return single_route()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
