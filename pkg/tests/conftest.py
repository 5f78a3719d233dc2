import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# desk-scale run shared by the acceptance suite and the training-curve tests
DESK_TRAJ = 2000
DESK_ARCH = (32, 32, 32)
DESK_TRAIN = dict(epochs=200, batch_size=128, learning_rate=1.2e-3, lr_decay=0.98, seed=0)


@dataclass
class Desk:
    db: object
    result: object  # TrainResult
    report: dict  # linstab.analyze output
    timings: dict

    @property
    def net(self):
        return self.result.net


@pytest.fixture(scope="session")
def desk():
    from neurostab import linstab
    from neurostab.gcnet import make_network
    from neurostab.pipeline.database import build_database
    from neurostab.pipeline.training import train

    t0 = time.perf_counter()
    db = build_database(DESK_TRAJ, seed=0)
    t1 = time.perf_counter()
    res = train(make_network(DESK_ARCH, seed=0), db.X, db.U, groups=db.traj, **DESK_TRAIN)
    t2 = time.perf_counter()
    report = linstab.analyze(res.net)
    t3 = time.perf_counter()
    return Desk(db, res, report, {"database": t1 - t0, "train": t2 - t1, "analyze": t3 - t2})


@pytest.fixture(scope="session")
def desk_shallow(desk):
    """Single hidden layer trained on the desk database under the same budget."""
    from neurostab.gcnet import make_network
    from neurostab.pipeline.training import train

    return train(make_network((DESK_ARCH[0],), seed=0), desk.db.X, desk.db.U, groups=desk.db.traj,
                 **DESK_TRAIN)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ---------------------------------------------------------------

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, title = mark.args
    if call.when == "setup" and call.excinfo is not None:
        _acceptance[n] = (title, "FAIL")
    elif call.when == "call":
        _acceptance[n] = (title, "FAIL" if call.excinfo is not None else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        title, status = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")


# -- reference controllers ------------------------------------------------------------


def lqr_net(x_hat=None):
    """Linear LQR feedback around hover as a one-layer linear network."""
    from scipy.linalg import solve_continuous_are

    from neurostab.gcnet import Layer, NetSpec
    from neurostab.linstab import plant_jacobians
    from neurostab.odeflow import QuadParams

    p = QuadParams()
    A, B = plant_jacobians(p, np.zeros(5), p.hover_control)
    S = solve_continuous_are(A, B, np.eye(5), np.eye(2))
    K = B.T @ S
    x_hat = np.zeros(5) if x_hat is None else np.asarray(x_hat, dtype=float)
    return NetSpec((Layer(-K, K @ x_hat, "linear"),), post_shift=p.hover_control)


@pytest.fixture(scope="session")
def lqr():
    return lqr_net()
