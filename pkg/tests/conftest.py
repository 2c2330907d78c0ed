import numpy as np
import pytest

from nsbmgat.scene_graph import build_graph
from nsbmgat.trajectory import VehicleState

# (lane offset, longitudinal sign) of each neighbor role, in slot order
ROLE_GEOMETRY = [(-1, 1), (0, 1), (1, 1), (-1, -1), (0, -1), (1, -1)]


def random_frame(rng, present=None, lane=2):
    """Subject (id 0) in ``lane`` plus neighbors in the roles flagged in ``present``."""
    if present is None:
        present = rng.random(6) < 0.7
    frame = [VehicleState(0, 0.0, 0.0, 3.5 * (lane - 1) + rng.normal(0, 0.3),
                          rng.uniform(15, 30), rng.normal(0, 1), rng.normal(0, 0.03), lane)]
    for k, ((dl, sgn), on) in enumerate(zip(ROLE_GEOMETRY, present)):
        if not on:
            continue
        ln = lane + dl
        frame.append(VehicleState(k + 1, 0.0, sgn * rng.uniform(5, 40),
                                  3.5 * (ln - 1) + rng.normal(0, 0.3), rng.uniform(15, 30),
                                  rng.normal(0, 1), rng.normal(0, 0.03), ln,
                                  rng.uniform(4, 5), rng.uniform(1.7, 2.0)))
    return frame


def random_graph(rng, present=None):
    return build_graph(random_frame(rng, present), 0, n_lanes=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting -------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.failed):
        n, title = mark.args
        prev = ACCEPTANCE_RESULTS.get(n, (title, True, 0.0))
        ACCEPTANCE_RESULTS[n] = (title, prev[1] and rep.passed, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, dur = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title} "
                                    f"({dur:.1f} s)")
