import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fisnav.bundle import bundled_corpus, bundled_scenes, bundled_suite
from fisnav.geometry import Episode, Pose, Scene, Trajectory

settings.register_profile("fisnav", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fisnav")


@pytest.fixture(scope="session")
def scenes():
    return bundled_scenes()


@pytest.fixture(scope="session")
def suite_all():
    return bundled_suite("all")


@pytest.fixture(scope="session")
def nav4():
    return bundled_suite("nav4")


@pytest.fixture(scope="session")
def corpus():
    return bundled_corpus()


@pytest.fixture
def box_scene():
    """10 x 10 room with one 2 x 2 block in the middle."""
    return Scene("box", (0.0, 0.0, 10.0, 10.0), ((4.0, 4.0, 6.0, 6.0),))


@pytest.fixture
def straight_episode(box_scene):
    pts = tuple((1.0 + 0.25 * i, 1.0) for i in range(9))
    return Episode("box/0", "box", Pose((1.0, 1.0), 0.0), "go east", pts[-1], Trajectory(pts))


def random_trajectory(rng: np.random.Generator, max_len: int) -> Trajectory:
    n = int(rng.integers(1, max_len + 1))
    return Trajectory(tuple(map(tuple, rng.uniform(-3, 3, size=(n, 2)))))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
