import numpy as np
import pytest

from seedpc.pointset import ColoredPointCloud

# Acceptance tests register one line each here; the terminal summary prints
# them so a test run always ends with an explicit per-criterion verdict.
_CRITERION_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    word = "PASS" if passed else "FAIL"
    _CRITERION_LINES[number] = f"criterion {number}: {word} — {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERION_LINES):
        terminalreporter.write_line(_CRITERION_LINES[number])


def make_sphere(n: int, seed: int = 0, radius: float = 0.8) -> ColoredPointCloud:
    """Uniform sphere-surface cloud with a positional gradient coloring."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = v * radius
    return ColoredPointCloud(pts, np.clip((pts + 1.0) / 2.0, 0.0, 1.0))


@pytest.fixture
def sphere_cloud():
    return make_sphere
