import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from flowmvs.geometry import CameraView
from flowmvs.synth import SceneSpec, generate_scene


def random_view(rng: np.random.Generator, size=(160, 128), focal=None) -> CameraView:
    """Random well-conditioned camera roughly 650 mm from the origin."""
    R = Rotation.random(random_state=int(rng.integers(0, 2**31 - 1))).as_matrix()
    w, h = size
    f = focal if focal is not None else rng.uniform(300, 900)
    K = np.array([[f, rng.uniform(-1, 1), w / 2 + rng.uniform(-5, 5)],
                  [0.0, f * rng.uniform(0.9, 1.1), h / 2 + rng.uniform(-5, 5)],
                  [0.0, 0.0, 1.0]])
    t = rng.uniform(-50, 50, 3) + np.array([0.0, 0.0, 650.0])
    return CameraView(K, R, t, size)


@pytest.fixture(scope="session")
def plane_scene():
    return generate_scene(SceneSpec(geometry="plane", num_views=3, resolution=(64, 48), seed=3))


@pytest.fixture(scope="session")
def sphere_scene():
    return generate_scene(SceneSpec(geometry="sphere-set", num_views=3, resolution=(64, 48), seed=5))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
