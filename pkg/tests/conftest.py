import numpy as np
import pytest
import torch

torch.set_flush_denormal(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation_transforms(rng, n_joints, max_angle=1.0, spread=0.5):
    """Rigid random 4x4 transforms."""
    from avatar_recon.geometry import make_transform, rodrigues

    T = np.zeros((n_joints, 4, 4))
    for j in range(n_joints):
        axis = rng.normal(size=3)
        axis *= rng.uniform(0, max_angle) / np.linalg.norm(axis)
        T[j] = make_transform(rodrigues(axis), rng.normal(scale=spread, size=3))
    return T


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
