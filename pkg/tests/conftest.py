import numpy as np
import pytest
import torch

from invarlab.stimuli3d import Camera, make_primitive, render
from invarlab.transforms import center_foreground

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def box_view():
    """Centered base view of a unit box at the fixed pose."""
    mesh = make_primitive("box", {"sx": 1, "sy": 1, "sz": 1}, 0, object_id="box")
    return center_foreground(render(mesh, Camera(80, 36)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from _verdicts import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
