import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tesopt.optimizers import StimulusProblem


def random_problem(rng, n_electrodes=3, n_nuisance=6, mu=4e-3, scale=1.0):
    """Small synthetic stimulus problem with a well-scaled lead field."""
    L1 = rng.normal(size=(3, n_electrodes)) * scale
    L2 = rng.normal(size=(n_nuisance, n_electrodes)) * 0.5 * scale
    x1 = rng.normal(size=3)
    return StimulusProblem.from_parts(L1, L2, x1, mu)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ball_mesh():
    from tesopt.meshgen import generate_ball_mesh

    return generate_ball_mesh([0.09, 0.08, 0.07], [0.33, 0.0042, 0.33], 0.01)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        from test_acceptance import RESULTS
    except Exception:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, description, passed in sorted(RESULTS):
        state = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[criterion {num:2d}] {state}: {description}")


@pytest.fixture(scope="session")
def bar_setup():
    """Homogeneous bar with full-face end electrodes (analytic resistance)."""
    from tesopt.fem import assemble
    from tesopt.meshgen import boundary_faces, electrodes_from_face_sets, generate_box_mesh

    lx, w = 0.04, 0.01
    mesh = generate_box_mesh((lx, w, w), (16, 4, 4), 1.0)
    faces = boundary_faces(mesh)
    fx = mesh.nodes[faces][:, :, 0]
    left = np.nonzero(np.all(np.isclose(fx, 0.0), axis=1))[0]
    right = np.nonzero(np.all(np.isclose(fx, lx), axis=1))[0]
    layout = electrodes_from_face_sets(mesh, [left, right], 100.0)
    system = assemble(mesh, layout)
    return mesh, layout, system, dict(lx=lx, area=w * w, sigma=1.0, z=100.0)
