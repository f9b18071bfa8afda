import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neuralprt.geometry import Camera, LightKind, LightSource, Material, MaterialKind, Scene, quad_mesh
from neuralprt.scenes import lit_sphere_interior, plane_under_sky

# numba kernels compile on first use, so per-example deadlines are meaningless
settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sky_plane():
    return plane_under_sky()


@pytest.fixture(scope="session")
def lit_sphere():
    return lit_sphere_interior(radius=1.0, albedo=0.5)


@pytest.fixture(scope="session")
def two_quads():
    """Ground quad with a smaller quad floating above it, under a unit sky."""
    ground = quad_mesh((-1, -1, 0), (2, 0, 0), (0, 2, 0), (2, 2), material_id=0, name="ground")
    roof = quad_mesh((-0.25, -0.25, 0.5), (0, 0.5, 0), (0.5, 0, 0), material_id=0, name="roof")
    mats = [Material(MaterialKind.LAMBERTIAN, (0.5, 0.5, 0.5))]
    return Scene([ground, roof], mats, [LightSource(LightKind.ENVIRONMENT, (1.0, 1.0, 1.0))],
                 camera=Camera((0, -2, 1), (0, 0, 0), (0, 0, 1), 50.0, 24, 24))


# acceptance criteria outcomes, printed in the terminal summary: number -> (status, title, seconds, details)
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, secs, details = ACCEPTANCE[n]
        extra = ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in details.items())
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title} ({secs:.1f} s)  {extra}")
