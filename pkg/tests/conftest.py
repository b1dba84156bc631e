import numpy as np
import pytest

from magtomo.geometry import make_geometry
from magtomo.grids import Grid


@pytest.fixture(scope="session")
def ball_geom():
    """Euclidean unit ball, no magnetic field."""
    return make_geometry({"dim": 3, "metric": "euclidean", "magnetic": "zero",
                          "boundary": "ball:1.0"})


@pytest.fixture(scope="session")
def ball_geom_b(request):
    return make_geometry({"dim": 3, "metric": "euclidean",
                          "magnetic": "constant:0.25", "boundary": "ball:1.0"})


@pytest.fixture(scope="session")
def big_ball_b1():
    """Large ball so the unit circular orbit (B = 1) stays interior."""
    return make_geometry({"dim": 3, "metric": "euclidean", "magnetic": "constant:1.0",
                          "boundary": "ball:3.0"})


def constant_b_geom(B, radius=1.0):
    return make_geometry({"dim": 3, "metric": "euclidean",
                          "magnetic": f"constant:{B}", "boundary": f"ball:{radius}"})


@pytest.fixture(scope="session")
def lens_grid():
    """16^3 grid over the polar lens layer of the unit ball."""
    return Grid(np.array([-0.66, -0.66, 0.79]), np.array([0.66, 0.66, 1.002]),
                (16, 16, 16))


def gaussian_bump(cen, s_lat, s_z, axis=2):
    """Anisotropic bump profile, batch callable on (Q, 3) points."""
    cen = np.asarray(cen, dtype=float)
    lat = [k for k in range(3) if k != axis]

    def fn(pts):
        pts = np.atleast_2d(pts)
        return np.exp(-((pts[:, lat[0]] - cen[lat[0]]) ** 2
                        + (pts[:, lat[1]] - cen[lat[1]]) ** 2) / s_lat**2
                      - (pts[:, axis] - cen[axis]) ** 2 / s_z**2)

    return fn


def random_boundary_vanishing_potential(rng, radius=1.0, scale=1.0):
    """Smooth scalar vanishing on the boundary sphere: (r^2 - |z|^2) * poly."""
    c0 = rng.normal(scale=scale)
    c1 = rng.normal(scale=scale, size=3)

    def p_fn(pts):
        pts = np.atleast_2d(pts)
        w = radius**2 - np.einsum("qi,qi->q", pts, pts)
        return w * (c0 + pts @ c1)

    return p_fn


def random_boundary_vanishing_oneform(rng, radius=1.0, scale=1.0):
    c0 = rng.normal(scale=scale, size=3)
    c1 = rng.normal(scale=scale, size=(3, 3))

    def u_fn(pts):
        pts = np.atleast_2d(pts)
        w = radius**2 - np.einsum("qi,qi->q", pts, pts)
        return w[:, None] * (c0[None, :] + pts @ c1.T)

    return u_fn
