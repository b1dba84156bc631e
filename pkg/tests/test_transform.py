import numpy as np
import pytest

from magtomo import flow, tensorfields as tf
from magtomo.errors import TrappedPath
from magtomo.grids import Grid
from magtomo.transform import (family_table, ray_transform, simpson_weights,
                               transform_family, transform_matrix)

from conftest import (constant_b_geom, random_boundary_vanishing_oneform,
                      random_boundary_vanishing_potential)


@pytest.fixture(scope="module")
def grid():
    return Grid(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]), (17, 17, 17))


@pytest.fixture(scope="module")
def family(ball_geom_b):
    return flow.olocal_family(ball_geom_b, np.array([0.0, 0.0, 1.0]), c=0.2,
                              eps=0.3, n_y=2, n_lambda=3, n_omega=6, n_x=3,
                              step_ctl=flow.StepControl(fixed_step=0.02))


def test_simpson_weights_match_scipy():
    from scipy.integrate import simpson
    rng = np.random.default_rng(0)
    t = np.sort(rng.uniform(0, 1, 21))
    y = np.sin(3 * t) + t**2
    assert simpson_weights(t) @ y == pytest.approx(simpson(y, x=t), rel=1e-12)


def test_chord_length_oracle(ball_geom, grid):
    ones = tf.TensorPair("bf", tf.OneForm.zeros(grid),
                         phi=tf.ScalarField.from_function(grid, lambda p: np.ones(len(p))))
    start = flow.PhasePoint(np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    path = flow.integrate(ball_geom, start, (-2.0, 2.0), flow.StepControl(tol=1e-10))
    assert ray_transform(ones, path) == pytest.approx(2.0, abs=1e-8)


def test_quadrature_convergence_order(ball_geom, grid):
    # non-constant integrand along the diameter chord, exact value known
    phi = tf.ScalarField.from_function(grid, lambda p: np.cos(2.0 * p[:, 2]))
    f = tf.TensorPair("bf", tf.OneForm.zeros(grid), phi=phi)
    exact = np.sin(2.0)  # integral of cos(2 t) over (-1, 1)
    errs = []
    for h in (0.1, 0.05):
        start = flow.PhasePoint(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        path = flow.integrate(ball_geom, start, (-2.0, 2.0),
                              flow.StepControl(fixed_step=h))
        errs.append(abs(ray_transform(f, path) - exact))
    assert errs[0] / errs[1] > 10.0  # ~16x for 4th order


def test_gauge_bf_annihilated(ball_geom_b, family, grid):
    rng = np.random.default_rng(1)
    p = tf.ScalarField.from_function(grid, random_boundary_vanishing_potential(rng))
    g = tf.gauge_bf(p)
    vals = transform_family(g, family)
    norm = max(path.length for _, path in family)
    assert np.abs(vals).max() <= 1e-7 * max(1.0, norm)


def test_gauge_hb_annihilated(ball_geom_b, family, grid):
    rng = np.random.default_rng(2)
    u = tf.OneForm.from_function(grid, random_boundary_vanishing_oneform(rng))
    p = tf.ScalarField.from_function(grid, random_boundary_vanishing_potential(rng))
    g = tf.gauge_hb(ball_geom_b, u, p)
    vals = transform_family(g, family)
    assert np.abs(vals).max() <= 1e-7


def test_transform_family_zero_and_linearity(family, grid):
    zero = tf.TensorPair.zeros(grid, "bf")
    assert np.abs(transform_family(zero, family)).max() == 0.0

    rng = np.random.default_rng(3)
    f1 = tf.TensorPair("bf", tf.OneForm(grid, rng.normal(size=(grid.n_nodes, 3))),
                       phi=tf.ScalarField(grid, rng.normal(size=grid.n_nodes)))
    f2 = tf.TensorPair("bf", tf.OneForm(grid, rng.normal(size=(grid.n_nodes, 3))),
                       phi=tf.ScalarField(grid, rng.normal(size=grid.n_nodes)))
    v12 = transform_family(1.7 * f1 + f2, family)
    v1 = transform_family(f1, family)
    v2 = transform_family(f2, family)
    assert np.abs(v12 - (1.7 * v1 + v2)).max() < 1e-10 * max(1, np.abs(v12).max())


def test_transform_matrix_consistency(family, grid, ball_geom_b):
    # matrix rows reproduce ray_transform of the interpolated pair
    rng = np.random.default_rng(4)
    f = tf.TensorPair("bf", tf.OneForm(grid, rng.normal(size=(grid.n_nodes, 3))),
                      phi=tf.ScalarField(grid, rng.normal(size=grid.n_nodes)))
    T = transform_matrix(family, grid, "bf")
    direct = transform_family(f, family)
    assert np.abs(T @ f.flat() - direct).max() < 1e-10 * max(1, np.abs(direct).max())


def test_transform_matrix_hb_consistency(family, grid):
    rng = np.random.default_rng(5)
    f = tf.TensorPair("hb", tf.OneForm(grid, rng.normal(size=(grid.n_nodes, 3))),
                      h=tf.SymTwoTensor(grid, rng.normal(size=(grid.n_nodes, 6))))
    T = transform_matrix(family, grid, "hb")
    direct = transform_family(f, family)
    assert np.abs(T @ f.flat() - direct).max() < 1e-10 * max(1, np.abs(direct).max())


def test_trapped_path_raises(grid):
    geom = constant_b_geom(3.0)  # interior circular orbit
    start = flow.PhasePoint(np.zeros(3), np.array([1.0, 0.0, 0.0]))
    path = flow.integrate(geom, start, (0.0, 10.0), flow.StepControl(tol=1e-8))
    assert path.trapped_flag
    ones = tf.TensorPair("bf", tf.OneForm.zeros(grid),
                         phi=tf.ScalarField.from_function(grid, lambda p: np.ones(len(p))))
    with pytest.raises(TrappedPath):
        ray_transform(ones, path)


def test_family_table_shape(family):
    vals = np.arange(float(len(family)))
    rows = family_table(family, vals)
    assert len(rows) == len(family)
    # ix, iy, ilam, iom, x, y1, y2, lam, omega1, omega2, value
    assert len(rows[0]) == 11
    assert rows[3][-1] == 3.0
