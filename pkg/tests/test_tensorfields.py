import numpy as np
import pytest

from magtomo import tensorfields as tf
from magtomo.grids import Grid

from conftest import (random_boundary_vanishing_oneform,
                      random_boundary_vanishing_potential)


@pytest.fixture(scope="module")
def grid():
    return Grid(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]), (17, 17, 17))


def test_evaluate_constant_phi(grid):
    pair = tf.TensorPair("bf", tf.OneForm.zeros(grid),
                         phi=tf.ScalarField.from_function(grid, lambda p: np.ones(len(p))))
    assert tf.evaluate(pair, np.array([0.1, 0.2, 0.3]), np.array([1.0, 0, 0])) == pytest.approx(1.0)


def test_evaluate_coordinate_pairings(grid):
    beta = tf.OneForm.from_function(grid, lambda p: np.tile([1.0, 0, 0], (len(p), 1)))
    pair = tf.TensorPair("bf", beta, phi=tf.ScalarField.zeros(grid))
    v = np.array([0.6, 0.8, 0.0])
    assert tf.evaluate(pair, np.zeros(3), v) == pytest.approx(0.6)

    hvals = np.zeros(6)
    hvals[0] = 1.0  # h = dz1 x dz1
    h = tf.SymTwoTensor.from_function(grid, lambda p: np.tile(hvals, (len(p), 1)))
    pair2 = tf.TensorPair("hb", tf.OneForm.zeros(grid), h=h)
    assert tf.evaluate(pair2, np.zeros(3), v) == pytest.approx(0.36)


def test_evaluate_zero_outside_box(grid):
    pair = tf.TensorPair("bf", tf.OneForm.zeros(grid),
                         phi=tf.ScalarField.from_function(grid, lambda p: np.ones(len(p)),
                                                          keep_exact=False))
    assert tf.evaluate(pair, np.array([2.0, 0, 0]), np.array([1.0, 0, 0])) == 0.0


def test_d_scalar_linear_exact(grid):
    p = tf.ScalarField.from_function(grid, lambda pts: pts[:, 0], keep_exact=False)
    dp = tf.d_scalar(p)
    k = grid.node_index((8, 8, 8))
    assert np.allclose(dp.values[k], [1.0, 0.0, 0.0], atol=1e-12)


def test_d_scalar_quadratic_exact_at_node(grid):
    # central differences reproduce derivatives of quadratics exactly
    p = tf.ScalarField.from_function(grid, lambda pts: pts[:, 0] ** 2, keep_exact=False)
    dp = tf.d_scalar(p)
    k = grid.node_index((12, 8, 8))  # z1 = 0.5
    assert dp.values[k, 0] == pytest.approx(1.0, abs=1e-12)


def test_d_scalar_second_order():
    errs = []
    for n in (17, 33):
        g = Grid(np.array([-1.0, -1, -1]), np.array([1.0, 1, 1]), (n, n, n))
        p = tf.ScalarField.from_function(g, lambda pts: np.sin(pts[:, 0]), keep_exact=False)
        dp = tf.d_scalar(p)
        interior = g.points()[:, 0]
        exact = np.cos(interior)
        errs.append(np.abs(dp.values[:, 0] - exact).max())
    assert errs[0] / errs[1] > 3.0  # roughly O(h^2)


def test_d_sym_hand_cases(ball_geom, grid):
    u = tf.OneForm.from_function(grid, lambda p: np.tile([1.0, 0, 0], (len(p), 1)),
                                 keep_exact=False)
    ds = tf.d_sym(ball_geom, u)
    assert np.abs(ds.values).max() < 1e-12  # parallel form in flat space

    u2 = tf.OneForm.from_function(
        grid, lambda p: np.stack([p[:, 1], np.zeros(len(p)), np.zeros(len(p))], axis=1),
        keep_exact=False)
    ds2 = tf.d_sym(ball_geom, u2)
    k = grid.node_index((8, 8, 8))
    # storage (11,12,13,22,23,33): only the 12 entry is 1/2
    assert np.allclose(ds2.values[k], [0, 0.5, 0, 0, 0, 0], atol=1e-12)


def test_d_sym_killing_form_vanishes(ball_geom, grid):
    u = tf.OneForm.from_function(
        grid, lambda p: np.stack([-p[:, 1], p[:, 0], np.zeros(len(p))], axis=1),
        keep_exact=False)
    ds = tf.d_sym(ball_geom, u)
    assert np.abs(ds.values).max() < 1e-10


def test_lorentz_on_oneform_conventions(ball_geom, ball_geom_b, grid):
    u = tf.OneForm.from_function(grid, lambda p: np.tile([1.0, 0, 0], (len(p), 1)))
    assert np.abs(tf.lorentz_on_oneform(ball_geom, u).values).max() == 0.0
    geom1 = __import__("magtomo.geometry", fromlist=["make_geometry"]).make_geometry(
        {"dim": 3, "metric": "euclidean", "magnetic": "constant:1.0",
         "boundary": "ball:1.0"})
    Eu = tf.lorentz_on_oneform(geom1, u)
    k = grid.node_index((8, 8, 8))
    assert np.allclose(Eu.values[k], [0.0, 1.0, 0.0], atol=1e-14)  # E(dz1) = dz2


def test_lorentz_on_oneform_antisymmetry(ball_geom_b, grid):
    rng = np.random.default_rng(0)
    u = tf.OneForm.from_function(
        grid, lambda p: np.stack([np.sin(p[:, 0]), p[:, 1] ** 2, p[:, 2]], axis=1))
    Eu = tf.lorentz_on_oneform(ball_geom_b, u)
    pts = rng.uniform(-0.5, 0.5, (20, 3))
    # u(E(u#)) = Omega(u#, u#) = 0: pairing of E(u) with u# vanishes
    uv = u.at(pts)
    vals = np.einsum("qi,qi->q", Eu.at(pts), uv)  # euclidean metric: u# = u
    assert np.abs(vals).max() < 1e-12


def test_gauge_bf_trivial_and_boundary(grid, ball_geom):
    pconst = tf.ScalarField.from_function(grid, lambda p: np.full(len(p), 3.0),
                                          keep_exact=False)
    g = tf.gauge_bf(pconst)
    assert np.abs(g.beta.values).max() < 1e-12
    assert np.abs(g.phi.values).max() == 0.0

    pfun = tf.ScalarField.from_function(
        grid, lambda p: 1.0 - np.einsum("qi,qi->q", p, p), keep_exact=False)
    g2 = tf.gauge_bf(pfun)
    k = grid.node_index((12, 8, 8))  # z = (0.5, 0, 0)
    assert np.allclose(g2.beta.values[k], [-1.0, 0, 0], atol=1e-12)
    # potential vanishes on the boundary sphere by construction
    zb = np.array([0.0, 0.0, 1.0])
    assert abs(pfun.at_scalar(zb[None, :])[0]) < 1e-12


def test_gauge_bf_directional_derivative(grid):
    rng = np.random.default_rng(1)
    p_fn = random_boundary_vanishing_potential(rng)
    p = tf.ScalarField.from_function(grid, p_fn)
    g = tf.gauge_bf(p)
    z = np.array([0.2, -0.1, 0.3])
    v = np.array([0.5, 0.5, np.sqrt(0.5)])
    h = 1e-6
    fd = (p_fn((z + h * v)[None, :])[0] - p_fn((z - h * v)[None, :])[0]) / (2 * h)
    assert tf.evaluate(g, z, v) == pytest.approx(fd, abs=1e-7)


def test_gauge_hb_cases(ball_geom, ball_geom_b, grid):
    rng = np.random.default_rng(2)
    p = tf.ScalarField.from_function(grid, random_boundary_vanishing_potential(rng))
    g = tf.gauge_hb(ball_geom, tf.OneForm.zeros(grid), p)
    assert np.abs(g.h.values).max() < 1e-12  # [0, dp]

    u = tf.OneForm.from_function(
        grid, lambda pts: np.stack([pts[:, 1], np.zeros(len(pts)), np.zeros(len(pts))],
                                   axis=1), keep_exact=False)
    g2 = tf.gauge_hb(ball_geom, u, tf.ScalarField.zeros(grid))
    k = grid.node_index((8, 8, 8))
    assert np.allclose(g2.h.values[k], [0, 0.5, 0, 0, 0, 0], atol=1e-12)
    assert np.abs(g2.beta.values[k]).max() < 1e-12

    u3 = tf.OneForm.from_function(grid, lambda pts: np.tile([1.0, 0, 0], (len(pts), 1)),
                                  keep_exact=False)
    g3 = tf.gauge_hb(ball_geom_b, u3, tf.ScalarField.zeros(grid))
    assert np.abs(g3.h.values).max() < 1e-12
    assert np.abs(g3.beta.values[k]).max() > 0.1  # beta = -E(u) survives


def test_generator_identity(ball_geom_b, grid):
    # gmu_apply(u v + p) = evaluate(gauge_hb(u, p)) pins every sign convention
    rng = np.random.default_rng(3)
    u_fn = random_boundary_vanishing_oneform(rng)
    p_fn = random_boundary_vanishing_potential(rng)
    u = tf.OneForm.from_function(grid, u_fn)
    p = tf.ScalarField.from_function(grid, p_fn)
    g = tf.gauge_hb(ball_geom_b, u, p)
    psi = tf.FiberPolynomial(p=p, u=u)
    for _ in range(10):
        z = rng.uniform(-0.6, 0.6, 3)
        w = rng.normal(size=3)
        v = w / ball_geom_b.norm(z, w)
        lhs = tf.gmu_apply(ball_geom_b, psi, z, v)
        rhs = tf.evaluate(g, z, v)
        assert abs(lhs - rhs) < 1e-7


def test_gmu_scalar_only_is_gradient(ball_geom, grid):
    rng = np.random.default_rng(4)
    p_fn = random_boundary_vanishing_potential(rng)
    p = tf.ScalarField.from_function(grid, p_fn)
    psi = tf.FiberPolynomial(p=p)
    dp = tf.d_scalar(p)
    z = np.array([0.1, 0.3, -0.2])
    v = np.array([0.0, 0.6, 0.8])
    assert tf.gmu_apply(ball_geom, psi, z, v) == pytest.approx(
        float(dp.pair(z[None, :], v[None, :])[0]), abs=1e-7)


def test_gmu_flow_derivative_oracle(ball_geom_b, grid):
    # Richardson-extrapolated central difference of psi along the flow
    from magtomo.geometry import flow_probe

    rng = np.random.default_rng(5)
    u = tf.OneForm.from_function(grid, random_boundary_vanishing_oneform(rng))
    p = tf.ScalarField.from_function(grid, random_boundary_vanishing_potential(rng))
    psi = tf.FiberPolynomial(p=p, u=u)
    z = np.array([0.1, -0.2, 0.4])
    w = rng.normal(size=3)
    v = w / ball_geom_b.norm(z, w)

    def along(t):
        y = flow_probe(ball_geom_b, z, v, t, nsteps=8)
        return psi.at(y[None, :3], y[None, 3:])[0]

    h = 1e-3
    d1 = (along(h) - along(-h)) / (2 * h)
    d2 = (along(h / 2) - along(-h / 2)) / h
    fd = (4 * d2 - d1) / 3
    assert abs(fd - tf.gmu_apply(ball_geom_b, psi, z, v)) < 1e-7


def test_pair_io_roundtrip(tmp_path, grid, ball_geom):
    rng = np.random.default_rng(6)
    u = tf.OneForm.from_function(grid, random_boundary_vanishing_oneform(rng),
                                 keep_exact=False)
    p = tf.ScalarField.from_function(grid, random_boundary_vanishing_potential(rng),
                                     keep_exact=False)
    pair = tf.TensorPair("bf", u, phi=p)
    man = tf.save_pair(pair, tmp_path, name="test_field")
    back = tf.load_pair(man)
    assert back.kind == "bf"
    assert np.allclose(back.flat(), pair.flat(), atol=0, rtol=0)

    h = tf.SymTwoTensor.from_function(
        grid, lambda pts: np.tile(np.arange(6.0), (len(pts), 1)), keep_exact=False)
    pair2 = tf.TensorPair("hb", u, h=h)
    man2 = tf.save_pair(pair2, tmp_path, name="test_field_hb")
    back2 = tf.load_pair(man2)
    assert back2.kind == "hb"
    assert np.allclose(back2.flat(), pair2.flat())


def test_pair_linearity(grid):
    rng = np.random.default_rng(7)
    p1 = tf.TensorPair("bf",
                       tf.OneForm(grid, rng.normal(size=(grid.n_nodes, 3))),
                       phi=tf.ScalarField(grid, rng.normal(size=grid.n_nodes)))
    p2 = tf.TensorPair("bf",
                       tf.OneForm(grid, rng.normal(size=(grid.n_nodes, 3))),
                       phi=tf.ScalarField(grid, rng.normal(size=grid.n_nodes)))
    comb = 2.5 * p1 + p2
    z = np.array([0.3, 0.1, -0.4])
    v = np.array([1.0, 2.0, 0.5])
    assert tf.evaluate(comb, z, v) == pytest.approx(
        2.5 * tf.evaluate(p1, z, v) + tf.evaluate(p2, z, v), rel=1e-12)
