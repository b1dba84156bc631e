"""Chart geometry: metric, magnetic 2-form, Lorentz force, boundary data.

The computational manifold is a single chart domain in R^n (n >= 3): a
Riemannian metric g, a closed magnetic 2-form Omega, and a boundary defining
function rho with rho > 0 inside, rho = 0 on the boundary.  The Lorentz force
is the bundle map E with

    <E_z(v), w>_g = Omega_z(v, w),   Omega_z(v, w) = Omega_ij(z) v^i w^j,

which fixes the orientation convention used throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import NotOnBoundary, SingularMetric

_EIG_FLOOR = 1e-10
_FD_REL_STEP = 1e-5
_BOUNDARY_TOL = 1e-8


@dataclass(frozen=True)
class ChartGeometry:
    """Single-chart Riemannian domain with a magnetic 2-form.

    All callables take one point ``z`` of shape (dim,).  ``metric_derivs``
    (optional) returns ``d[k, i, j] = d g_ij / d z_k``; when absent, central
    finite differences with relative step 1e-5 are used.  The same applies to
    ``magnetic_derivs`` and ``boundary_grad``.
    """

    dim: int
    metric: Callable
    magnetic: Callable
    boundary_fn: Callable
    bbox: np.ndarray
    metric_derivs: Optional[Callable] = None
    magnetic_derivs: Optional[Callable] = None
    boundary_grad: Optional[Callable] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 3:
            raise ValueError("chart dimension must be >= 3")
        object.__setattr__(self, "bbox", np.asarray(self.bbox, dtype=float))

    # -- basic evaluations ---------------------------------------------------

    def g(self, z) -> np.ndarray:
        return np.asarray(self.metric(np.asarray(z, dtype=float)), dtype=float)

    def ginv(self, z) -> np.ndarray:
        g = self.g(z)
        w = np.linalg.eigvalsh(g)
        if w.min() < _EIG_FLOOR:
            raise SingularMetric(f"metric eigenvalue {w.min():.3e} below {_EIG_FLOOR}")
        return np.linalg.inv(g)

    def dg(self, z) -> np.ndarray:
        """d g_ij / d z_k, indexed [k, i, j]."""
        z = np.asarray(z, dtype=float)
        if self.metric_derivs is not None:
            return np.asarray(self.metric_derivs(z), dtype=float)
        return _fd_jacobian(self.metric, z, (self.dim, self.dim))

    def Omega(self, z) -> np.ndarray:
        return np.asarray(self.magnetic(np.asarray(z, dtype=float)), dtype=float)

    def dOmega(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.magnetic_derivs is not None:
            return np.asarray(self.magnetic_derivs(z), dtype=float)
        return _fd_jacobian(self.magnetic, z, (self.dim, self.dim))

    def rho(self, z) -> float:
        return float(self.boundary_fn(np.asarray(z, dtype=float)))

    def grad_rho(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.boundary_grad is not None:
            return np.asarray(self.boundary_grad(z), dtype=float)
        return _fd_gradient(self.boundary_fn, z)

    def norm(self, z, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(v @ self.g(z) @ v))

    def inner(self, z, v, w) -> float:
        return float(np.asarray(v) @ self.g(z) @ np.asarray(w))

    def inside_bbox(self, z) -> bool:
        z = np.asarray(z)
        return bool(np.all(z >= self.bbox[:, 0]) and np.all(z <= self.bbox[:, 1]))

    def with_zero_magnetic(self) -> "ChartGeometry":
        n = self.dim
        zero = np.zeros((n, n))
        dzero = np.zeros((n, n, n))
        return replace(self, magnetic=lambda z: zero, magnetic_derivs=lambda z: dzero,
                       meta={**self.meta, "magnetic": "zero"})


@dataclass(frozen=True)
class BoundaryFrame:
    """A boundary point with inward unit normal and a g-orthonormal tangent basis."""

    z: np.ndarray
    nu: np.ndarray
    tangent: np.ndarray  # (dim-1, dim), rows g-orthonormal and g-orthogonal to nu


def _fd_gradient(fn, z, rel_step=_FD_REL_STEP):
    n = z.size
    out = np.zeros(n)
    for k in range(n):
        h = rel_step * (1.0 + abs(z[k]))
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        out[k] = (float(fn(zp)) - float(fn(zm))) / (2 * h)
    return out


def _fd_jacobian(fn, z, out_shape, rel_step=_FD_REL_STEP):
    n = z.size
    out = np.zeros((n,) + out_shape)
    for k in range(n):
        h = rel_step * (1.0 + abs(z[k]))
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        out[k] = (np.asarray(fn(zp), dtype=float) - np.asarray(fn(zm), dtype=float)) / (2 * h)
    return out


# -- core operations ---------------------------------------------------------


def christoffel(geom: ChartGeometry, z) -> np.ndarray:
    """Christoffel symbols Gamma^i_{jk} of the Levi-Civita connection at z."""
    ginv = geom.ginv(z)
    dg = geom.dg(z)
    # T_{l j k} = d_j g_{l k} + d_k g_{l j} - d_l g_{j k}
    T = np.einsum("jlk->ljk", dg) + np.einsum("klj->ljk", dg) - dg
    return 0.5 * np.einsum("il,ljk->ijk", ginv, T)


def lorentz_matrix(geom: ChartGeometry, z) -> np.ndarray:
    """Matrix E with (E v)^j = E^j_i v^i = g^{jk} Omega_{ik} v^i."""
    return geom.ginv(z) @ geom.Omega(z).T


def lorentz(geom: ChartGeometry, z, v) -> np.ndarray:
    """Lorentz force E_z(v): the vector with <E_z(v), w>_g = Omega_z(v, w)."""
    return lorentz_matrix(geom, z) @ np.asarray(v, dtype=float)


def closedness_residual(geom: ChartGeometry, grid_pts, step=None) -> float:
    """Max over points and index triples of the cyclic sum of dOmega.

    The cyclic sum d_i Omega_jk + d_j Omega_ki + d_k Omega_ij vanishes for a
    closed form; finite differencing leaves an O(step^2) residual.  ``step``
    overrides the relative finite-difference step (analytic derivatives, when
    supplied, are ignored in that case so the order can be measured).
    """
    n = geom.dim
    worst = 0.0
    for z in np.atleast_2d(np.asarray(grid_pts, dtype=float)):
        if step is None:
            dO = geom.dOmega(z)
        else:
            dO = _fd_jacobian(geom.magnetic, z, (n, n), rel_step=step)
        for i in range(n):
            for j in range(i + 1, n):
                for k in range(j + 1, n):
                    r = dO[i, j, k] + dO[j, k, i] + dO[k, i, j]
                    worst = max(worst, abs(r))
    return worst


def boundary_frame(geom: ChartGeometry, z) -> BoundaryFrame:
    """Inward unit normal and g-orthonormal tangent basis at a boundary point."""
    z = np.asarray(z, dtype=float)
    if abs(geom.rho(z)) > _BOUNDARY_TOL:
        raise NotOnBoundary(f"|rho(z)| = {abs(geom.rho(z)):.2e} > {_BOUNDARY_TOL}")
    g = geom.g(z)
    grad = geom.ginv(z) @ geom.grad_rho(z)  # g-gradient, points inward (rho > 0 inside)
    nu = grad / np.sqrt(grad @ g @ grad)

    # tangent basis: Gram-Schmidt of coordinate axes against nu in the g-inner product
    cands = sorted(range(geom.dim), key=lambda k: abs(g[k] @ nu))
    basis = [nu]
    tangent = []
    for k in cands:
        e = np.zeros(geom.dim)
        e[k] = 1.0
        for b in basis:
            e = e - (e @ g @ b) * b
        nrm = np.sqrt(e @ g @ e)
        if nrm < 1e-8:
            continue
        e = e / nrm
        basis.append(e)
        tangent.append(e)
        if len(tangent) == geom.dim - 1:
            break
    return BoundaryFrame(z=z, nu=nu, tangent=np.array(tangent))


def geodesic_rhs(geom: ChartGeometry, state: np.ndarray, magnetic: bool = True) -> np.ndarray:
    """Right-hand side of the (magnetic) geodesic ODE on states (z, v)."""
    n = geom.dim
    z, v = state[:n], state[n:]
    Gamma = christoffel(geom, z)
    acc = -np.einsum("ijk,j,k->i", Gamma, v, v)
    if magnetic:
        acc = acc + lorentz_matrix(geom, z) @ v
    return np.concatenate([v, acc])


def flow_probe(geom: ChartGeometry, z, v, t: float, nsteps: int = 8,
               magnetic: bool = True) -> np.ndarray:
    """Fixed-step RK4 evaluation of the flow at time t; no boundary handling."""
    y = np.concatenate([np.asarray(z, dtype=float), np.asarray(v, dtype=float)])
    h = t / nsteps
    for _ in range(nsteps):
        k1 = geodesic_rhs(geom, y, magnetic)
        k2 = geodesic_rhs(geom, y + 0.5 * h * k1, magnetic)
        k3 = geodesic_rhs(geom, y + 0.5 * h * k2, magnetic)
        k4 = geodesic_rhs(geom, y + h * k3, magnetic)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def second_derivative_along_flow(geom: ChartGeometry, fn, z, v, h: float = 1e-2,
                                 magnetic: bool = True) -> float:
    """Richardson-extrapolated d^2/dt^2 fn(gamma(t)) at t=0 along the flow."""
    n = geom.dim

    def val(t):
        if t == 0.0:
            return float(fn(np.asarray(z, dtype=float)))
        y = flow_probe(geom, z, v, t, magnetic=magnetic)
        return float(fn(y[:n]))

    f0 = val(0.0)

    def second_diff(hh):
        return (val(hh) - 2 * f0 + val(-hh)) / hh**2

    d1 = second_diff(h)
    d2 = second_diff(h / 2)
    return (4 * d2 - d1) / 3.0


def second_fundamental_form(geom: ChartGeometry, frame: BoundaryFrame, v) -> float:
    """Second fundamental form Lambda(z, v) of the boundary, inward normal.

    Computed as -(d^2/dt^2) rho(sigma(t)) / |grad rho|_g along the ordinary
    geodesic sigma with sigma(0) = z, sigma'(0) = v; positive for boundaries
    convex with respect to the inward normal.
    """
    z = frame.z
    if abs(geom.rho(z)) > _BOUNDARY_TOL:
        raise NotOnBoundary(f"|rho(z)| = {abs(geom.rho(z)):.2e} > {_BOUNDARY_TOL}")
    v = np.asarray(v, dtype=float)
    g = geom.g(z)
    if abs(v @ g @ v - 1.0) > 1e-6 or abs(v @ g @ frame.nu) > 1e-6:
        raise ValueError("v must be a unit vector tangent to the boundary")
    grad = geom.ginv(z) @ geom.grad_rho(z)
    ngrad = np.sqrt(grad @ g @ grad)
    d2 = second_derivative_along_flow(geom, geom.boundary_fn, z, v, magnetic=False)
    return -d2 / ngrad


# -- builtin geometry specifications ----------------------------------------


def _sympy_point_fn(exprs, symbols, shape):
    import sympy as sp

    f = sp.lambdify(symbols, exprs, "numpy")

    def fn(z):
        return np.asarray(f(*z), dtype=float).reshape(shape)

    return fn


def make_geometry(spec: dict) -> ChartGeometry:
    """Build a ChartGeometry from a structured configuration.

    Builtin metrics: ``euclidean``, ``conformal:<c-expr>`` (g = c^2 I),
    ``radial:<c-expr>`` (sound-speed form, g = c^-2 I).  Builtin magnetic
    fields: ``zero``, ``constant:<B>`` (Omega = B dz1^dz2),
    ``potential:<A1>,...,<An>`` (Omega = dA, differentiated symbolically).
    Boundaries: ``ball:<r>`` (rho = r - |z|), ``halfspace`` (rho = z1),
    ``expression:<rho-expr>``.  Expressions use z1..zn and r = |z|.
    """
    import sympy as sp

    n = int(spec.get("dim", 3))
    zsyms = sp.symbols(f"z1:{n + 1}")
    rsym = sp.sqrt(sum(s**2 for s in zsyms))
    local = {f"z{k + 1}": zsyms[k] for k in range(n)}
    local["r"] = rsym

    def parse(expr):
        return sp.sympify(expr, locals=local)

    # metric
    meta = dict(spec)
    mspec = spec.get("metric", "euclidean")
    eye = np.eye(n)
    dzero = np.zeros((n, n, n))
    if mspec == "euclidean":
        metric = lambda z: eye
        metric_derivs = lambda z: dzero
        meta["constant_metric"] = True
    elif mspec.startswith(("conformal:", "radial:")):
        kind, expr = mspec.split(":", 1)
        c = parse(expr)
        factor = c**2 if kind == "conformal" else c**-2
        gmat = sp.Matrix([[factor if i == j else 0 for j in range(n)] for i in range(n)])
        dmat = [[[sp.diff(gmat[i, j], zsyms[k]) for j in range(n)] for i in range(n)]
                for k in range(n)]
        metric = _sympy_point_fn(gmat, zsyms, (n, n))
        metric_derivs = _sympy_point_fn(dmat, zsyms, (n, n, n))
    else:
        raise ValueError(f"unknown metric spec {mspec!r}")

    # magnetic field
    bspec = spec.get("magnetic", "zero")
    zero = np.zeros((n, n))
    if bspec == "zero":
        magnetic = lambda z: zero
        magnetic_derivs = lambda z: dzero
        meta["constant_magnetic"] = True
    elif bspec.startswith("constant:"):
        B = float(bspec.split(":", 1)[1])
        Om = np.zeros((n, n))
        Om[0, 1], Om[1, 0] = B, -B
        magnetic = lambda z: Om
        magnetic_derivs = lambda z: dzero
        meta["constant_magnetic"] = True
    elif bspec.startswith("potential:"):
        comps = [parse(e) for e in bspec.split(":", 1)[1].split(",")]
        if len(comps) != n:
            raise ValueError("potential needs one component per dimension")
        Om = sp.Matrix([[sp.diff(comps[j], zsyms[i]) - sp.diff(comps[i], zsyms[j])
                         for j in range(n)] for i in range(n)])
        dOm = [[[sp.diff(Om[i, j], zsyms[k]) for j in range(n)] for i in range(n)]
               for k in range(n)]
        magnetic = _sympy_point_fn(Om, zsyms, (n, n))
        magnetic_derivs = _sympy_point_fn(dOm, zsyms, (n, n, n))
    else:
        raise ValueError(f"unknown magnetic spec {bspec!r}")

    # boundary
    dspec = spec.get("boundary", "ball:1.0")
    if dspec.startswith("ball:"):
        radius = float(dspec.split(":", 1)[1])
        boundary_fn = lambda z: radius - float(np.linalg.norm(z))
        boundary_grad = lambda z: -np.asarray(z) / max(float(np.linalg.norm(z)), 1e-300)
        default_bbox = np.array([[-1.05 * radius, 1.05 * radius]] * n)
    elif dspec == "halfspace":
        boundary_fn = lambda z: float(z[0])
        e0 = np.zeros(n)
        e0[0] = 1.0
        boundary_grad = lambda z: e0
        default_bbox = np.array([[-1.0, 1.0]] * n)
    elif dspec.startswith("expression:"):
        expr = parse(dspec.split(":", 1)[1])
        gexpr = [sp.diff(expr, s) for s in zsyms]
        boundary_fn = _sympy_point_fn(expr, zsyms, ())
        boundary_grad = _sympy_point_fn(gexpr, zsyms, (n,))
        default_bbox = np.array([[-1.0, 1.0]] * n)
    else:
        raise ValueError(f"unknown boundary spec {dspec!r}")

    bbox = np.asarray(spec["bbox"], dtype=float) if "bbox" in spec else default_bbox
    return ChartGeometry(dim=n, metric=metric, metric_derivs=metric_derivs,
                         magnetic=magnetic, magnetic_derivs=magnetic_derivs,
                         boundary_fn=boundary_fn, boundary_grad=boundary_grad,
                         bbox=bbox, meta=meta)
