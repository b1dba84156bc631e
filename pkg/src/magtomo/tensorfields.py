"""Scalar fields, 1-forms, symmetric 2-tensors, pairs, and the gauge maps.

Fields live on a regular grid over the chart box and evaluate by multilinear
interpolation, extended by zero outside the box.  A field may additionally
carry an exact callable (batch signature ``pts (Q, n) -> components``); when
present it is used for evaluation, which is what the high-accuracy kernel
tests rely on.  Gauge operators differentiate on the grid (derivative first,
interpolate second) and propagate exact callables by pointwise central
differences with relative step 1e-5.

Sign conventions (pinned by the generator identity, see ``gmu_apply``):

* the Lorentz force on 1-forms is the metric conjugate of the force on
  vectors, (E(u))_i = Omega_ki g^kl u_l, so that E(u)(v) = -u(E(v));
* the coupled gauge map is gauge_hb(u, p) = [d^s u, -E(u) + dp], and
  evaluate(gauge_hb(u, p), z, v) = G_mu(u_i v^i + p)(z, v) on |v|_g = 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import geometry as geo
from .grids import Grid, sym_index_pairs, sym_pair_weights, sym_storage_size

_FD_REL = 1e-5


class _Field:
    """Common storage: grid values (N, m) plus an optional exact callable."""

    ncomp: int = 1

    def __init__(self, grid: Grid, values: np.ndarray, exact: Optional[Callable] = None):
        self.grid = grid
        self.values = np.asarray(values, dtype=float).reshape(grid.n_nodes, self.ncomp)
        self.exact = exact

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable, keep_exact: bool = True):
        """Sample a batch callable on the grid; optionally keep it for evaluation."""
        vals = np.asarray(fn(grid.points()), dtype=float)
        return cls(grid, vals, exact=fn if keep_exact else None)

    @classmethod
    def zeros(cls, grid: Grid):
        return cls(grid, np.zeros((grid.n_nodes, cls.ncomp)))

    def at(self, pts) -> np.ndarray:
        """Component values at points (Q, n); zero outside the grid box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.exact is not None:
            out = np.asarray(self.exact(pts), dtype=float).reshape(pts.shape[0], self.ncomp)
        else:
            out = self.grid.interpolate(self.values, pts).reshape(pts.shape[0], self.ncomp)
        return out

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def _binary(self, other, a=1.0):
        if isinstance(other, _Field):
            vals = self.values + a * other.values
            ex = None
            if self.exact is not None and other.exact is not None:
                se, oe = self.exact, other.exact
                ex = lambda pts: np.asarray(se(pts)) + a * np.asarray(oe(pts))
            return type(self)(self.grid, vals, exact=ex)
        raise TypeError

    def __add__(self, other):
        return self._binary(other, 1.0)

    def __sub__(self, other):
        return self._binary(other, -1.0)

    def __rmul__(self, a):
        ex = None
        if self.exact is not None:
            se = self.exact
            ex = lambda pts: a * np.asarray(se(pts))
        return type(self)(self.grid, a * self.values, exact=ex)


class ScalarField(_Field):
    ncomp = 1

    def at_scalar(self, pts) -> np.ndarray:
        return self.at(pts)[:, 0]


class OneForm(_Field):
    def __init__(self, grid, values, exact=None):
        self.ncomp = grid.ndim
        super().__init__(grid, values, exact)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.n_nodes, grid.ndim)))

    def pair(self, pts, vs) -> np.ndarray:
        """u_i(z) v^i for batched points and vectors."""
        return np.einsum("qi,qi->q", self.at(pts), np.atleast_2d(vs))


class SymTwoTensor(_Field):
    def __init__(self, grid, values, exact=None):
        self.ncomp = sym_storage_size(grid.ndim)
        super().__init__(grid, values, exact)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.n_nodes, sym_storage_size(grid.ndim))))

    def pair(self, pts, vs) -> np.ndarray:
        """h_ij(z) v^i v^j with upper-triangular storage."""
        vs = np.atleast_2d(vs)
        comps = self.at(pts)
        w = sym_pair_weights(self.grid.ndim)
        out = np.zeros(comps.shape[0])
        for k, (i, j) in enumerate(sym_index_pairs(self.grid.ndim)):
            out += w[k] * comps[:, k] * vs[:, i] * vs[:, j]
        return out


@dataclass
class TensorPair:
    """Coupled unknown: [beta, phi] (kind 'bf') or [h, beta] (kind 'hb')."""

    kind: str
    beta: OneForm
    phi: Optional[ScalarField] = None
    h: Optional[SymTwoTensor] = None

    def __post_init__(self):
        if self.kind == "bf":
            if self.phi is None:
                raise ValueError("bf pair needs phi")
        elif self.kind == "hb":
            if self.h is None:
                raise ValueError("hb pair needs h")
        else:
            raise ValueError(f"unknown pair kind {self.kind!r}")

    @property
    def grid(self) -> Grid:
        return self.beta.grid

    @classmethod
    def zeros(cls, grid: Grid, kind: str) -> "TensorPair":
        if kind == "bf":
            return cls("bf", OneForm.zeros(grid), phi=ScalarField.zeros(grid))
        return cls("hb", OneForm.zeros(grid), h=SymTwoTensor.zeros(grid))

    def flat(self) -> np.ndarray:
        """Node-major dof vector; component order (h|beta) or (beta|phi)."""
        if self.kind == "bf":
            comps = np.concatenate([self.beta.values, self.phi.values], axis=1)
        else:
            comps = np.concatenate([self.h.values, self.beta.values], axis=1)
        return comps.ravel()

    @classmethod
    def from_flat(cls, grid: Grid, kind: str, vec: np.ndarray) -> "TensorPair":
        n = grid.ndim
        m = sym_storage_size(n)
        if kind == "bf":
            comps = np.asarray(vec, dtype=float).reshape(grid.n_nodes, n + 1)
            return cls("bf", OneForm(grid, comps[:, :n]),
                       phi=ScalarField(grid, comps[:, n:]))
        comps = np.asarray(vec, dtype=float).reshape(grid.n_nodes, m + n)
        return cls("hb", OneForm(grid, comps[:, m:]),
                   h=SymTwoTensor(grid, comps[:, :m]))

    def __add__(self, other):
        if self.kind != other.kind:
            raise ValueError("pair kinds differ")
        if self.kind == "bf":
            return TensorPair("bf", self.beta + other.beta, phi=self.phi + other.phi)
        return TensorPair("hb", self.beta + other.beta, h=self.h + other.h)

    def __rmul__(self, a):
        if self.kind == "bf":
            return TensorPair("bf", a * self.beta, phi=a * self.phi)
        return TensorPair("hb", a * self.beta, h=a * self.h)


@dataclass
class FiberPolynomial:
    """psi(z, v) = h_ij(z) v^i v^j + u_i(z) v^i + p(z), degree <= 2 in v."""

    p: Optional[ScalarField] = None
    u: Optional[OneForm] = None
    h: Optional[SymTwoTensor] = None

    def __post_init__(self):
        if self.p is None and self.u is None and self.h is None:
            raise ValueError("empty fiber polynomial")

    @property
    def grid(self) -> Grid:
        for f in (self.p, self.u, self.h):
            if f is not None:
                return f.grid
        raise AttributeError

    def at(self, pts, vs) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vs = np.atleast_2d(np.asarray(vs, dtype=float))
        out = np.zeros(pts.shape[0])
        if self.h is not None:
            out += self.h.pair(pts, vs)
        if self.u is not None:
            out += self.u.pair(pts, vs)
        if self.p is not None:
            out += self.p.at_scalar(pts)
        return out


def evaluate(f, z, v) -> np.ndarray | float:
    """Fiberwise evaluation f(z, v); batch when z, v are (Q, n)."""
    z = np.asarray(z, dtype=float)
    scalar_in = z.ndim == 1
    pts = np.atleast_2d(z)
    vs = np.atleast_2d(np.asarray(v, dtype=float))
    if isinstance(f, FiberPolynomial):
        out = f.at(pts, vs)
    elif isinstance(f, TensorPair):
        if f.kind == "bf":
            out = f.beta.pair(pts, vs) + f.phi.at_scalar(pts)
        else:
            out = f.h.pair(pts, vs) + f.beta.pair(pts, vs)
    else:
        raise TypeError(f"cannot evaluate {type(f)!r}")
    return float(out[0]) if scalar_in else out


# -- derivative and gauge operators ------------------------------------------


def _grid_partials(field: _Field) -> np.ndarray:
    """All partial derivatives on the grid: out[:, k, c] = d_k comp_c."""
    grid = field.grid
    out = np.zeros((grid.n_nodes, grid.ndim, field.ncomp))
    for k in range(grid.ndim):
        D = grid.diff_matrix(k)
        out[:, k, :] = D @ field.values
    return out


def _exact_partials(fn_batch):
    def dfn(pts, k):
        pts = np.atleast_2d(pts)
        h = (_FD_REL * (1.0 + np.abs(pts[:, k])))
        e = np.zeros_like(pts)
        e[:, k] = 1.0
        vp = np.asarray(fn_batch(pts + h[:, None] * e), dtype=float)
        vm = np.asarray(fn_batch(pts - h[:, None] * e), dtype=float)
        bshape = (-1,) + (1,) * (vp.ndim - 1)
        return (vp - vm) / (2.0 * h.reshape(bshape))

    return dfn


def d_scalar(p: ScalarField) -> OneForm:
    """Coordinate gradient dp: central differences, one-sided at the box edges."""
    grid = p.grid
    vals = _grid_partials(p)[:, :, 0]
    ex = None
    if p.exact is not None:
        dfn = _exact_partials(p.exact)
        ex = lambda pts: np.stack([dfn(pts, k).reshape(-1) for k in range(grid.ndim)],
                                  axis=1)
    return OneForm(grid, vals, exact=ex)


def christoffel_on_grid(geom: geo.ChartGeometry, grid: Grid) -> np.ndarray:
    """Gamma^i_{jk} at every node, shape (N, n, n, n)."""
    pts = grid.points()
    return np.array([geo.christoffel(geom, z) for z in pts])


def d_sym(geom: geo.ChartGeometry, u: OneForm,
          Gamma_nodes: Optional[np.ndarray] = None) -> SymTwoTensor:
    """Symmetric covariant derivative (d^s u)_ij = (grad_i u_j + grad_j u_i)/2."""
    grid = u.grid
    n = grid.ndim
    du = _grid_partials(u)  # (N, k, j) = d_k u_j
    if Gamma_nodes is None:
        Gamma_nodes = christoffel_on_grid(geom, grid)
    corr = np.einsum("qkij,qk->qij", Gamma_nodes, u.values)  # Gamma^k_ij u_k
    full = 0.5 * (du + du.transpose(0, 2, 1)) - corr
    pairs = sym_index_pairs(n)
    vals = np.stack([full[:, i, j] for (i, j) in pairs], axis=1)
    ex = None
    if u.exact is not None:
        ue = u.exact
        dfn = _exact_partials(ue)

        def ex(pts):
            pts = np.atleast_2d(pts)
            du_p = np.stack([dfn(pts, k) for k in range(n)], axis=1)  # (Q, k, j)
            G = np.array([geo.christoffel(geom, z) for z in pts])
            corr_p = np.einsum("qkij,qk->qij", G, np.asarray(ue(pts), dtype=float))
            fl = 0.5 * (du_p + du_p.transpose(0, 2, 1)) - corr_p
            return np.stack([fl[:, i, j] for (i, j) in pairs], axis=1)

    return SymTwoTensor(grid, vals, exact=ex)


def _lorentz_form_matrix(geom: geo.ChartGeometry, z) -> np.ndarray:
    """Matrix A with (A u)_i = Omega_ki g^kl u_l, the action of E on 1-forms."""
    return geom.Omega(z).T @ geom.ginv(z)


def lorentz_on_oneform(geom: geo.ChartGeometry, u: OneForm) -> OneForm:
    """1-form E(u) with E(u)(v) = -u(E(v)); metric conjugate of the force."""
    grid = u.grid
    pts = grid.points()
    mats = np.array([_lorentz_form_matrix(geom, z) for z in pts])
    vals = np.einsum("qij,qj->qi", mats, u.values)
    ex = None
    if u.exact is not None:
        ue = u.exact

        def ex(p):
            p = np.atleast_2d(p)
            m = np.array([_lorentz_form_matrix(geom, z) for z in p])
            return np.einsum("qij,qj->qi", m, np.asarray(ue(p), dtype=float))

    return OneForm(grid, vals, exact=ex)


def gauge_bf(p: ScalarField) -> TensorPair:
    """Gauge pair [dp, 0]; annihilated by the ray transform when p|dM = 0."""
    return TensorPair("bf", d_scalar(p), phi=ScalarField.zeros(p.grid))


def gauge_hb(geom: geo.ChartGeometry, u: OneForm, p: ScalarField,
             Gamma_nodes: Optional[np.ndarray] = None) -> TensorPair:
    """Gauge pair [d^s u, -E(u) + dp] = G_mu(u_i v^i + p) on the sphere bundle."""
    minus_eu = -1.0 * lorentz_on_oneform(geom, u)
    return TensorPair("hb", minus_eu + d_scalar(p), h=d_sym(geom, u, Gamma_nodes))


def gmu_apply(geom: geo.ChartGeometry, psi: FiberPolynomial, z, v) -> float:
    """Generator of the magnetic flow applied to a fiber polynomial at (z, v).

    G_mu = v^i d/dz^i - Gamma^i_jk v^j v^k d/dv^i + E^j_i v^i d/dv^j; the
    z-derivative is a central difference of psi(. , v) along v.
    """
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    h = _FD_REL * (1.0 + float(np.linalg.norm(z)))
    pts = np.stack([z + h * v, z - h * v])
    vv = np.stack([v, v])
    horiz = float((psi.at(pts, vv)[0] - psi.at(pts, vv)[1]) / (2 * h))

    dpsi_dv = np.zeros(geom.dim)
    if psi.u is not None:
        dpsi_dv += psi.u.at(z[None, :])[0]
    if psi.h is not None:
        comps = psi.h.at(z[None, :])[0]
        H = np.zeros((geom.dim, geom.dim))
        for k, (i, j) in enumerate(sym_index_pairs(geom.dim)):
            H[i, j] = comps[k]
            H[j, i] = comps[k]
        dpsi_dv += 2.0 * H @ v
    Gamma = geo.christoffel(geom, z)
    vert = -np.einsum("ijk,j,k->i", Gamma, v, v) + geo.lorentz(geom, z, v)
    return horiz + float(vert @ dpsi_dv)


# -- persistence ---------------------------------------------------------------


def _component_names(kind: str, n: int):
    pairs = sym_index_pairs(n)
    if kind == "bf":
        return [f"beta{i + 1}" for i in range(n)] + ["phi"]
    return [f"h{i + 1}{j + 1}" for (i, j) in pairs] + [f"beta{i + 1}" for i in range(n)]


def save_pair(pair: TensorPair, directory, name: str = "field") -> Path:
    """Write a pair as a JSON manifest plus one CSV of flattened grid values."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grid = pair.grid
    names = _component_names(pair.kind, grid.ndim)
    manifest = {
        "kind": pair.kind,
        "grid": {"lo": grid.lo.tolist(), "hi": grid.hi.tolist(),
                 "shape": list(grid.shape)},
        "component_order": names,
        "csv": f"{name}.csv",
    }
    mpath = directory / f"{name}.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    comps = pair.flat().reshape(grid.n_nodes, len(names))
    data = np.hstack([grid.points(), comps])
    header = ",".join([f"z{k + 1}" for k in range(grid.ndim)] + names)
    np.savetxt(directory / f"{name}.csv", data, delimiter=",", header=header,
               comments="", fmt="%.17g")
    return mpath


def load_pair(manifest_path) -> TensorPair:
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    grid = Grid(np.array(man["grid"]["lo"]), np.array(man["grid"]["hi"]),
                tuple(man["grid"]["shape"]))
    data = np.loadtxt(manifest_path.parent / man["csv"], delimiter=",", skiprows=1)
    comps = data[:, grid.ndim:]
    return TensorPair.from_flat(grid, man["kind"], comps.ravel())
