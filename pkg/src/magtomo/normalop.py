"""Localized conjugated normal operators and their principal symbols.

Covers four layers of machinery:

* truncated-Gaussian cutoffs and the exponential conjugation weights;
* the averaging operators J_0, J_1, J_2 over (lambda, omega) and the
  assembled discrete normal operators A_F (pairs 1-form + function) and
  B_F (pairs symmetric 2-tensor + 1-form);
* exact principal symbols of the conjugated gauge operators and the
  closed-form Gaussian-cutoff scattering symbols, evaluated by quadrature
  over the unit sphere of tangent directions;
* numerical ellipticity scans restricted to the gauge kernel, and the
  threshold search for the 2-tensor case.

Component conventions at a frequency (xi, eta): pairs split into normal (x)
and level-set (y) parts; symmetric tensors use the isometric flattening
(off-diagonal entries weighted by sqrt(2)), so conjugate transposition is
adjointness and positivity statements read off Hermitian eigenvalues.

Symbols are normalized as the literal quadratures written here; only
positivity and kernel restrictions are meaningful across operators.  The
direction-dependent Gaussian width uses alpha in the t^2-Taylor-coefficient
normalization (half the second time derivative of x along the flow).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad
from scipy.linalg import null_space

from .errors import ConjugationOverflow, NotFound
from .flow import DepthChart, Family
from .grids import DiscreteOperator, Grid, component_count, sym_flat, sym_storage_size
from .transform import simpson_weights, transform_matrix

_EXP_GUARD = 700.0


# -- cutoff and conjugation ----------------------------------------------------


@dataclass
class Cutoff:
    """Smooth, even, nonnegative, compactly supported cutoff.

    A Gaussian of width mu (variance) truncated at s_max with a C-infinity
    taper on [taper_start, s_max].
    """

    mu: float
    s_max: float
    taper_start: float

    @classmethod
    def gaussian_for(cls, F: float, alpha_ref: float) -> "Cutoff":
        """Width mu = alpha_ref / F, support radius 4 sqrt(mu), taper from 3 sqrt(mu)."""
        mu = alpha_ref / F
        return cls(mu=mu, s_max=4.0 * math.sqrt(mu), taper_start=3.0 * math.sqrt(mu))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = np.exp(-np.minimum(s * s / (2.0 * self.mu), _EXP_GUARD))
        r = np.abs(s)
        t = np.clip((self.s_max - r) / max(self.s_max - self.taper_start, 1e-300),
                    0.0, 1.0)
        out = out * _smooth01(t)
        return out if out.ndim else float(out)

    def l1_norm(self) -> float:
        val, _ = quad(lambda s: float(self(s)), -self.s_max, self.s_max, limit=200)
        return val


def _smooth01(t):
    """C-infinity transition: 0 at t<=0, 1 at t>=1."""
    t = np.asarray(t, dtype=float)
    def bump(u):
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(u > 0, np.exp(-1.0 / np.maximum(u, 1e-300)), 0.0)
    a = bump(t)
    b = bump(1.0 - t)
    return a / (a + b)


@dataclass
class ConjugationWeight:
    """Exponential weights e^{+-F/x} and the order-mixing diagonal W.

    W scales the lower-order component of a pair by 1/x: (beta, phi) ->
    (beta, phi/x) and (h, beta) -> (h, beta/x).
    """

    F: float
    x_of: Callable
    x_min: float

    def __post_init__(self):
        if self.F < 0:
            raise ValueError("F must be nonnegative")
        if self.x_min <= 0:
            raise ValueError("x_min must be positive")
        if self.F / self.x_min > _EXP_GUARD:
            raise ConjugationOverflow(
                f"F/x_min = {self.F / self.x_min:.1f} exceeds {_EXP_GUARD}")

    def exp_weight(self, zs, sign: int) -> np.ndarray:
        zs = np.atleast_2d(zs)
        x = np.array([self.x_of(z) for z in zs])
        x = np.maximum(x, self.x_min)
        return np.exp(sign * self.F / x)

    def point_scale(self, kind: str, n: int, sign: int) -> Callable:
        """Per-point component scaling e^{sign F/x} W for the transform matrix."""
        m = component_count(kind, n)
        low = n if kind == "bf" else sym_storage_size(n)

        def scale(zs):
            zs = np.atleast_2d(zs)
            x = np.maximum(np.array([self.x_of(z) for z in zs]), self.x_min)
            e = np.exp(sign * self.F / x)
            out = np.repeat(e[:, None], m, axis=1)
            out[:, low:] /= x[:, None]
            return out

        return scale


@dataclass
class ScatteringFrame:
    """Orthonormal frame and scattering scalings at one chart point."""

    z: np.ndarray
    x: float
    normal: np.ndarray       # g-unit vector along grad x
    tangent: np.ndarray      # (n-1, n) g-orthonormal, tangent to the level set
    metric: np.ndarray

    @classmethod
    def from_chart(cls, chart: DepthChart, z) -> "ScatteringFrame":
        z = np.asarray(z, dtype=float)
        return cls(z=z, x=chart.x(z), normal=chart.unit_normal(z),
                   tangent=chart.tangent_frame(z), metric=chart.geom.g(z))

    def covector_sc_components(self, u) -> np.ndarray:
        """(x^2 u(normal), x u(e_a)): components on the dx/x^2, dy/x basis."""
        u = np.asarray(u, dtype=float)
        cx = self.x**2 * float(u @ self.normal)
        cy = self.x * (self.tangent @ u)
        return np.concatenate([[cx], cy])

    def vector_sc_components(self, v) -> np.ndarray:
        """(<v,n>_g / x^2, <v,e_a>_g / x): components on x^2 d_x, x d_y."""
        v = np.asarray(v, dtype=float)
        gv = self.metric @ v
        dx = float(self.normal @ gv) / self.x**2
        dy = (self.tangent @ gv) / self.x
        return np.concatenate([[dx], dy])


# -- averaging operators and assembly -----------------------------------------


def _family_base_map(family: Family):
    """(i_level, i_y) -> list of (entry_id, i_lam, i_om)."""
    out = {}
    for eid, (i, j, k, l) in enumerate(family.index):
        out.setdefault((int(i), int(j)), []).append((eid, int(k), int(l)))
    return out


def _trapezoid_weights(vals: np.ndarray) -> np.ndarray:
    if vals.size == 1:
        return np.array([1.0])
    w = np.full(vals.size, vals[1] - vals[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def j_average(family: Family, order: int, values: np.ndarray, chi: Cutoff):
    """Averaging operator J_order applied to a measurement vector.

    values is aligned with family entries.  Returns (base_info, out) where
    out has one row per family base point: a scalar for order 0, scattering
    1-form components (n,) for order 1, and the isometric flattening of a
    scattering symmetric 2-tensor (n(n+1)/2,) for order 2.

    Weights follow the x-power convention of the localized operators:
    x^-2 (order 0), the lowered direction g_sc(lambda d_x + omega d_y)
    (order 1), and x^2 times its tensor square (order 2).
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    n = family.chart.geom.dim
    base_map = _family_base_map(family)
    d_omega = 2.0 * math.pi / family.omegas.shape[0]
    base_info, rows = [], []
    for i, j, x0, y, z0 in family.base_iter():
        frame = ScatteringFrame.from_chart(family.chart, z0)
        lams = family.lam_values[i]
        wl = _trapezoid_weights(lams)
        acc = None
        for eid, k, l in base_map.get((i, j), []):
            lam, om = lams[k], family.omegas[l]
            wq = wl[k] * d_omega * float(chi(lam / x0)) * values[eid]
            if order == 0:
                term = wq / x0**2
            else:
                direction = lam * frame.normal + om @ frame.tangent
                c = frame.vector_sc_components(direction)  # equals (lam/x^2, omega/x)
                if order == 1:
                    term = wq * c
                else:
                    term = wq * x0**2 * sym_flat(np.outer(c, c))
            acc = term if acc is None else acc + term
        if acc is None:
            acc = 0.0 if order == 0 else np.zeros(n if order == 1 else sym_storage_size(n))
        base_info.append((i, j, x0, y, z0))
        rows.append(acc)
    out = np.array(rows) if order else np.array(rows, dtype=float)
    return base_info, out


def _j_matrix(family: Family, orders, chi: Cutoff) -> sp.csr_matrix:
    """Sparse matrix applying stacked J operators to a measurement vector."""
    n = family.chart.geom.dim
    sizes = {0: 1, 1: n, 2: sym_storage_size(n)}
    m_out = sum(sizes[o] for o in orders)
    base_map = _family_base_map(family)
    bases = list(family.base_iter())
    d_omega = 2.0 * math.pi / family.omegas.shape[0]
    rows, cols, vals = [], [], []
    for b, (i, j, x0, y, z0) in enumerate(bases):
        frame = ScatteringFrame.from_chart(family.chart, z0)
        lams = family.lam_values[i]
        wl = _trapezoid_weights(lams)
        for eid, k, l in base_map.get((i, j), []):
            lam, om = lams[k], family.omegas[l]
            wq = wl[k] * d_omega * float(chi(lam / x0))
            comp0 = 0
            for o in orders:
                if o == 0:
                    coeffs = np.array([wq / x0**2])
                else:
                    direction = lam * frame.normal + om @ frame.tangent
                    c = frame.vector_sc_components(direction)
                    coeffs = wq * c if o == 1 else wq * x0**2 * sym_flat(np.outer(c, c))
                for t, cv in enumerate(coeffs):
                    rows.append(b * m_out + comp0 + t)
                    cols.append(eid)
                    vals.append(cv)
                comp0 += sizes[o]
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(len(bases) * m_out, len(family))).tocsr()


def assemble_normal(kind: str, geom, family: Family, chi: Cutoff, F: float,
                    grid: Grid, x_min: float) -> DiscreteOperator:
    """Discrete conjugated normal operator on grid pair coefficients.

    Composes, exactly in the displayed order: output diag W^{-1} e^{-F/x} at
    the family base points, the stacked J averages ((J1; J0) for pairs of
    1-forms and functions, (J2; J1) for 2-tensors and 1-forms), the ray
    transform, and the input diag e^{F/x} W on the grid.

    Requires x > x_min on all integration points of the family (the input
    conjugation grows like e^{F/x}).
    """
    n = geom.dim
    conj = ConjugationWeight(F=F, x_of=family.chart.x, x_min=x_min)
    xmin_obs = min(min(family.chart.x(z) for z in path.zs) for _, path in family)
    if xmin_obs < x_min - 1e-12:
        raise ConjugationOverflow(
            f"family reaches x = {xmin_obs:.4f} below x_min = {x_min:.4f}")
    T = transform_matrix(family, grid, kind,
                         point_scale=conj.point_scale(kind, n, +1))
    orders = (1, 0) if kind == "bf" else (2, 1)
    Q = _j_matrix(family, orders, chi)
    # output scaling W^{-1} e^{-F/x} per base node
    bases = list(family.base_iter())
    m_out = component_count(kind, n)
    low = n if kind == "bf" else sym_storage_size(n)
    d = np.empty(len(bases) * m_out)
    for b, (i, j, x0, y, z0) in enumerate(bases):
        e = math.exp(-F / max(x0, x_min))
        d[b * m_out:(b + 1) * m_out] = e
        d[b * m_out + low:(b + 1) * m_out] *= x0
    M = sp.diags(d) @ Q @ T
    return DiscreteOperator(matrix=M.tocsr(), domain=f"{kind} grid dofs",
                            codomain=f"{kind} sc-components at family base points",
                            meta={"F": F, "x_min": x_min, "kind": kind,
                                  "n_base": len(bases)})


def apply_normal_to_field(kind: str, geom, family: Family, chi: Cutoff, F: float,
                          pair, x_min: float) -> np.ndarray:
    """Normal operator applied to a continuum pair (fields evaluated exactly).

    Bypasses the grid: measurements are ray transforms of e^{F/x} W f along
    the family, then the J and output conjugation legs as in assemble_normal.
    Used to check that gauge pairs survive the conjugation in the kernel.
    """
    n = geom.dim
    ConjugationWeight(F=F, x_of=family.chart.x, x_min=x_min)  # overflow guard
    meas = np.empty(len(family))
    for e, (_, path) in enumerate(family):
        zs, vs = path.zs, path.vs
        x = np.maximum(np.array([family.chart.x(z) for z in zs]), x_min)
        ew = np.exp(F / x)
        if kind == "bf":
            vals = ew * (np.asarray(pair.beta.pair(zs, vs))
                         + np.asarray(pair.phi.at_scalar(zs)) / x)
        else:
            vals = ew * (np.asarray(pair.h.pair(zs, vs))
                         + np.asarray(pair.beta.pair(zs, vs)) / x)
        meas[e] = float(simpson_weights(path.times) @ vals)
    orders = (1, 0) if kind == "bf" else (2, 1)
    Q = _j_matrix(family, orders, chi)
    out = Q @ meas
    bases = list(family.base_iter())
    m_out = component_count(kind, n)
    low = n if kind == "bf" else sym_storage_size(n)
    for b, (i, j, x0, y, z0) in enumerate(bases):
        e = math.exp(-F / max(x0, x_min))
        out[b * m_out:(b + 1) * m_out] *= e
        out[b * m_out + low:(b + 1) * m_out] *= x0
    return out


# -- principal symbols ---------------------------------------------------------


@dataclass
class PrincipalSymbol:
    """Exact symbol matrix at one frequency (xi, eta) and weight F."""

    kind: str
    side: str
    xi: float
    eta: np.ndarray
    F: float
    matrix: np.ndarray
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None


def _hb_flat_sizes(n: int):
    ny = n - 1
    my = ny * (ny + 1) // 2
    return ny, my, 1 + ny + my + 1 + ny


def symbol_gauge(kind: str, side: str, xi: float, eta, F: float,
                 a=None, b=None) -> PrincipalSymbol:
    """Principal symbol of the conjugated gauge operator or its adjoint.

    kind 'bf': d_F maps functions to (1-form, function) pairs with symbol
    column (xi + iF, eta, 0).  kind 'hb': d^s_F maps (1-form, function) to
    (sym-2-tensor, 1-form) pairs; the zeroth-order symmetric 2-tensor ``a``
    and 1-form ``b`` enter the normal rows.  The delta side is the conjugate
    transpose (xi -> xi - iF, tensor products -> contractions).
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    ny = eta.size
    n = ny + 1
    zF = xi + 1j * F
    if kind == "bf":
        col = np.zeros((n + 1, 1), dtype=complex)
        col[0, 0] = zF
        col[1:n, 0] = eta
        mat = col
    elif kind == "hb":
        a = np.zeros((ny, ny)) if a is None else np.asarray(a, dtype=float)
        b = np.zeros(ny) if b is None else np.asarray(b, dtype=float)
        _, my, mtot = _hb_flat_sizes(n)
        mat = np.zeros((mtot, n + 1), dtype=complex)
        r = 0
        mat[r, 0] = zF                                   # h_xx <- u_x
        r += 1
        for t in range(ny):                              # sqrt2 h_xy rows
            mat[r + t, 0] = eta[t] / math.sqrt(2.0)
            mat[r + t, 1 + t] = zF / math.sqrt(2.0)
        r += ny
        mat[r:r + my, 0] = sym_flat(a)                   # h_yy <- a u_x
        for t in range(ny):                              # h_yy <- eta sym u_y
            T = np.zeros((ny, ny))
            T[t, :] += 0.5 * eta
            T[:, t] += 0.5 * eta
            mat[r:r + my, 1 + t] = sym_flat(T)
        r += my
        mat[r, n] = zF                                   # beta_x <- p
        r += 1
        mat[r:r + ny, 0] = b                             # beta_y <- b u_x
        mat[r:r + ny, n] = eta                           # beta_y <- eta p
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if side == "d":
        pass
    elif side == "delta":
        mat = mat.conj().T
    else:
        raise ValueError("side must be 'd' or 'delta'")
    return PrincipalSymbol(kind=kind, side=side, xi=float(xi), eta=eta, F=float(F),
                           matrix=mat, a=a if kind == "hb" else None,
                           b=b if kind == "hb" else None)


def _circle(nq: int) -> np.ndarray:
    th = np.linspace(0, 2 * math.pi, nq, endpoint=False)
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def _sphere_nodes(ny: int, nq: int):
    """Quadrature nodes and weights on S^{ny-1}."""
    if ny == 2:
        Y = _circle(nq)
        w = np.full(nq, 2 * math.pi / nq)
        return Y, w
    if ny == 3:
        n_th = max(int(math.sqrt(nq)), 4)
        n_ph = 2 * n_th
        th, wth = np.polynomial.legendre.leggauss(n_th)
        th = np.arccos(th)
        nodes, ws = [], []
        for t, wt in zip(th, wth):
            for k in range(n_ph):
                ph = 2 * math.pi * k / n_ph
                nodes.append([math.sin(t) * math.cos(ph),
                              math.sin(t) * math.sin(ph), math.cos(t)])
                ws.append(wt * 2 * math.pi / n_ph)
        return np.array(nodes), np.array(ws)
    raise NotImplementedError("sphere quadrature implemented for dim <= 4")


def _alpha_of(alpha_plus, alpha_minus, Y: np.ndarray) -> np.ndarray:
    A = np.asarray(alpha_plus, dtype=float)
    bm = np.asarray(alpha_minus, dtype=float)
    return np.einsum("qa,ab,qb->q", Y, A, Y) + Y @ bm


def sc_symbol(kind: str, xi: float, eta, F: float, alpha_plus, alpha_minus,
              quad_pts: int = 181) -> np.ndarray:
    """Gaussian-cutoff scattering symbol at a finite frequency, by quadrature.

    Rank-one integrals over unit directions Yh with the direction-dependent
    Gaussian weight exp(-(Yh.eta)^2 / (2 mu (xi^2 + F^2))), mu = alpha(Yh)/F,
    alpha = alpha_plus(Yh) + alpha_minus(Yh) > 0.  Output is Hermitian PSD.
    """
    if F <= 0:
        raise ValueError("F must be positive")
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    ny = eta.size
    Y, w = _sphere_nodes(ny, quad_pts)
    alpha = _alpha_of(alpha_plus, alpha_minus, Y)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive on the direction sphere")
    mu = alpha / F
    q = xi * xi + F * F
    Ye = Y @ eta
    weight = w * np.exp(-np.minimum(Ye**2 / (2 * mu * q), _EXP_GUARD)) / math.sqrt(q)
    if kind == "bf":
        th1 = -(xi + 1j * F) * Ye / q
        V = np.concatenate([th1[:, None], Y, np.ones((Y.shape[0], 1))], axis=1)
        return np.einsum("q,qi,qj->ij", weight, V, V.conj())
    if kind == "hb":
        th1 = -(xi - 1j * F) * Ye / q
        th2 = th1**2 + 2j * alpha * (xi - 1j * F) / q
        yy = sym_flat(np.einsum("qa,qb->qab", Y, Y))
        U = np.concatenate([th2[:, None], math.sqrt(2.0) * th1[:, None] * Y, yy,
                            th1[:, None], Y], axis=1)
        return np.einsum("q,qi,qj->ij", weight, U.conj(), U)
    raise ValueError(f"unknown kind {kind!r}")


def infinity_symbol(kind: str, xi: float, eta, chi: Cutoff,
                    quad_pts: int = 241) -> np.ndarray:
    """Principal symbol at fiber infinity: cutoff-weighted rank-one average
    over the equatorial set {(S, Yh): xi S + eta . Yh = 0} with the 1/|zeta|
    prefactor."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    ny = eta.size
    if ny != 2:
        raise NotImplementedError("fiber-infinity symbol implemented for n = 3")
    zeta_norm = math.sqrt(xi * xi + float(eta @ eta))
    if zeta_norm < 1e-14:
        raise ValueError("zeta must be nonzero")

    def vvec(S, Yh):
        if kind == "bf":
            return np.concatenate([[S], Yh, [1.0]])
        yy = sym_flat(np.outer(Yh, Yh))
        return np.concatenate([[S * S], math.sqrt(2.0) * S * Yh, yy, [S], Yh])

    msize = (ny + 2) if kind == "bf" else _hb_flat_sizes(ny + 1)[2]
    out = np.zeros((msize, msize))
    if abs(xi) > 1e-10:
        th = np.linspace(0, 2 * math.pi, quad_pts, endpoint=False)
        Y = np.stack([np.cos(th), np.sin(th)], axis=1)
        dY = np.stack([-np.sin(th), np.cos(th)], axis=1)
        S = -(Y @ eta) / xi
        dS = -(dY @ eta) / xi
        meas = np.sqrt(1.0 + dS**2) * (2 * math.pi / quad_pts)
        cw = chi(S)
        for k in range(quad_pts):
            if cw[k] == 0.0:
                continue
            v = vvec(S[k], Y[k])
            out += meas[k] * cw[k] * np.outer(v, v)
    else:
        ne = math.sqrt(float(eta @ eta))
        Y0 = np.array([-eta[1], eta[0]]) / ne
        Ss = np.linspace(-chi.s_max, chi.s_max, quad_pts)
        w = _trapezoid_weights(Ss)
        cw = chi(Ss)
        for k in range(quad_pts):
            if cw[k] == 0.0:
                continue
            for Yh in (Y0, -Y0):
                v = vvec(Ss[k], Yh)
                out += w[k] * cw[k] * np.outer(v, v)
    return out / zeta_norm


# -- ellipticity scans ---------------------------------------------------------


def finite_freq_grid(radius: float = 3.0, n_xi: int = 7, n_r: int = 4,
                     n_ang: int = 6):
    """Default compact frequency grid for n = 3 finite-point scans."""
    freqs = []
    for xi in np.linspace(-radius, radius, n_xi):
        freqs.append((float(xi), np.zeros(2)))
        for r in np.linspace(radius / n_r, radius, n_r):
            for t in np.linspace(0, math.pi, n_ang, endpoint=False):
                freqs.append((float(xi), r * np.array([math.cos(t), math.sin(t)])))
    return freqs


def infinity_freq_grid(n_psi: int = 7, n_ang: int = 6):
    """Unit-sphere frequencies |zeta| = 1 for fiber-infinity scans (n = 3)."""
    freqs = [(1.0, np.zeros(2)), (-1.0, np.zeros(2))]
    for psi in np.linspace(0.15, math.pi - 0.15, n_psi):
        xi = math.cos(psi)
        r = math.sin(psi)
        for t in np.linspace(0, math.pi, n_ang, endpoint=False):
            freqs.append((float(xi), r * np.array([math.cos(t), math.sin(t)])))
    return freqs


@dataclass
class ScanEntry:
    xi: float
    eta: np.ndarray
    min_eig: Optional[float]
    kernel_dim: int


@dataclass
class ScanReport:
    kind: str
    mode: str
    F: float
    min_eig: float
    argmin: tuple
    kernel_dims: list
    empty_kernel_freqs: list = field(default_factory=list)
    entries: list = field(default_factory=list)

    @property
    def elliptic(self) -> bool:
        return self.min_eig > 0

    def to_dict(self):
        return {"kind": self.kind, "mode": self.mode, "F": self.F,
                "min_eig": float(self.min_eig),
                "argmin_freq": {"xi": float(self.argmin[0]),
                                "eta": list(map(float, self.argmin[1]))},
                "kernel_dims": sorted(set(self.kernel_dims)),
                "n_empty_kernel": len(self.empty_kernel_freqs),
                "elliptic": bool(self.elliptic)}


def ellipticity_scan(kind: str, F: float, alpha_plus, alpha_minus, a, b,
                     freq_grid=None, mode: str = "finite",
                     chi: Optional[Cutoff] = None, quad_pts: int = 181,
                     restricted: bool = True) -> ScanReport:
    """Minimum eigenvalue of the symbol restricted to the gauge kernel.

    mode 'finite' uses the scattering symbol and the kernel of the delta
    symbol with its F and zeroth-order (a, b) terms; mode 'infinity' uses
    the fiber-infinity symbol and the standard kernel (F, a, b dropped).
    With ``restricted=False`` the unrestricted minimum is reported (it
    vanishes along gauge directions; the sanity check that the restriction
    is doing the work).
    """
    if freq_grid is None:
        freq_grid = finite_freq_grid() if mode == "finite" else infinity_freq_grid()
    if mode == "infinity" and chi is None:
        A = np.asarray(alpha_plus, dtype=float)
        chi = Cutoff.gaussian_for(max(F, 1e-6), float(np.trace(A)) / A.shape[0])
    entries = []
    best = (np.inf, None)
    kdims, empties = [], []
    for xi, eta in freq_grid:
        if mode == "finite":
            S = sc_symbol(kind, xi, eta, F, alpha_plus, alpha_minus, quad_pts)
            D = symbol_gauge(kind, "delta", xi, eta, F, a, b).matrix
        else:
            S = infinity_symbol(kind, xi, eta, chi, quad_pts)
            D = symbol_gauge(kind, "delta", xi, eta, 0.0, None, None).matrix
        if restricted:
            K = null_space(D)
            kdim = K.shape[1]
            kdims.append(kdim)
            if kdim == 0:
                empties.append((xi, eta))
                entries.append(ScanEntry(xi, np.asarray(eta), None, 0))
                continue
            R = K.conj().T @ S @ K
        else:
            kdims.append(S.shape[0])
            R = S
        R = 0.5 * (R + R.conj().T)
        ev = float(np.linalg.eigvalsh(R)[0])
        entries.append(ScanEntry(xi, np.asarray(eta), ev, kdims[-1]))
        if ev < best[0]:
            best = (ev, (xi, np.asarray(eta)))
    if best[1] is None:
        raise ValueError("scan found no frequency with a nonempty kernel")
    return ScanReport(kind=kind, mode=mode, F=float(F), min_eig=best[0],
                      argmin=best[1], kernel_dims=kdims,
                      empty_kernel_freqs=empties, entries=entries)


def find_F0(alpha_plus, alpha_minus, a, b, kind: str = "hb", freq_grid=None,
            tol_pos: float = 1e-10, floor: float = 2.0**-6, cap: float = 2.0**16,
            quad_pts: int = 181) -> tuple:
    """Smallest certified-positive conjugation weight for the restricted scan.

    Doubles F from 1 until the scan is positive (NotFound past ``cap``);
    when F = 1 already passes, halves toward ``floor`` looking for the
    crossover.  Brackets are bisected to two significant digits and the
    returned F re-scanned to certify positivity.
    """

    def passes(F):
        rep = ellipticity_scan(kind, F, alpha_plus, alpha_minus, a, b,
                               freq_grid=freq_grid, mode="finite",
                               quad_pts=quad_pts)
        return rep.min_eig > tol_pos, rep

    F_hi = 1.0
    ok, rep = passes(F_hi)
    if not ok:
        while not ok:
            F_hi *= 2
            if F_hi > cap:
                raise NotFound(f"no elliptic F found up to {cap}")
            ok, rep = passes(F_hi)
        F_lo = F_hi / 2
    else:
        F_lo = None
        F = F_hi
        while F > floor:
            F_try = F / 2
            ok_try, rep_try = passes(F_try)
            if ok_try:
                F, rep = F_try, rep_try
            else:
                F_lo, F_hi = F_try, F
                break
        else:
            return F, rep
        if F_lo is None:
            return F, rep
    while (F_hi - F_lo) / F_hi > 0.01:
        mid = 0.5 * (F_lo + F_hi)
        ok_mid, rep_mid = passes(mid)
        if ok_mid:
            F_hi, rep = mid, rep_mid
        else:
            F_lo = mid
    return F_hi, rep


# -- front-face Schwartz kernels -----------------------------------------------


def front_face_kernel(kind: str, X: float, Y, F: float, chi: Cutoff,
                      alpha_plus, alpha_minus) -> np.ndarray:
    """Front-face (x = 0) Schwartz kernel matrix at offset (X, Y).

    Two branches: geodesics reaching the offset forward (direction Yh,
    cutoff chi(S_plus)) and backward (direction -Yh, cutoff chi(-S_minus)),
    with S_pm = (X - alpha_pm |Y|^2)/|Y| and alpha_pm = alpha(+-Yh) in the
    t^2-coefficient normalization.  The covector factor carries S_pm, the
    velocity factor S_pm + 2 alpha_pm |Y|; the backward branch flips the
    sign of the off-diagonal (odd order-mixing) blocks.
    """
    Y = np.atleast_1d(np.asarray(Y, dtype=float))
    ny = Y.size
    n = ny + 1
    absY = float(np.linalg.norm(Y))
    if absY <= 0:
        raise ValueError("|Y| must be positive")
    Yh = Y / absY
    a_p = float(_alpha_of(alpha_plus, alpha_minus, Yh[None, :])[0])
    a_m = float(_alpha_of(alpha_plus, alpha_minus, -Yh[None, :])[0])
    S_p = (X - a_p * absY**2) / absY
    S_m = (X - a_m * absY**2) / absY

    def branch(S, a_val, flip):
        cov = np.concatenate([[S], Yh])
        vel = np.concatenate([[S + 2 * a_val * absY], Yh])
        s = -1.0 if flip else 1.0
        if kind == "bf":
            M = np.zeros((n + 1, n + 1))
            M[:n, :n] = np.outer(cov, vel)
            M[:n, n] = s * cov
            M[n, :n] = s * vel
            M[n, n] = 1.0
            return M
        c2 = sym_flat(np.outer(cov, cov))
        r2 = sym_flat(np.outer(vel, vel))
        msym = c2.size
        M = np.zeros((msym + n, msym + n))
        M[:msym, :msym] = np.outer(c2, r2)
        M[:msym, msym:] = s * np.outer(c2, vel)
        M[msym:, :msym] = s * np.outer(cov, r2)
        M[msym:, msym:] = np.outer(cov, vel)
        return M

    bracket = (float(chi(S_p)) * branch(S_p, a_p, flip=False)
               + float(chi(-S_m)) * branch(S_m, a_m, flip=True))
    return math.exp(-F * X) * absY ** (1 - n) * bracket


def default_symbol_data(chart: DepthChart, base_y=None, x0: Optional[float] = None,
                        n_omega: int = 32):
    """Fitted (alpha_plus, alpha_minus, a, b) for a chart's base point.

    alpha forms come from even/odd least squares on flow samples (t^2
    normalization); a defaults to zero (configurable input, not computed
    from the metric); b samples the normal component of the Lorentz force
    on the tangent frame.
    """
    n = chart.geom.dim
    if x0 is None:
        x0 = 0.05 * chart.c
    y = np.zeros(n - 1) if base_y is None else np.asarray(base_y, dtype=float)
    A, bm = chart.alpha_forms(x0=x0, y=y, n_omega=n_omega)
    z = chart.point_from(x0, y)
    b = chart.lorentz_b(z)
    a = np.zeros((n - 1, n - 1))
    return A, bm, a, b
