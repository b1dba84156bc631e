"""Gauge projection, local inversion, transport solutions, layer stripping.

The conjugated gauge operators are assembled in expanded form, e.g.

    d_F p = dp - (F/x^2) p dx,

so no exponential weight ever appears as a matrix entry (the similarity
factors e^{F/x} cannot be resolved by a grid near the artificial face).  The
divergence is the exact matrix adjoint of the discrete derivative under the
scattering-weighted inner products, which makes the Witten Laplacian
structurally positive semidefinite; Dirichlet rows make it definite.

The local inversion solves the Tikhonov-regularized least squares

    min_c ||T c - If||^2 + reg ||delta_F c||^2 + 1e-6 reg ||c||^2

for the conjugated pair coefficients c, parameterized internally by the
unconjugated values a = e^{F/x} W c for conditioning, and reports the
canonical solenoidal representative from the post-hoc splitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry as geo
from .errors import NonConvergence, TrappedOrbit
from .flow import DepthChart, Family, PhasePoint, StepControl, integrate, shell_family
from .grids import Grid, component_count, sym_index_pairs, sym_storage_size
from .normalop import Cutoff
from .tensorfields import TensorPair, christoffel_on_grid, evaluate
from .transform import simpson_weights, transform_matrix


def _covector_mass(geom, chart, z, x):
    """SPD matrix of the scattering inner product on covector components."""
    g = geom.g(z)
    gi = np.linalg.inv(g)
    if chart is None:
        return gi
    nrm = chart.unit_normal(z)
    P = np.outer(nrm, nrm)
    return x**4 * P + x**2 * (gi - P)


def _symtensor_mass(geom, chart, z, x, pairs):
    """SPD matrix of the scattering inner product on stored sym components."""
    n = geom.dim
    g = geom.g(z)
    if chart is None:
        R = np.linalg.cholesky(np.linalg.inv(g))  # columns: g-orthonormal frame
        wvec = np.ones(n)
    else:
        nrm = chart.unit_normal(z)
        frame = chart.tangent_frame(z)
        R = np.column_stack([nrm] + list(frame))
        wvec = np.concatenate([[x**2], np.full(n - 1, x)])
    W2 = np.outer(wvec, wvec)
    basis = []
    for (i, j) in pairs:
        E = np.zeros((n, n))
        E[i, j] += 1.0
        E[j, i] += 1.0 if i != j else 0.0
        basis.append(R.T @ E @ R)
    B = np.array(basis)  # (m, n, n) frame components of each stored basis tensor
    return np.einsum("kab,lab,ab->kl", B, B, W2**2)


@dataclass
class GaugeProjector:
    """Discrete conjugated gauge operator with its adjoint and Laplacian."""

    kind: str
    F: float
    grid: Grid
    pair_nodes: np.ndarray        # bool (N,)
    pot_nodes: np.ndarray         # bool (N,)
    D: sp.csr_matrix              # potential dofs -> pair dofs (active slices)
    M_pair: sp.csr_matrix
    M_pot: sp.csr_matrix
    M_pot_inv: sp.csr_matrix
    A: sp.csr_matrix              # D^T M_pair D
    cg_tol: float = 1e-10
    meta: dict = field(default_factory=dict)

    @property
    def n_pair_dofs(self) -> int:
        return self.D.shape[0]

    @property
    def n_pot_dofs(self) -> int:
        return self.D.shape[1]

    def pair_dof_index(self) -> np.ndarray:
        m = component_count(self.kind, self.grid.ndim)
        nodes = np.where(self.pair_nodes)[0]
        return (nodes[:, None] * m + np.arange(m)[None, :]).ravel()

    def delta(self, f_active: np.ndarray) -> np.ndarray:
        """delta_F f: the M-adjoint divergence on active pair dofs."""
        return self.M_pot_inv @ (self.D.T @ (self.M_pair @ f_active))

    def min_ritz(self) -> float:
        """Smallest generalized eigenvalue of (A, M_pot): definiteness check."""
        k = self.A.shape[0]
        if k <= 600:
            import scipy.linalg as sla
            return float(sla.eigh(self.A.toarray(), self.M_pot.toarray(),
                                  eigvals_only=True, subset_by_index=[0, 0])[0])
        vals = spla.eigsh(self.A, k=1, M=self.M_pot, sigma=0, which="LM",
                          return_eigenvectors=False)
        return float(vals[0])


def _active_masks(geom, grid, chart, x_min, boundary_margin=0.0):
    pts = grid.points()
    rho = np.array([geom.rho(z) for z in pts])
    if chart is None:
        pair_nodes = rho >= boundary_margin
        pot_nodes = rho >= max(boundary_margin, 0.5 * float(np.min(grid.spacing)))
    else:
        x = np.array([chart.x(z) for z in pts])
        h = 0.5 * float(np.min(grid.spacing))
        pair_nodes = (x >= x_min) & (rho >= boundary_margin)
        pot_nodes = (x >= x_min + h) & (rho >= boundary_margin + h)
    return pair_nodes, pot_nodes


def build_gauge_projector(kind: str, geom, grid: Grid, chart: Optional[DepthChart] = None,
                          F: float = 0.0, x_min: float = 0.0,
                          pair_nodes: Optional[np.ndarray] = None,
                          pot_nodes: Optional[np.ndarray] = None,
                          Gamma_nodes: Optional[np.ndarray] = None) -> GaugeProjector:
    """Assemble the discrete d_F (or d^s_F), masses, and the Witten Laplacian.

    With chart=None (and F=0) the plain unconjugated operators and L2(g)
    inner products are produced; otherwise the scattering weights and the
    expanded conjugation terms use x = chart.x with the floor x_min.
    """
    n = grid.ndim
    N = grid.n_nodes
    pts = grid.points()
    pairs = sym_index_pairs(n)
    if pair_nodes is None or pot_nodes is None:
        pn, qn = _active_masks(geom, grid, chart, x_min)
        pair_nodes = pn if pair_nodes is None else pair_nodes
        pot_nodes = qn if pot_nodes is None else pot_nodes
    pot_nodes = pot_nodes & pair_nodes  # Dirichlet outside the active region
    if chart is not None:
        x_arr = np.maximum(np.array([chart.x(z) for z in pts]), x_min)
        gx_arr = np.array([chart.grad_x(z) for z in pts])
    else:
        x_arr = np.ones(N)
        gx_arr = np.zeros((N, n))

    Dax = [grid.diff_matrix(k) for k in range(n)]

    def diag(v):
        return sp.diags(np.asarray(v))

    if kind == "bf":
        # d_F p = dp - (F/x^2) p dx   (components stacked per node: beta_i, phi)
        blocks = []
        for i in range(n):
            blocks.append(Dax[i] - diag(F * gx_arr[:, i] / x_arr**2))
        blocks.append(sp.csr_matrix((N, N)))  # phi row of [dp, 0]
        Dfull = sp.vstack([b for b in blocks])
        # reorder from component-major to node-major dof layout
        perm = _comp_to_node_perm(N, n + 1)
        Dfull = perm @ Dfull
        pot_comp = 1
    elif kind == "hb":
        m = sym_storage_size(n)
        if Gamma_nodes is None:
            Gamma_nodes = christoffel_on_grid(geom, grid)
        Emats = np.array([geom.Omega(z).T @ np.linalg.inv(geom.g(z)) for z in pts])
        rows = []
        # h-part: (d^s u)_ij - (F/x^2) (dx sym u)_ij
        for (i, j) in pairs:
            row = [None] * (n + 1)
            for l in range(n):
                term = sp.csr_matrix((N, N))
                if l == j:
                    term = term + 0.5 * Dax[i]
                if l == i:
                    term = term + 0.5 * Dax[j]
                term = term - diag(Gamma_nodes[:, l, i, j])
                term = term - diag(0.5 * F * (gx_arr[:, i] * (l == j)
                                              + gx_arr[:, j] * (l == i)) / x_arr**2)
                row[l] = term
            row[n] = sp.csr_matrix((N, N))
            rows.append(row)
        # beta-part: -x E(u) + dp - ((1 + F/x)/x) p dx
        for i in range(n):
            row = [None] * (n + 1)
            for l in range(n):
                row[l] = -diag(x_arr * Emats[:, i, l])
            row[n] = Dax[i] - diag((1.0 + F / x_arr) * gx_arr[:, i] / x_arr)
            rows.append(row)
        Dfull = sp.bmat(rows, format="csr")
        out_perm = _comp_to_node_perm(N, m + n)
        in_perm = _comp_to_node_perm(N, n + 1)
        Dfull = out_perm @ Dfull @ in_perm.T
        pot_comp = n + 1
    else:
        raise ValueError(f"unknown kind {kind!r}")

    m_out = component_count(kind, n)
    pair_dofs = (np.where(pair_nodes)[0][:, None] * m_out
                 + np.arange(m_out)[None, :]).ravel()
    pot_dofs = (np.where(pot_nodes)[0][:, None] * pot_comp
                + np.arange(pot_comp)[None, :]).ravel()
    D = Dfull.tocsr()[pair_dofs][:, pot_dofs].tocsr()

    # mass matrices (block diagonal over active nodes)
    vol = np.array([math.sqrt(np.linalg.det(geom.g(z))) for z in pts])
    if chart is not None:
        vol = vol / x_arr ** (n + 1)
    pair_blocks, pot_blocks, pot_inv_blocks = [], [], []
    for node in np.where(pair_nodes)[0]:
        z, x, w = pts[node], x_arr[node], vol[node]
        Bb = _covector_mass(geom, chart, z, x)
        if kind == "bf":
            blk = np.zeros((m_out, m_out))
            blk[:n, :n] = Bb
            blk[n, n] = 1.0
        else:
            blk = np.zeros((m_out, m_out))
            blk[:len(pairs), :len(pairs)] = _symtensor_mass(geom, chart, z, x, pairs)
            blk[len(pairs):, len(pairs):] = Bb
        pair_blocks.append(w * blk)
    for node in np.where(pot_nodes)[0]:
        z, x, w = pts[node], x_arr[node], vol[node]
        if kind == "bf":
            blk = np.array([[w]])
        else:
            blk = np.zeros((pot_comp, pot_comp))
            blk[:n, :n] = w * _covector_mass(geom, chart, z, x)
            blk[n, n] = w
        pot_blocks.append(blk)
        pot_inv_blocks.append(np.linalg.inv(blk))
    M_pair = sp.block_diag(pair_blocks, format="csr") if pair_blocks else \
        sp.csr_matrix((0, 0))
    M_pot = sp.block_diag(pot_blocks, format="csr") if pot_blocks else \
        sp.csr_matrix((0, 0))
    M_pot_inv = sp.block_diag(pot_inv_blocks, format="csr") if pot_inv_blocks else \
        sp.csr_matrix((0, 0))
    A = (D.T @ M_pair @ D).tocsr()
    return GaugeProjector(kind=kind, F=float(F), grid=grid, pair_nodes=pair_nodes,
                          pot_nodes=pot_nodes, D=D, M_pair=M_pair, M_pot=M_pot,
                          M_pot_inv=M_pot_inv, A=A,
                          meta={"x_min": x_min, "pot_comp": pot_comp})


def _comp_to_node_perm(N: int, m: int) -> sp.csr_matrix:
    """Permutation from component-major (comp*N + node) to node-major dofs."""
    src = np.arange(N * m)
    comp, node = divmod(src, N)
    dst = node * m + comp
    return sp.csr_matrix((np.ones(N * m), (dst, src)), shape=(N * m, N * m))


def _pcg(A_op, b, M_diag, tol, maxiter):
    """Jacobi-preconditioned CG; returns (x, iterations, relative residual)."""
    Minv = 1.0 / np.where(M_diag > 0, M_diag, 1.0)
    x = np.zeros_like(b)
    r = b.copy()
    z = Minv * r
    p = z.copy()
    rz = r @ z
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0:
        return x, 0, 0.0
    it = 0
    while it < maxiter:
        Ap = A_op(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r)) / bnorm
        if res < tol:
            return x, it + 1, res
        z = Minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return x, it, float(np.linalg.norm(r)) / bnorm


def witten_solve(proj: GaugeProjector, rhs: np.ndarray,
                 tol: float = 1e-10) -> np.ndarray:
    """Solve Delta_F p = rhs (rhs in potential dofs) by preconditioned CG.

    The symmetric form is A p = M_pot rhs with A = D^T M_pair D; convergence
    to relative residual ``tol`` or NonConvergence after 10 N iterations.
    """
    b = proj.M_pot @ rhs
    x, it, res = _pcg(lambda v: proj.A @ v, b, proj.A.diagonal(), tol,
                      maxiter=10 * proj.n_pot_dofs + 50)
    if res > tol:
        raise NonConvergence(f"witten_solve stalled at residual {res:.2e} "
                             f"after {it} iterations")
    return x


def solenoidal_split(proj: GaugeProjector, f_active: np.ndarray, tol: float = 1e-10):
    """Split f = S + P with P = d_F Delta_F^{-1} delta_F f and delta_F S ~ 0.

    Returns (S, p, P); f_active is a flat vector on active pair dofs.
    """
    b = proj.D.T @ (proj.M_pair @ f_active)
    p, it, res = _pcg(lambda v: proj.A @ v, b, proj.A.diagonal(), tol,
                      maxiter=10 * proj.n_pot_dofs + 50)
    if res > tol:
        raise NonConvergence(f"solenoidal_split stalled at residual {res:.2e}")
    P = proj.D @ p
    return f_active - P, p, P


def _m_norm(M: sp.csr_matrix, v: np.ndarray) -> float:
    return float(math.sqrt(max(v @ (M @ v), 0.0)))


def _dilate_mask(grid: Grid, mask: np.ndarray) -> np.ndarray:
    m = mask.reshape(grid.shape)
    out = m.copy()
    for k in range(grid.ndim):
        out |= np.roll(m, 1, axis=k) | np.roll(m, -1, axis=k)
        # roll wraps around; clear the wrapped faces
        sl = [slice(None)] * grid.ndim
        sl[k] = 0
        out[tuple(sl)] &= m[tuple(sl)] | np.roll(m, -1, axis=k)[tuple(sl)]
    return out.ravel()


def quotient_projector(kind: str, geom, grid: Grid, pair_nodes: np.ndarray,
                       Gamma_nodes: Optional[np.ndarray] = None) -> GaugeProjector:
    """Plain projector realizing the theorem's gauge class on a region.

    Potentials vanish on the boundary-of-M side only; the artificial and
    lateral faces of the region are free, matching the local-theorem gauge
    (u, p = 0 on O intersect dM).  Used as the quotient metric: the distance
    between gauge classes is the norm of the projected difference.
    """
    pts = grid.points()
    rho = np.array([geom.rho(z) for z in pts])
    margin = 0.75 * float(np.max(grid.spacing))
    pot = _dilate_mask(grid, pair_nodes) & (rho >= margin)
    return build_gauge_projector(kind, geom, grid, chart=None, F=0.0,
                                 pair_nodes=pair_nodes, pot_nodes=pot,
                                 Gamma_nodes=Gamma_nodes)


@dataclass
class InversionResult:
    pair: TensorPair                 # reconstruction in unconjugated variables
    solenoidal: TensorPair           # canonical conjugated solenoidal representative
    a_active: np.ndarray
    c_active: np.ndarray
    s_active: np.ndarray
    proj: GaugeProjector
    diagnostics: dict


def _smoothing_penalty(grid: Grid, kind: str, pair_nodes: np.ndarray,
                       length_cells: float = 2.0) -> sp.csr_matrix:
    """Sum over axes of (l_k d_k)^T (l_k d_k) on active pair dofs, l_k = 2 h_k."""
    n = grid.ndim
    m = component_count(kind, n)
    nodes = np.where(pair_nodes)[0]
    dof = (nodes[:, None] * m + np.arange(m)[None, :]).ravel()
    embed = sp.csr_matrix((np.ones(dof.size), (dof, np.arange(dof.size))),
                          shape=(grid.n_nodes * m, dof.size))
    out = None
    for k in range(n):
        Dk = sp.kron(grid.diff_matrix(k), sp.identity(m, format="csr"), format="csr")
        S = (Dk @ embed).tocsr()
        term = (length_cells * grid.spacing[k]) ** 2 * (S.T @ S)
        out = term if out is None else out + term
    return out.tocsr()


def _conjugation_diag(kind, grid, chart, x_min, pair_nodes, F):
    """Diagonal of e^{-F/x} W^{-1} on active pair dofs (c = diag * a)."""
    n = grid.ndim
    m = component_count(kind, n)
    low = n if kind == "bf" else sym_storage_size(n)
    pts = grid.points()[pair_nodes]
    if chart is None:
        return np.ones(pts.shape[0] * m)
    x = np.maximum(np.array([chart.x(z) for z in pts]), x_min)
    e = np.exp(-F / x)
    d = np.repeat(e[:, None], m, axis=1)
    d[:, low:] *= x[:, None]
    return d.ravel()


def invert_local(kind: str, geom, family: Family, If_data: np.ndarray, F: float,
                 chi: Cutoff, grid: Grid, x_min: float, reg: Optional[float] = None,
                 ridge_rel: float = 1e-3, smooth_rel: Optional[float] = None,
                 truth: Optional[TensorPair] = None,
                 cg_tol: float = 1e-8, max_iter: int = 2000,
                 proj: Optional[GaugeProjector] = None,
                 Gamma_nodes: Optional[np.ndarray] = None) -> InversionResult:
    """Gauge-constrained local inversion from O-local measurements.

    Minimizes the Tikhonov functional over grid coefficients, projects the
    minimizer onto the canonical solenoidal representative, and reports data
    residual, gauge residual, iteration count, and (when the truth pair is
    supplied) the relative solenoidal error and empirical stability ratio.
    A stagnating normal-equation solve is reported as ill_posed, not raised.
    """
    chart = family.chart
    n = grid.ndim
    m = component_count(kind, n)
    if proj is None:
        proj = build_gauge_projector(kind, geom, grid, chart=chart, F=F,
                                     x_min=x_min, Gamma_nodes=Gamma_nodes)
    pair_dofs = proj.pair_dof_index()

    T_full = transform_matrix(family, grid, kind)
    T = T_full[:, pair_dofs].tocsr()
    meas = np.asarray(If_data, dtype=float)
    good = np.isfinite(meas)
    T, meas = T[good], meas[good]

    Wc = sp.diags(_conjugation_diag(kind, grid, chart, x_min, proj.pair_nodes, F))
    Pg = (proj.D.T @ proj.M_pair @ Wc).tocsr()
    # Two-part Tikhonov term.  The shrinkage ridge is column-equilibrated
    # (each dof is damped in proportion to its own data visibility), so the
    # weakly-visible normal tensor components are not preferentially zeroed.
    # The first-difference smoothing term suppresses the rough aliasing
    # components that the discrete ray set cannot see at all.
    col2 = np.asarray((T.multiply(T)).sum(axis=0)).ravel()
    Req = sp.diags(col2 + 1e-3 * float(np.mean(col2)))
    Msm = _smoothing_penalty(grid, kind, proj.pair_nodes)
    Msm = (Msm / max(float(np.mean(Msm.diagonal())), 1e-300)).tocsr()

    rng = np.random.default_rng(0)
    v = rng.normal(size=T.shape[1])
    for _ in range(12):
        v = T.T @ (T @ v)
        v /= np.linalg.norm(v)
    tnorm2 = float(v @ (T.T @ (T @ v)))
    if reg is None:
        reg = 1e-4 * tnorm2
    if smooth_rel is None:
        smooth_rel = ridge_rel
    smooth = smooth_rel * tnorm2

    def N_op(v):
        out = T.T @ (T @ v)
        out += reg * (Pg.T @ (proj.M_pot_inv @ (Pg @ v)))
        out += ridge_rel * (Req @ v)
        out += smooth * (Msm @ v)
        return out

    diag = col2.copy()
    diag += reg * np.asarray(
        (Pg.multiply(proj.M_pot_inv @ Pg)).sum(axis=0)).ravel()
    diag += ridge_rel * Req.diagonal()
    diag += smooth * Msm.diagonal()

    rhs = T.T @ meas
    a, iters, res = _pcg(N_op, rhs, diag, cg_tol, max_iter)
    ill_posed = res > 1e-3

    c = Wc @ a
    s_active, p_pot, _ = solenoidal_split(proj, c)

    data_res = float(np.linalg.norm(T @ a - meas) / max(np.linalg.norm(meas), 1e-300))
    cnorm = _m_norm(proj.M_pair, c)
    gauge_res = _m_norm(proj.M_pot, proj.delta(c)) / max(cnorm, 1e-300)
    diagnostics = {
        "residual": data_res,
        "gauge_residual": gauge_res,
        "iterations": iters,
        "normal_eq_residual": res,
        "ill_posed": bool(ill_posed),
        "reg": float(reg),
        "n_measurements": int(meas.size),
        "n_unknowns": int(T.shape[1]),
    }
    if truth is not None:
        a_true = truth.flat()[pair_dofs]
        # quality metric: distance between gauge classes, computed as the
        # plain (unconjugated) solenoidal projection of the difference; the
        # conjugated representatives live in exponentially weighted norms
        # and are not comparable across the layer in a meaningful way
        proj0 = build_gauge_projector(kind, geom, grid, chart=None, F=0.0,
                                      pair_nodes=proj.pair_nodes,
                                      pot_nodes=proj.pot_nodes,
                                      Gamma_nodes=Gamma_nodes)
        s_diff, _, _ = solenoidal_split(proj0, a - a_true)
        s_ref, _, _ = solenoidal_split(proj0, a_true)
        err = _m_norm(proj0.M_pair, s_diff)
        den = _m_norm(proj0.M_pair, s_ref)
        diagnostics["rel_solenoidal_error"] = err / max(den, 1e-300)
        diagnostics["stability_ratio"] = err / max(float(np.linalg.norm(meas)), 1e-300)

    vec = np.zeros(grid.n_nodes * m)
    vec[pair_dofs] = a
    svec = np.zeros(grid.n_nodes * m)
    svec[pair_dofs] = s_active
    return InversionResult(pair=TensorPair.from_flat(grid, kind, vec),
                           solenoidal=TensorPair.from_flat(grid, kind, svec),
                           a_active=a, c_active=c, s_active=s_active,
                           proj=proj, diagnostics=diagnostics)


def transport_solution(geom, f, z, v, t_max: float = 20.0,
                       step_ctl: Optional[StepControl] = None) -> float:
    """u(z, v): integral of f along the forward orbit until it exits M.

    The flow derivative of u is -f and u vanishes at outgoing boundary
    points; for gauge data f = G_mu(psi) with psi vanishing on the boundary
    sphere bundle this returns -psi(z, v).  Raises TrappedOrbit when the
    forward orbit fails to exit within t_max.
    """
    ctl = step_ctl or StepControl(tol=1e-10, max_step=0.02)
    path = integrate(geom, PhasePoint(z, v), (0.0, t_max), ctl)
    if path.exit_exit is None:
        raise TrappedOrbit(f"forward orbit did not exit within t_max = {t_max}")
    vals = np.asarray(evaluate(f, path.zs, path.vs), dtype=float)
    return float(simpson_weights(path.times) @ vals)


# -- layer stripping -----------------------------------------------------------


@dataclass
class LayerSchedule:
    """Radial-style foliation schedule for global reconstruction."""

    tau: Callable
    levels: list                 # strictly decreasing, levels[0] = outermost
    depth: float                 # per-layer chart depth c
    x_min: float
    grad_tau: Optional[Callable] = None
    center: Optional[np.ndarray] = None
    blend_width: Optional[float] = None
    family_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        lv = list(self.levels)
        if any(b <= a for a, b in zip(lv[1:], lv[:-1])):
            raise ValueError("levels must be strictly decreasing")
        if self.blend_width is None:
            self.blend_width = 2.0 * self.x_min


def _smoothstep5(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t * t)


@dataclass
class LayerStripResult:
    pair: TensorPair
    grid: Grid
    layer_reports: list
    overlap_consistency: list
    covered_nodes: np.ndarray


def layer_strip(kind: str, geom, schedule: LayerSchedule, If_oracle: Callable,
                F: float, chi: Cutoff, grid: Grid, reg: Optional[float] = None,
                cg_tol: float = 1e-8, verbose: bool = False) -> LayerStripResult:
    """Outside-in reconstruction through a foliation by convex level sets.

    At each level: build the shell family, subtract the transform of the
    running reconstruction from the oracle data, invert locally on the shell,
    and blend the update into the running field with a quintic ramp away from
    the shell's inner artificial face.  Raises LayerFailure (with the layer
    diagnostics attached) when a layer's inversion reports ill-posedness.
    """
    from .errors import LayerFailure

    n = grid.ndim
    m = component_count(kind, n)
    pts = grid.points()
    f_rec = np.zeros(grid.n_nodes * m)
    covered = np.zeros(grid.n_nodes, dtype=bool)
    reports, overlaps = [], []
    Gamma_nodes = christoffel_on_grid(geom, grid)
    for li, level in enumerate(schedule.levels):
        fam = shell_family(geom, schedule.tau, level, schedule.depth,
                           **_shell_kwargs(schedule))
        chart = fam.chart
        data = np.array([If_oracle(path) for _, path in fam])
        T_glob = transform_matrix(fam, grid, kind)
        resid = data - T_glob @ f_rec

        result = invert_local(kind, geom, fam, resid, F, chi, grid,
                              x_min=schedule.x_min, reg=reg, cg_tol=cg_tol,
                              Gamma_nodes=Gamma_nodes)
        if result.diagnostics["ill_posed"]:
            raise LayerFailure(level, result.diagnostics)

        x_node = np.array([chart.x(z) for z in pts])
        ramp = _smoothstep5((x_node - schedule.x_min) / schedule.blend_width)
        ramp[~result.proj.pair_nodes] = 0.0
        delta = result.pair.flat() * np.repeat(ramp, m)
        new_nodes = ramp > 0.999

        if covered.any():
            both = covered & new_nodes
            if both.any():
                dofs = (np.where(both)[0][:, None] * m + np.arange(m)).ravel()
                upd = float(np.linalg.norm(delta[dofs]))
                ref = float(np.linalg.norm(f_rec[dofs]))
                overlaps.append({"level": float(level), "update_norm": upd,
                                 "reference_norm": ref,
                                 "relative_update": upd / max(ref, 1e-300)})
        f_rec = f_rec + delta
        covered |= new_nodes
        rep = dict(result.diagnostics)
        rep["level"] = float(level)
        rep["n_family"] = len(fam)
        reports.append(rep)
        if verbose:
            print(f"[layer_strip] level {level:.3f}: family {len(fam)}, "
                  f"residual {rep['residual']:.2e}, iters {rep['iterations']}")
    return LayerStripResult(pair=TensorPair.from_flat(grid, kind, f_rec),
                            grid=grid, layer_reports=reports,
                            overlap_consistency=overlaps, covered_nodes=covered)


def _shell_kwargs(schedule: LayerSchedule) -> dict:
    kw = dict(schedule.family_kwargs)
    kw.setdefault("x_floor", 0.0)
    if schedule.grad_tau is not None:
        kw.setdefault("grad_tau", schedule.grad_tau)
    if schedule.center is not None:
        kw.setdefault("center", schedule.center)
    return kw


def global_solenoidal_error(kind: str, geom, grid: Grid, diff: TensorPair,
                            reference: TensorPair, mask: Optional[np.ndarray] = None,
                            tol: float = 1e-9) -> float:
    """Norm of the gauge-projected difference relative to the projected truth.

    Uses the plain (unconjugated) projector on the masked region with
    Dirichlet potentials, i.e. the natural global solenoidal representative.
    """
    proj = build_gauge_projector(kind, geom, grid, chart=None, F=0.0,
                                 pair_nodes=mask, pot_nodes=None)
    dofs = proj.pair_dof_index()
    s_diff, _, _ = solenoidal_split(proj, diff.flat()[dofs], tol=tol)
    s_ref, _, _ = solenoidal_split(proj, reference.flat()[dofs], tol=tol)
    return _m_norm(proj.M_pair, s_diff) / max(_m_norm(proj.M_pair, s_ref), 1e-300)
