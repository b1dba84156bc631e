"""Magnetic geodesic flow: integration, convexity, local families, foliations.

The law of motion is z'' + Gamma(z', z') = E(z'), integrated by a 4th-order
one-step method with step-doubling error control.  Boundary crossings are
located by bisection on the boundary defining function, and all sampled paths
are clipped to their crossing times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from . import geometry as geo
from .errors import (DegenerateLevel, EmptyFamily, LeftChart, NotOnBoundary,
                     StepUnderflow)

_BOUNDARY_TOL = 1e-8


@dataclass
class PhasePoint:
    """A point (z, v) of phase space; on SM when |v|_g = 1."""

    z: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    def unit(self, geom: geo.ChartGeometry) -> "PhasePoint":
        return PhasePoint(self.z, self.v / geom.norm(self.z, self.v))


@dataclass
class StepControl:
    """Tolerances for the adaptive integrator.

    ``tol`` bounds the per-step local error estimate; ``fixed_step``
    switches off adaptivity entirely (used for convergence-order tests).
    """

    tol: float = 1e-10
    h0: float = 0.02
    max_step: float = 0.05
    min_step: float = 1e-12
    fixed_step: Optional[float] = None


@dataclass
class GeodesicPath:
    """Time-sampled unit-speed magnetic geodesic, clipped at boundary exits."""

    times: np.ndarray
    states: np.ndarray  # (m, 2n)
    exit_entry: Optional[float]  # backward boundary crossing time (<= 0)
    exit_exit: Optional[float]   # forward boundary crossing time (>= 0)
    trapped_flag: bool

    @property
    def dim(self) -> int:
        return self.states.shape[1] // 2

    @property
    def zs(self) -> np.ndarray:
        return self.states[:, : self.dim]

    @property
    def vs(self) -> np.ndarray:
        return self.states[:, self.dim:]

    @property
    def length(self) -> float:
        return float(self.times[-1] - self.times[0])


def _make_rhs(geom: geo.ChartGeometry, magnetic: bool) -> Callable:
    n = geom.dim
    const_g = bool(geom.meta.get("constant_metric"))
    const_om = bool(geom.meta.get("constant_magnetic"))

    if const_g and (const_om or not magnetic):
        # flat fast path: acceleration is a fixed linear map of the velocity
        center = 0.5 * (geom.bbox[:, 0] + geom.bbox[:, 1])
        gi0 = np.linalg.inv(geom.g(center))
        E0 = gi0 @ geom.Omega(center).T if magnetic else np.zeros((n, n))

        def rhs(y):
            out = np.empty(2 * n)
            out[:n] = y[n:]
            out[n:] = E0 @ y[n:]
            return out

        return rhs

    def rhs(y):
        z, v = y[:n], y[n:]
        gi = np.linalg.inv(geom.g(z))
        dg = geom.dg(z)
        if dg.any():
            T = np.einsum("jlk->ljk", dg) + np.einsum("klj->ljk", dg) - dg
            Gamma = 0.5 * np.einsum("il,ljk->ijk", gi, T)
            acc = -np.einsum("ijk,j,k->i", Gamma, v, v)
        else:
            acc = np.zeros(n)
        if magnetic:
            acc = acc + gi @ (geom.Omega(z).T @ v)
        return np.concatenate([v, acc])

    return rhs


def _rk4(rhs, y, h):
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _integrate_leg(geom, rhs, y0, t_end, ctl):
    """March from t=0 toward t_end (either sign); stop at a rho sign change.

    Returns (samples, crossing_time_or_None).  Samples exclude the t=0 state
    and include the bisected crossing state when one is found.
    """
    sign = 1.0 if t_end > 0 else -1.0
    span = abs(t_end)
    t, y = 0.0, y0.copy()
    rho = geom.rho(y0[: geom.dim])
    h = ctl.fixed_step if ctl.fixed_step else min(ctl.h0, ctl.max_step)
    samples = []
    while span - abs(t) > 1e-12:
        h_step = min(h, span - abs(t))
        if ctl.fixed_step:
            y_new = _rk4(rhs, y, sign * h_step)
        else:
            while True:
                y_full = _rk4(rhs, y, sign * h_step)
                y_half = _rk4(rhs, _rk4(rhs, y, sign * h_step / 2), sign * h_step / 2)
                err = np.max(np.abs(y_full - y_half)) / 15.0
                if err <= ctl.tol:
                    y_new = y_half
                    break
                if h_step <= ctl.min_step * 1.01:
                    raise StepUnderflow(
                        f"step {h_step:.2e} below {ctl.min_step:.2e}")
                h_step = max(h_step / 2, ctl.min_step)
            h = h_step
        t_new = t + sign * h_step
        z_new = y_new[: geom.dim]
        rho_new = geom.rho(z_new)
        if rho >= -1e-12 and rho_new < -1e-12:
            # bracket the boundary crossing on (t, t_new), bisect to 1e-10 in time
            s_lo, s_hi = 0.0, sign * h_step

            def rho_at(s):
                return geom.rho(_rk4(rhs, y, s)[: geom.dim]) if s != 0.0 else rho

            for _ in range(64):
                s_mid = 0.5 * (s_lo + s_hi)
                if rho_at(s_mid) >= 0.0:
                    s_lo = s_mid
                else:
                    s_hi = s_mid
                if abs(s_hi - s_lo) < 1e-10:
                    break
            s_cross = 0.5 * (s_lo + s_hi)
            y_cross = _rk4(rhs, y, s_cross) if s_cross != 0.0 else y.copy()
            samples.append((t + s_cross, y_cross))
            return samples, t + s_cross
        if not geom.inside_bbox(z_new):
            raise LeftChart(f"trajectory left bbox at t = {t_new:.6f}")
        samples.append((t_new, y_new))
        t, y, rho = t_new, y_new, rho_new
        if not ctl.fixed_step and err <= ctl.tol / 32:
            h = min(2 * h, ctl.max_step)
    return samples, None


def integrate(geom: geo.ChartGeometry, start: PhasePoint, t_span=(0.0, 5.0),
              step_ctl: Optional[StepControl] = None, magnetic: bool = True) -> GeodesicPath:
    """Integrate a magnetic geodesic over t_span = (t_min, t_max), t_min <= 0 <= t_max.

    Stops each leg at the first boundary crossing (rho sign change), refined
    by bisection; sets ``trapped_flag`` when a leg exhausts its span without
    exiting.  Raises LeftChart if the trajectory leaves the bounding box.
    """
    ctl = step_ctl or StepControl()
    t_min, t_max = float(t_span[0]), float(t_span[1])
    if t_min > 0 or t_max < 0:
        raise ValueError("t_span must contain 0")
    if not geom.inside_bbox(start.z):
        raise LeftChart("start point outside bbox")
    rhs = _make_rhs(geom, magnetic)
    y0 = np.concatenate([start.z, start.v])

    fwd, exit_exit = ([], None) if t_max == 0 else _integrate_leg(geom, rhs, y0, t_max, ctl)
    bwd, exit_entry = ([], None) if t_min == 0 else _integrate_leg(geom, rhs, y0, t_min, ctl)

    entries = sorted(bwd, key=lambda s: s[0]) + [(0.0, y0)] + fwd
    times = np.array([t for t, _ in entries])
    states = np.array([y for _, y in entries])

    trapped = (t_max > 0 and exit_exit is None) or (t_min < 0 and exit_entry is None)
    path = GeodesicPath(times=times, states=states, exit_entry=exit_entry,
                        exit_exit=exit_exit, trapped_flag=trapped)
    return _ensure_odd_samples(geom, rhs, path)


def _ensure_odd_samples(geom, rhs, path: GeodesicPath) -> GeodesicPath:
    """Insert one midpoint sample when the count is even (Simpson needs odd)."""
    m = path.times.size
    if m % 2 == 1 or m < 2:
        return path
    gaps = np.diff(path.times)
    k = int(np.argmax(gaps))
    t_mid = path.times[k] + 0.5 * gaps[k]
    y_mid = _rk4(rhs, path.states[k], 0.5 * gaps[k])
    times = np.insert(path.times, k + 1, t_mid)
    states = np.insert(path.states, k + 1, y_mid, axis=0)
    return GeodesicPath(times=times, states=states, exit_entry=path.exit_entry,
                        exit_exit=path.exit_exit, trapped_flag=path.trapped_flag)


def speed_drift(path: GeodesicPath, geom: geo.ChartGeometry) -> float:
    """Max over samples of | |v(t)|_g - |v(0)|_g |."""
    if path.times.size == 0:
        raise ValueError("empty path")
    speeds = np.array([geom.norm(z, v) for z, v in zip(path.zs, path.vs)])
    return float(np.max(np.abs(speeds - speeds[0])))


def magnetic_convexity(geom: geo.ChartGeometry, frame: geo.BoundaryFrame, v) -> float:
    """Lambda(z, v) - <E_z(v), nu(z)>_g on a boundary-tangent unit vector."""
    lam = geo.second_fundamental_form(geom, frame, v)
    Ev = geo.lorentz(geom, frame.z, v)
    return lam - geom.inner(frame.z, Ev, frame.nu)


def magnetic_convexity_flow(geom: geo.ChartGeometry, frame: geo.BoundaryFrame, v) -> float:
    """Same quantity from -(d^2/dt^2) rho along the magnetic geodesic."""
    z = frame.z
    if abs(geom.rho(z)) > _BOUNDARY_TOL:
        raise NotOnBoundary("frame point not on boundary")
    grad = geom.ginv(z) @ geom.grad_rho(z)
    ngrad = math.sqrt(grad @ geom.g(z) @ grad)
    d2 = geo.second_derivative_along_flow(geom, geom.boundary_fn, z, v, magnetic=True)
    return -d2 / ngrad


# -- local charts around a depth function ------------------------------------


@dataclass
class LocalChartParam:
    """Parameters (x, y, lambda, omega) of one family geodesic."""

    x: float
    y: np.ndarray
    lam: float
    omega: np.ndarray
    c: float
    eps: float

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)


class DepthChart:
    """A scalar depth function x on the chart plus adapted frames.

    x > 0 on the working layer, x = 0 on the artificial face.  Subclasses
    provide the map from (x, y) parameters to chart points; everything else
    (normals, tangent frames, directions, the concavity quantity alpha) is
    shared.
    """

    def __init__(self, geom: geo.ChartGeometry, c: float):
        self.geom = geom
        self.c = float(c)
        n = geom.dim
        self._ref_axes = np.eye(n)

    # subclass API
    def x(self, z) -> float:
        raise NotImplementedError

    def grad_x(self, z) -> np.ndarray:
        raise NotImplementedError

    def point_from(self, x0: float, y) -> np.ndarray:
        raise NotImplementedError

    def unit_normal(self, z) -> np.ndarray:
        """g-unit vector along grad x (points toward increasing x)."""
        g = self.geom.g(z)
        grad = self.geom.ginv(z) @ self.grad_x(z)
        return grad / math.sqrt(grad @ g @ grad)

    def tangent_frame(self, z) -> np.ndarray:
        """(n-1) g-orthonormal vectors spanning the level-set tangent space."""
        g = self.geom.g(z)
        nrm = self.unit_normal(z)
        cands = sorted(range(self.geom.dim), key=lambda k: abs(g[k] @ nrm))
        basis, frame = [nrm], []
        for k in cands:
            e = self._ref_axes[k].copy()
            for b in basis:
                e = e - (e @ g @ b) * b
            s = math.sqrt(e @ g @ e)
            if s < 1e-10:
                continue
            e = e / s
            basis.append(e)
            frame.append(e)
            if len(frame) == self.geom.dim - 1:
                break
        return np.array(frame)

    def direction(self, z, lam: float, omega) -> np.ndarray:
        """Unit velocity for lambda * normal + omega-combination of tangents."""
        omega = np.asarray(omega, dtype=float)
        frame = self.tangent_frame(z)
        v = lam * self.unit_normal(z) + omega @ frame
        return v / self.geom.norm(z, v)

    def alpha_at(self, z, lam: float, omega, h: float = 1e-2) -> float:
        """Second time derivative of x along the magnetic geodesic at t=0."""
        v = self.direction(z, lam, omega)
        return geo.second_derivative_along_flow(self.geom, lambda p: self.x(p), z, v, h=h)

    def alpha_forms(self, x0: float = None, y=None, n_omega: int = 32,
                    t2_convention: bool = True):
        """Fit alpha(omega) = omega^T A omega + b . omega at a base point.

        Even/odd splitting on an omega circle followed by least squares; with
        ``t2_convention`` the fits are divided by 2 so A, b are coefficients
        of the t^2 Taylor term of x(t) (the normalization used by the kernel
        and symbol formulas).
        """
        n = self.geom.dim
        if x0 is None:
            x0 = 0.05 * self.c
        if y is None:
            y = np.zeros(n - 1)
        z = self.point_from(x0, y)
        if n != 3:
            raise NotImplementedError("alpha form fitting implemented for n = 3")
        thetas = np.linspace(0, 2 * np.pi, n_omega, endpoint=False)
        omegas = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
        vals = np.array([self.alpha_at(z, 0.0, om) for om in omegas])
        even = 0.5 * (vals + np.roll(vals, n_omega // 2))
        odd = 0.5 * (vals - np.roll(vals, n_omega // 2))
        # quadratic fit for the even part, linear for the odd part
        Mq = np.stack([omegas[:, 0] ** 2, 2 * omegas[:, 0] * omegas[:, 1],
                       omegas[:, 1] ** 2], axis=1)
        qc, *_ = np.linalg.lstsq(Mq, even, rcond=None)
        A = np.array([[qc[0], qc[1]], [qc[1], qc[2]]])
        bc, *_ = np.linalg.lstsq(omegas, odd, rcond=None)
        if t2_convention:
            A, bc = A / 2.0, bc / 2.0
        return A, bc

    def lorentz_b(self, z) -> np.ndarray:
        """Default 1-form b: minus the normal component of E on the tangent frame."""
        frame = self.tangent_frame(z)
        nrm = self.unit_normal(z)
        return np.array([-self.geom.inner(z, geo.lorentz(self.geom, z, e), nrm)
                         for e in frame])


class LensChart(DepthChart):
    """Boundary lens x = c - rho(z) - eps |z - p|^2 around a boundary point p."""

    def __init__(self, geom: geo.ChartGeometry, p, c: float, eps: float):
        super().__init__(geom, c)
        self.p = np.asarray(p, dtype=float)
        self.eps = float(eps)
        if abs(geom.rho(self.p)) > _BOUNDARY_TOL:
            raise NotOnBoundary("lens anchor p must lie on the boundary")
        frame = geo.boundary_frame(geom, self.p)
        self._tangent_at_p = frame.tangent
        grad0 = self.grad_x(self.p)
        self._normal_line = grad0 / np.linalg.norm(grad0)

    def x(self, z) -> float:
        z = np.asarray(z, dtype=float)
        d = z - self.p
        return self.c - self.geom.rho(z) - self.eps * float(d @ d)

    def grad_x(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return -self.geom.grad_rho(z) - 2 * self.eps * (z - self.p)

    def point_from(self, x0: float, y) -> np.ndarray:
        """Chart point at depth level x0 and tangent-plane offset y."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        base = self.p + y @ self._tangent_at_p

        def f(s):
            return self.x(base + s * self._normal_line) - x0

        lo, hi = -4.0 * self.c - 1.0, 0.5
        for _ in range(40):
            if f(lo) < 0:
                break
            lo *= 1.5
        s = brentq(f, lo, hi, xtol=1e-13)
        return base + s * self._normal_line

    def y_extent(self, x0: float, margin: float = 0.05) -> float:
        """Radius of the y-disc at level x0 keeping base points inside M."""
        room = self.c - x0 - margin * self.c
        return math.sqrt(max(room, 0.0) / self.eps) if room > 0 else 0.0


class ShellChart(DepthChart):
    """Shell x = c - (level - tau(z)) below a closed convex level set of tau."""

    def __init__(self, geom: geo.ChartGeometry, tau: Callable, level: float, c: float,
                 grad_tau: Optional[Callable] = None, center=None):
        super().__init__(geom, c)
        self.tau = tau
        self.level = float(level)
        self.center = (np.zeros(geom.dim) if center is None
                       else np.asarray(center, dtype=float))
        self._grad_tau = grad_tau

    def x(self, z) -> float:
        return self.c - (self.level - float(self.tau(np.asarray(z, dtype=float))))

    def grad_x(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self._grad_tau is not None:
            return np.asarray(self._grad_tau(z), dtype=float)
        return geo._fd_gradient(self.tau, z)

    def point_from(self, x0: float, y) -> np.ndarray:
        """Point at level x0 along the ray from the center with angles y."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if self.geom.dim != 3:
            raise NotImplementedError("shell charts implemented for n = 3")
        th, ph = y
        d = np.array([math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph),
                      math.cos(th)])
        target = self.level - self.c + x0

        def f(r):
            return float(self.tau(self.center + r * d)) - target

        hi = float(np.max(self.geom.bbox[:, 1] - self.geom.bbox[:, 0]))
        r = brentq(f, 1e-9, hi, xtol=1e-13)
        return self.center + r * d


def alpha(geom: geo.ChartGeometry, param: LocalChartParam, p,
          chart: Optional[DepthChart] = None) -> float:
    """Concavity quantity alpha(x, y, lambda, omega) for a lens anchored at p."""
    chart = chart or LensChart(geom, p, param.c, param.eps)
    z = chart.point_from(param.x, param.y)
    return chart.alpha_at(z, param.lam, param.omega)


def calibrate_eps(geom: geo.ChartGeometry, p, c: float, n_dirs: int = 8,
                  max_halvings: int = 12) -> float:
    """Pick the lens bend parameter: start from the boundary convexity scale,
    halve until alpha > 0 over sampled omegas at the deepest test level."""
    frame = geo.boundary_frame(geom, p)
    convs = [magnetic_convexity(geom, frame, t) for t in frame.tangent]
    conv_min = min(convs)
    if conv_min <= 0:
        raise ValueError("boundary not strictly magnetic convex at p")
    eps0 = 0.1 * conv_min
    diam = 2.0 * math.sqrt(c / eps0)
    eps = max(0.1 * conv_min / diam**2, 1e-4)
    for _ in range(max_halvings):
        chart = LensChart(geom, p, c, eps)
        try:
            z = chart.point_from(0.1 * c, np.zeros(geom.dim - 1))
            thetas = np.linspace(0, 2 * np.pi, n_dirs, endpoint=False)
            ok = all(chart.alpha_at(z, 0.0, np.array([math.cos(t), math.sin(t)])) > 0
                     for t in thetas)
        except Exception:
            ok = False
        if ok:
            return eps
        eps /= 2
    raise ValueError("could not find eps with positive alpha")


@dataclass
class Family:
    """O-local geodesic family on a structured (x, y, lambda, omega) grid."""

    entries: list                      # [(LocalChartParam, GeodesicPath)]
    chart: DepthChart
    C: float
    x_levels: np.ndarray
    y_points: list                     # per level: (n_y_pts, n-1) array
    base_points: list                  # per level: (n_y_pts, n) array
    lam_values: list                   # per level: (n_lambda,) array
    omegas: np.ndarray                 # (n_omega, n-1)
    index: np.ndarray                  # (len(entries), 4) -> (i_x, i_y, i_lam, i_om)
    mask: np.ndarray                   # bool, False where the sample was dropped

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, k):
        return self.entries[k]

    @property
    def n_base(self) -> int:
        return sum(len(b) for b in self.base_points)

    def base_iter(self):
        """Yields (i_x, i_y, x_level, y, z_base)."""
        for i, (x0, ys, zs) in enumerate(zip(self.x_levels, self.y_points,
                                             self.base_points)):
            for j, (y, z) in enumerate(zip(ys, zs)):
                yield i, j, x0, y, z

    def resample(self, geom, step_ctl: StepControl, t_span_half: float = 4.0) -> list:
        """Re-integrate every entry's geodesic under a different step control.

        Returns paths aligned with the entries; used to simulate measurement
        data on a sample grid independent of the one the forward matrix uses.
        """
        paths = []
        for param, path in self.entries:
            k = int(np.argmin(np.abs(path.times)))
            z0 = path.zs[k]
            v0 = path.vs[k]
            paths.append(integrate(geom, PhasePoint(z0, v0),
                                   (-t_span_half, t_span_half), step_ctl))
        return paths


def _disc_points(radius: float, n_rings: int, n_theta: int) -> np.ndarray:
    """Deterministic polar grid on a disc, center included."""
    pts = [np.zeros(2)]
    for j in range(n_rings):
        r = radius * (j + 1) / n_rings
        for k in range(n_theta):
            t = 2 * np.pi * (k + 0.5 * (j % 2)) / n_theta
            pts.append(np.array([r * math.cos(t), r * math.sin(t)]))
    return np.array(pts)


def _sphere_angles(n_polar: int, n_azimuth: int) -> np.ndarray:
    """Deterministic (theta, phi) grid away from the poles."""
    out = []
    for i in range(n_polar):
        th = np.pi * (i + 0.5) / n_polar
        for j in range(n_azimuth):
            ph = 2 * np.pi * (j + 0.5 * (i % 2)) / n_azimuth
            out.append((th, ph))
    return np.array(out)


def _generate_family(geom, chart, x_levels, y_points, omegas, n_lambda, C,
                     x_floor, t_span, ctl, tol_geo, containment_of, c, eps):
    entries, index, ok = [], [], []
    lam_values = []
    base_points = []
    for x0, ys in zip(x_levels, y_points):
        lam_max = C * math.sqrt(max(x0 - x_floor, 0.0))
        lam_values.append(np.linspace(-lam_max, lam_max, n_lambda))
        base_points.append(np.array([chart.point_from(x0, y) for y in ys]))
    for i, (x0, ys) in enumerate(zip(x_levels, y_points)):
        lams = lam_values[i]
        for j, y in enumerate(ys):
            z0 = base_points[i][j]
            for k, lam in enumerate(lams):
                for l, om in enumerate(omegas):
                    v0 = chart.direction(z0, lam, om)
                    param = LocalChartParam(x=x0, y=y, lam=lam, omega=om, c=c, eps=eps)
                    good = True
                    try:
                        path = integrate(geom, PhasePoint(z0, v0), t_span, ctl)
                    except LeftChart:
                        path, good = None, False
                    if good and path.trapped_flag:
                        good = False
                    if good:
                        depth_min = min(containment_of(p) for p in path.zs)
                        if depth_min < x_floor - tol_geo:
                            good = False
                    if good:
                        r0 = abs(geom.rho(path.zs[0]))
                        r1 = abs(geom.rho(path.zs[-1]))
                        if max(r0, r1) > _BOUNDARY_TOL:
                            good = False
                    entries.append((param, path if good else None))
                    index.append((i, j, k, l))
                    ok.append(good)
    return entries, np.array(index), np.array(ok, dtype=bool), lam_values, base_points


def _calibrated_family(geom, chart, x_levels, y_points, omegas, n_lambda, C0,
                       x_floor, t_span, ctl, tol_geo, c, eps, max_shrink=10,
                       require_all=True):
    containment_of = chart.x
    C = C0
    for _ in range(max_shrink):
        entries, index, ok, lam_values, base_points = _generate_family(
            geom, chart, x_levels, y_points, omegas, n_lambda, C, x_floor,
            t_span, ctl, tol_geo, containment_of, c, eps)
        if ok.all():
            break
        if not require_all and ok.mean() > 0.98:
            break
        C *= 0.75
    if not ok.any():
        raise EmptyFamily("no family sample passed containment; "
                          "layer depth too large or convexity failed")
    entries = [(p, path) for (p, path), good in zip(entries, ok) if good]
    index = index[ok]
    return Family(entries=entries, chart=chart, C=C, x_levels=np.asarray(x_levels),
                  y_points=list(y_points), base_points=base_points,
                  lam_values=lam_values, omegas=omegas, index=index,
                  mask=ok)


def olocal_family(geom: geo.ChartGeometry, p, c: float, eps: float,
                  n_y: int = 3, n_lambda: int = 5, n_omega: int = 8,
                  n_x: int = 4, x_floor: float = 0.0, C0: Optional[float] = None,
                  step_ctl: Optional[StepControl] = None, tol_geo: float = 1e-9,
                  t_span_half: float = 3.0) -> Family:
    """Generate O-local magnetic geodesics through a lens at boundary point p.

    Base points sit on n_x depth levels, n_y rings of y-offsets per level;
    directions run over n_lambda values of |lambda| <= C sqrt(x - x_floor)
    and n_omega tangent directions.  C shrinks from its initial guess until
    every sample stays in {x >= x_floor - tol_geo} with both endpoints on the
    boundary.  Raises EmptyFamily when nothing passes.
    """
    if geom.dim != 3:
        raise NotImplementedError("family sampling implemented for n = 3")
    chart = LensChart(geom, p, c, eps)
    lo = x_floor + 0.12 * (c - x_floor)
    hi = x_floor + 0.72 * (c - x_floor)
    x_levels = np.linspace(lo, hi, n_x)
    y_points = []
    for x0 in x_levels:
        R = chart.y_extent(x0)
        if R <= 0:
            raise EmptyFamily(f"level x = {x0:.3f} has no room inside M")
        y_points.append(_disc_points(0.9 * R, n_y, max(3 * n_y, 6)))
    thetas = np.linspace(0, 2 * np.pi, n_omega, endpoint=False)
    omegas = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)

    if C0 is None:
        z_probe = chart.point_from(x_levels[0], np.zeros(2))
        a_min = min(chart.alpha_at(z_probe, 0.0, om) for om in omegas)
        if a_min <= 0:
            raise EmptyFamily("alpha not positive at probe point; decrease eps")
        C0 = 0.8 * math.sqrt(2.0 * a_min)
    ctl = step_ctl or StepControl(tol=1e-10, max_step=0.02)
    return _calibrated_family(geom, chart, x_levels, y_points, omegas, n_lambda,
                              C0, x_floor, (-t_span_half, t_span_half), ctl,
                              tol_geo, c, eps)


def shell_family(geom: geo.ChartGeometry, tau: Callable, level: float, c: float,
                 n_polar: int = 4, n_azimuth: int = 8, n_lambda: int = 5,
                 n_omega: int = 8, n_x: int = 4, x_floor: float = 0.0,
                 grad_tau: Optional[Callable] = None, C0: Optional[float] = None,
                 step_ctl: Optional[StepControl] = None, tol_geo: float = 1e-9,
                 t_span_half: float = 4.0, center=None) -> Family:
    """Near-tangent geodesic family grazing the shell below a tau level set.

    The whole-shell analogue of :func:`olocal_family` (lens bend eps = 0):
    base points cover the closed level sets, and containment keeps paths in
    {tau >= level - c + x_floor}.  Paths traverse the already-stripped outer
    region and end on the boundary of M.
    """
    if geom.dim != 3:
        raise NotImplementedError("shell sampling implemented for n = 3")
    chart = ShellChart(geom, tau, level, c, grad_tau=grad_tau, center=center)
    lo = x_floor + 0.15 * (c - x_floor)
    hi = x_floor + 0.8 * (c - x_floor)
    x_levels = np.linspace(lo, hi, n_x)
    angles = _sphere_angles(n_polar, n_azimuth)
    y_points = [angles for _ in x_levels]
    thetas = np.linspace(0, 2 * np.pi, n_omega, endpoint=False)
    omegas = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)

    if C0 is None:
        z_probe = chart.point_from(x_levels[0], angles[0])
        a_min = min(chart.alpha_at(z_probe, 0.0, om) for om in omegas)
        if a_min <= 0:
            raise EmptyFamily("alpha not positive on the shell probe")
        C0 = 0.8 * math.sqrt(2.0 * a_min)
    ctl = step_ctl or StepControl(tol=1e-10, max_step=0.02)
    return _calibrated_family(geom, chart, x_levels, y_points, omegas, n_lambda,
                              C0, x_floor, (-t_span_half, t_span_half), ctl,
                              tol_geo, c, 0.0, require_all=False)


# -- foliation and trapping diagnostics --------------------------------------


@dataclass
class FoliationLevelReport:
    level: float
    min_value: float
    argmin_point: np.ndarray
    argmin_direction: np.ndarray
    passed: bool


@dataclass
class FoliationReport:
    levels: list
    passed: bool

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "levels": [
                {"level": float(l.level), "min_value": float(l.min_value),
                 "argmin_point": list(map(float, l.argmin_point)),
                 "argmin_direction": list(map(float, l.argmin_direction)),
                 "passed": bool(l.passed)}
                for l in self.levels
            ],
        }


def foliation_check(geom: geo.ChartGeometry, tau: Callable, t_grid,
                    n_points: int = 12, n_dirs: int = 6, rng=None,
                    grad_tau: Optional[Callable] = None) -> FoliationReport:
    """Check strict magnetic convexity of tau level sets from {tau <= t}.

    For each level, samples points on tau^-1(t) and tangent unit directions,
    and evaluates (d^2/dt^2) tau(gamma) / |grad tau|_g along the magnetic
    geodesic (positive = convex).  Raises DegenerateLevel when grad tau
    vanishes at a sample.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    gtau = grad_tau or (lambda z: geo._fd_gradient(tau, z))
    reports = []
    for t in t_grid:
        vals = []
        for _ in range(8 * n_points):
            if len(vals) >= n_points * n_dirs:
                break
            z = rng.uniform(geom.bbox[:, 0], geom.bbox[:, 1])
            for _ in range(60):
                gz = np.asarray(gtau(z), dtype=float)
                ng2 = gz @ gz
                if ng2 < 1e-16:
                    break
                z = z - (float(tau(z)) - t) * gz / ng2
                if abs(float(tau(z)) - t) < 1e-11:
                    break
            if abs(float(tau(z)) - t) > 1e-9 or geom.rho(z) < 0 \
                    or not geom.inside_bbox(z):
                continue
            gz = np.asarray(gtau(z), dtype=float)
            grad_vec = geom.ginv(z) @ gz
            ngrad = math.sqrt(grad_vec @ geom.g(z) @ grad_vec)
            if ngrad < 1e-8:
                raise DegenerateLevel(f"|grad tau| = {ngrad:.2e} at level {t}")
            # tangent frame at z via Gram-Schmidt against the unit normal
            g = geom.g(z)
            nrm = grad_vec / ngrad
            frame = []
            basis = [nrm]
            for k in np.argsort(np.abs(g @ nrm)):
                e = np.eye(geom.dim)[k].copy()
                for b in basis:
                    e = e - (e @ g @ b) * b
                s = math.sqrt(e @ g @ e)
                if s < 1e-10:
                    continue
                e /= s
                basis.append(e)
                frame.append(e)
            for _ in range(n_dirs):
                w = rng.normal(size=len(frame))
                v = (w / np.linalg.norm(w)) @ np.array(frame)
                d2 = geo.second_derivative_along_flow(geom, tau, z, v, magnetic=True)
                vals.append((d2 / ngrad, z.copy(), v.copy()))
        if not vals:
            raise DegenerateLevel(f"no samples found on level {t}")
        vmin, zmin, dmin = min(vals, key=lambda r: r[0])
        reports.append(FoliationLevelReport(level=float(t), min_value=float(vmin),
                                            argmin_point=zmin, argmin_direction=dmin,
                                            passed=vmin > 0))
    return FoliationReport(levels=reports, passed=all(r.passed for r in reports))


@dataclass
class TrappingReport:
    trapped: list  # [(z, v)]
    n_seeds: int

    @property
    def clean(self) -> bool:
        return len(self.trapped) == 0

    def to_dict(self):
        return {"n_seeds": self.n_seeds, "n_trapped": len(self.trapped),
                "clean": self.clean,
                "trapped": [{"z": list(map(float, z)), "v": list(map(float, v))}
                            for z, v in self.trapped]}


def trapping_check(geom: geo.ChartGeometry, tau: Callable, a: float, t_max: float,
                   n_seeds: int = 40, rng=None,
                   step_ctl: Optional[StepControl] = None) -> TrappingReport:
    """Integrate seeds in {tau <= a} both ways; report orbits that never leave.

    A seed escapes a leg by crossing the boundary of M, leaving {tau <= a},
    or leaving the chart box.  An empty report is non-trapping evidence, not
    proof.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    ctl = step_ctl or StepControl(tol=1e-8, max_step=0.05)
    seeds = []
    for _ in range(100 * n_seeds):
        if len(seeds) >= n_seeds:
            break
        z = rng.uniform(geom.bbox[:, 0], geom.bbox[:, 1])
        if geom.rho(z) <= 1e-3 or float(tau(z)) > a:
            continue
        w = rng.normal(size=geom.dim)
        v = w / geom.norm(z, w)
        seeds.append((z, v))
    trapped = []
    for z, v in seeds:
        escaped = {}
        for leg, span in (("fwd", (0.0, t_max)), ("bwd", (-t_max, 0.0))):
            try:
                path = integrate(geom, PhasePoint(z, v), span, ctl)
            except LeftChart:
                escaped[leg] = True
                continue
            exited_m = (path.exit_exit is not None) or (path.exit_entry is not None)
            left_region = any(float(tau(p)) > a for p in path.zs)
            escaped[leg] = exited_m or left_region
        if not (escaped["fwd"] and escaped["bwd"]):
            trapped.append((z, v))
    return TrappingReport(trapped=trapped, n_seeds=len(seeds))
