"""Forward magnetic ray transform along integrated geodesics.

The transform of a fiberwise-polynomial field along one clipped geodesic is a
composite Simpson quadrature on the path's sample grid (nonuniform pairs
handled by the standard three-point rule), with the integral limits at the
bisected boundary-exit times.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import TrappedPath
from .flow import Family, GeodesicPath
from .grids import Grid, component_count, sym_index_pairs, sym_pair_weights
from .tensorfields import FiberPolynomial, TensorPair, evaluate


def simpson_weights(t: np.ndarray) -> np.ndarray:
    """Composite Simpson weights on a nonuniform sample grid (odd length)."""
    t = np.asarray(t, dtype=float)
    m = t.size
    if m == 1:
        return np.zeros(1)
    if m == 2:
        return np.array([0.5, 0.5]) * (t[1] - t[0])
    if m % 2 == 0:
        raise ValueError("Simpson weights need an odd number of samples")
    w = np.zeros(m)
    for k in range(0, m - 2, 2):
        h0 = t[k + 1] - t[k]
        h1 = t[k + 2] - t[k + 1]
        s = h0 + h1
        w[k] += s * (2 * h0 - h1) / (6 * h0)
        w[k + 1] += s**3 / (6 * h0 * h1)
        w[k + 2] += s * (2 * h1 - h0) / (6 * h1)
    return w


def ray_transform(f, path: GeodesicPath) -> float:
    """Integral of f(gamma(t), gamma'(t)) dt over the clipped path."""
    if path.trapped_flag:
        raise TrappedPath("path is trapped; ray transform needs boundary exits")
    vals = _eval_along(f, path)
    return float(simpson_weights(path.times) @ vals)


def _eval_along(f, path: GeodesicPath) -> np.ndarray:
    if isinstance(f, (TensorPair, FiberPolynomial)):
        return np.asarray(evaluate(f, path.zs, path.vs), dtype=float)
    if callable(f):
        return np.array([float(f(z, v)) for z, v in zip(path.zs, path.vs)])
    raise TypeError(f"cannot transform {type(f)!r}")


def transform_family(f, family: Family, threads: int = 1) -> np.ndarray:
    """Ray transform over every family entry, in family (lexicographic) order.

    Trapped entries (none, normally: the family generator drops them) are
    masked with NaN rather than raising.
    """
    if len(family) == 0:
        raise ValueError("empty family")
    out = np.empty(len(family))

    def work(k):
        _, path = family[k]
        try:
            out[k] = ray_transform(f, path)
        except TrappedPath:
            out[k] = np.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(family))))
    else:
        for k in range(len(family)):
            work(k)
    return out


def transform_matrix(family: Family, grid: Grid, kind: str,
                     point_scale: Optional[Callable] = None) -> sp.csr_matrix:
    """Sparse matrix of the ray transform on grid pair coefficients.

    Row j maps the flat dof vector of a TensorPair (trilinear on ``grid``) to
    the transform along family entry j.  ``point_scale(zs) -> (Q, m)`` may
    supply extra per-quadrature-point component weights (used for the
    exponential-conjugation compositions).
    """
    n = grid.ndim
    m = component_count(kind, n)
    pairs = sym_index_pairs(n)
    mult = sym_pair_weights(n)
    rows, cols, vals = [], [], []
    for j, (_, path) in enumerate(family):
        w = simpson_weights(path.times)
        zs, vs = path.zs, path.vs
        idx, iw = grid.interp_weights(zs)          # (Q, 8)
        comp_w = np.empty((zs.shape[0], m))
        if kind == "bf":
            comp_w[:, :n] = vs
            comp_w[:, n] = 1.0
        else:
            for k, (a, b) in enumerate(pairs):
                comp_w[:, k] = mult[k] * vs[:, a] * vs[:, b]
            comp_w[:, len(pairs):] = vs
        if point_scale is not None:
            comp_w = comp_w * point_scale(zs)
        # dof index = node * m + comp; quadrature weight w_q spreads over stencil
        contrib = (w[:, None, None] * iw[:, :, None]) * comp_w[:, None, :]
        dof = (idx[:, :, None] * m + np.arange(m)[None, None, :]).ravel()
        rows.append(np.full(dof.size, j, dtype=np.int64))
        cols.append(dof)
        vals.append(contrib.ravel())
    T = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(family), grid.n_nodes * m),
    )
    return T.tocsr()


def family_table(family: Family, values: np.ndarray) -> list:
    """Rows (ix, iy, ilam, iom, x, y.., lam, omega.., value) for CSV output."""
    rows = []
    for (param, _), (ix, iy, il, io), val in zip(family, family.index, values):
        rows.append([int(ix), int(iy), int(il), int(io), float(param.x),
                     *map(float, param.y), float(param.lam),
                     *map(float, param.omega), float(val)])
    return rows
