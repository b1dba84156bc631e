"""Regular grids, multilinear interpolation, difference matrices, tensor packing.

Shared low-level machinery for the field, normal-operator and inversion
modules.  Conventions fixed here and used everywhere else:

* grid nodes are a tensor product of ``linspace(lo_k, hi_k, shape_k)``;
* flat node index is C-order over the shape;
* a field with ``m`` components is stored as an ``(N, m)`` array, and its
  flat dof vector is ``values.ravel()`` (component index fastest);
* symmetric 2-tensors on ``n`` coordinates are stored upper-triangular
  row-major: for n=3 the order is (11, 12, 13, 22, 23, 33);
* ``sym_flat`` is the isometric flattening (off-diagonal entries scaled by
  sqrt(2)) so that the Euclidean dot of two flattenings equals the Frobenius
  pairing of the tensors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

SQRT2 = np.sqrt(2.0)


def sym_index_pairs(n: int):
    """Upper-triangular (i, j) pairs, row-major, for n coordinates."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def sym_storage_size(n: int) -> int:
    return n * (n + 1) // 2


def sym_flat(T: np.ndarray) -> np.ndarray:
    """Isometric flattening of a symmetric matrix (last two axes)."""
    n = T.shape[-1]
    cols = []
    for i, j in sym_index_pairs(n):
        c = T[..., i, j]
        cols.append(c if i == j else SQRT2 * c)
    return np.stack(cols, axis=-1)


def sym_unflat(v: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`sym_flat`."""
    T = np.zeros(v.shape[:-1] + (n, n), dtype=v.dtype)
    for k, (i, j) in enumerate(sym_index_pairs(n)):
        val = v[..., k] if i == j else v[..., k] / SQRT2
        T[..., i, j] = val
        T[..., j, i] = val
    return T


def sym_pair_weights(n: int) -> np.ndarray:
    """Multiplicity of each stored component in the Frobenius pairing."""
    return np.array([1.0 if i == j else 2.0 for i, j in sym_index_pairs(n)])


@dataclass(frozen=True)
class Grid:
    """Axis-aligned regular grid over a box in R^n."""

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) != self.lo.size or len(self.shape) != self.hi.size:
            raise ValueError("grid shape/bounds dimension mismatch")
        if any(s < 2 for s in self.shape):
            raise ValueError("grid needs at least 2 nodes per axis")

    @classmethod
    def from_bbox(cls, bbox, shape) -> "Grid":
        bbox = np.asarray(bbox, dtype=float)
        return cls(bbox[:, 0], bbox[:, 1], tuple(shape))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.shape) - 1)

    @property
    def bbox(self) -> np.ndarray:
        return np.stack([self.lo, self.hi], axis=1)

    def axes(self):
        return [np.linspace(self.lo[k], self.hi[k], self.shape[k]) for k in range(self.ndim)]

    def points(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, ndim), C-order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interp_weights(self, pts: np.ndarray):
        """Multilinear interpolation stencil for a batch of points.

        Returns ``(idx, w)`` with shapes (Q, 2^ndim): flat node indices and
        weights.  Points outside the box get all-zero weights (fields are
        extended by zero outside the grid).
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        q, n = pts.shape
        h = self.spacing
        rel = (pts - self.lo) / h
        inside = np.all((rel >= -1e-12) & (rel <= np.array(self.shape) - 1 + 1e-12), axis=1)
        rel = np.clip(rel, 0.0, np.array(self.shape) - 1)
        base = np.minimum(rel.astype(int), np.array(self.shape) - 2)
        frac = rel - base

        corners = np.array(list(itertools.product((0, 1), repeat=n)))  # (2^n, n)
        # weight per corner: prod over axes of frac or (1 - frac)
        w = np.ones((q, corners.shape[0]))
        for k in range(n):
            fk = frac[:, k][:, None]
            w = w * np.where(corners[None, :, k] == 1, fk, 1.0 - fk)
        w[~inside] = 0.0

        strides = np.cumprod((self.shape + (1,))[:0:-1])[::-1]  # C-order strides
        flat_base = base @ strides
        offs = corners @ strides
        idx = flat_base[:, None] + offs[None, :]
        return idx, w

    def interpolate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Evaluate node values (N,) or (N, m) at points by multilinear interp."""
        idx, w = self.interp_weights(pts)
        vals = np.asarray(values)
        if vals.ndim == 1:
            return np.einsum("qc,qc->q", w, vals[idx])
        return np.einsum("qc,qcm->qm", w, vals[idx])

    def diff_matrix(self, axis: int) -> sp.csr_matrix:
        """Sparse d/dz_axis on node values: central interior, one-sided edges."""
        n1 = self.shape[axis]
        h = self.spacing[axis]
        d = sp.lil_matrix((n1, n1))
        for i in range(n1):
            if i == 0:
                d[i, 0], d[i, 1], d[i, 2] = -1.5 / h, 2.0 / h, -0.5 / h
            elif i == n1 - 1:
                d[i, i], d[i, i - 1], d[i, i - 2] = 1.5 / h, -2.0 / h, 0.5 / h
            else:
                d[i, i - 1], d[i, i + 1] = -0.5 / h, 0.5 / h
        d = d.tocsr()
        mats = []
        for k, s in enumerate(self.shape):
            mats.append(d if k == axis else sp.identity(s, format="csr"))
        out = mats[0]
        for m in mats[1:]:
            out = sp.kron(out, m, format="csr")
        return out

    def node_index(self, multi_idx) -> int:
        return int(np.ravel_multi_index(multi_idx, self.shape))


@dataclass
class DiscreteOperator:
    """A dense or sparse matrix with a note of what dof layout it maps."""

    matrix: object
    domain: str
    codomain: str
    meta: dict | None = None

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ vec


def component_count(kind: str, n: int) -> int:
    """Number of stored components per node of a tensor pair."""
    if kind == "bf":
        return n + 1
    if kind == "hb":
        return sym_storage_size(n) + n
    raise ValueError(f"unknown pair kind {kind!r}")
