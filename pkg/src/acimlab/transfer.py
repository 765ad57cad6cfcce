"""Frobenius-Perron operator, pointwise and as an exact Ulam matrix.

Grid functions live on the uniform cells ``A_i = [i/n, (i+1)/n]``.  Matrices
act on the vector of cell values and are column-stochastic, so
``(1/n) * sum(values)`` (the integral) is preserved.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, StructuralError
from .maps import PiecewiseMap, inverse_branch, inverse_branch_many

KINDS = ("frobenius_perron", "noise", "perturbed")
SPARSE_THRESHOLD = 0.9


@dataclass(frozen=True)
class GridDensity:
    """Piecewise-constant function given by its ``n`` cell values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise StructuralError("GridDensity values must be a non-empty 1-d array")
        if not np.all(np.isfinite(v)):
            raise StructuralError("GridDensity values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def integral(self) -> float:
        return float(self.values.sum() / self.n)

    def is_probability_density(self, tol: float = 1e-10) -> bool:
        return bool(np.all(self.values >= 0) and abs(self.integral - 1.0) <= tol)

    def normalized(self) -> "GridDensity":
        return GridDensity(self.values / self.integral)

    def coarsen(self, m: int) -> "GridDensity":
        """Average groups of cells down to ``m`` cells (``m`` must divide ``n``)."""
        if self.n % m:
            raise StructuralError(f"{m} does not divide {self.n}")
        return GridDensity(self.values.reshape(m, -1).mean(axis=1))

    @classmethod
    def uniform(cls, n: int) -> "GridDensity":
        return cls(np.ones(n))

    @classmethod
    def from_function(cls, f: Callable, n: int, nodes: int = 8) -> "GridDensity":
        """Cell averages of ``f`` by Gauss-Legendre quadrature on each cell."""
        t, w = np.polynomial.legendre.leggauss(nodes)
        left = np.arange(n)[:, None] / n
        x = left + (t[None, :] + 1) / (2 * n)
        return cls(np.asarray(f(x), dtype=float) @ w / 2)

    def cell_centers(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) / self.n


@dataclass(frozen=True)
class TransferMatrix:
    """Column-stochastic matrix acting on cell values.

    ``entries`` is a dense ndarray or a scipy CSR matrix; assembly picks the
    sparse form when at least 90% of entries vanish.
    """

    entries: object
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"unknown matrix kind {self.kind!r}")
        shape = self.entries.shape
        if len(shape) != 2 or shape[0] != shape[1]:
            raise StructuralError(f"transfer matrix must be square, got {shape}")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.entries)

    def dense(self) -> np.ndarray:
        return self.entries.toarray() if self.is_sparse else np.asarray(self.entries)

    def column_sums(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=0)).ravel()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=1)).ravel()

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.entries @ v).ravel()

    def to_csv(self) -> str:
        """Dense row-major CSV preceded by an ``n,kind`` header row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "kind"])
        w.writerow([self.n, self.kind])
        for row in self.dense():
            w.writerow([format(v, ".17g") for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TransferMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["n", "kind"]:
            raise StructuralError("missing 'n,kind' header")
        n, kind = int(rows[1][0]), rows[1][1]
        data = np.array([[float(v) for v in r] for r in rows[2 : 2 + n]])
        return cls(store(data), kind)


def store(dense: np.ndarray):
    """Return CSR when the matrix is at least 90% zeros, else the dense array."""
    if np.count_nonzero(dense) <= (1 - SPARSE_THRESHOLD) * dense.size:
        return sp.csr_matrix(dense)
    return dense


def fp_apply_pointwise(tmap: PiecewiseMap, f: Callable, x: float) -> float:
    """``(P f)(x) = sum over preimages x_i of f(x_i) / |tau'(x_i)|``."""
    total = 0.0
    for i, br in enumerate(tmap.branches):
        xi = inverse_branch(tmap, i, x)
        if xi is None:
            continue
        total += float(f(xi)) / abs(float(br.derivative(xi)))
    return total


def ulam_matrix(tmap: PiecewiseMap, n: int) -> TransferMatrix:
    """Ulam matrix ``M_ij = n * m(A_j  intersect  tau^{-1} A_i)``, assembled exactly.

    For each branch the cell endpoints are clipped to the branch image and
    pulled back; consecutive preimages bound ``tau_b^{-1}(A_i)``, whose
    length is then split over the source cells it overlaps.
    """
    if n < 1:
        raise StructuralError("n must be >= 1")
    grid = np.arange(n + 1) / n
    rows, cols, vals = [], [], []
    for b, br in enumerate(tmap.branches):
        lo, hi = br.image
        lo, hi = max(lo, 0.0), min(hi, 1.0)
        i0 = int(np.floor(lo * n))
        i1 = min(int(np.ceil(hi * n)), n)
        if i1 <= i0:
            continue
        ys = np.clip(grid[i0 : i1 + 1], lo, hi)
        xs = inverse_branch_many(tmap, b, ys)
        if np.any(np.isnan(xs)):
            raise NumericalError(f"pull-back of cell endpoints failed on branch {b}")
        a = np.minimum(xs[:-1], xs[1:])
        c = np.maximum(xs[:-1], xs[1:])
        if np.any(c - a < -1e-12):
            raise NumericalError("negative preimage length")
        for k, i in enumerate(range(i0, i1)):
            if c[k] <= a[k]:
                continue
            j0 = min(int(np.floor(a[k] * n)), n - 1)
            j1 = min(int(np.ceil(c[k] * n)), n)
            js = np.arange(j0, max(j1, j0 + 1))
            overlap = np.minimum(c[k], (js + 1) / n) - np.maximum(a[k], js / n)
            keep = overlap > 0
            rows.append(np.full(int(keep.sum()), i))
            cols.append(js[keep])
            vals.append(n * overlap[keep])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    sums = np.asarray(mat.sum(axis=0)).ravel()
    if np.max(np.abs(sums - 1)) >= 1e-9:
        raise NumericalError(
            f"Ulam column sums deviate from 1 by {np.max(np.abs(sums - 1)):.3e}"
        )
    mat = mat @ sp.diags(1.0 / sums)
    if mat.nnz > (1 - SPARSE_THRESHOLD) * n * n:
        return TransferMatrix(mat.toarray(), "frobenius_perron")
    return TransferMatrix(mat.tocsr(), "frobenius_perron")


def apply_matrix(M: TransferMatrix, f: GridDensity) -> GridDensity:
    if M.n != f.n:
        raise StructuralError(f"matrix is {M.n}x{M.n} but density has {f.n} cells")
    return GridDensity(M.matvec(f.values))
