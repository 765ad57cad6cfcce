"""Oscillation seminorms of piecewise-constant grid functions.

``Osc(f, r, x)`` is the essential oscillation of ``f`` over the open window
``(x - r, x + r)``, clipped to [0, 1] on the interval and wrapped mod 1 on
the torus.  For a grid function it is max minus min over the cells whose
interior meets the window, and ``x -> Osc(f, r, x)`` is piecewise constant
with breakpoints at ``j/n -+ r``.  ``osc1`` integrates it exactly by sweeping
those breakpoints with two monotone deques.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ParameterError, StructuralError
from .transfer import GridDensity

DOMAINS = ("interval", "torus")


@njit(cache=True)
def _sweep(values, r, torus):
    n = values.size
    gosc = values.max() - values.min()
    if torus and 2.0 * r * n >= n + 1:
        # every window covers all cells
        return gosc
    ev = np.empty(2 * n + 4)
    m = 0
    for k in range(n + 1):
        for s in (-r, r):
            e = k / n + s
            if torus:
                e = e - math.floor(e)
            if 0.0 < e < 1.0:
                ev[m] = e
                m += 1
    ev[m] = 0.0
    ev[m + 1] = 1.0
    ev = np.sort(ev[: m + 2])

    # unwrapped indices j live at ext[j + n]
    ext = np.concatenate((values, values, values))
    maxq = np.empty(ext.size, np.int64)
    minq = np.empty(ext.size, np.int64)
    mx_h = mx_t = mn_h = mn_t = 0
    pushed = -(1 << 40)
    total = 0.0
    for s in range(ev.size - 1):
        a, b = ev[s], ev[s + 1]
        if b <= a:
            continue
        x = 0.5 * (a + b)
        lo = int(math.floor(n * (x - r)))
        hi = int(math.ceil(n * (x + r))) - 1
        if torus:
            if hi - lo + 1 >= n:
                total += gosc * (b - a)
                continue
        else:
            lo = max(lo, 0)
            hi = min(hi, n - 1)
        if pushed < lo - 1:
            pushed = lo - 1
        while pushed < hi:
            pushed += 1
            v = ext[pushed + n]
            while mx_t > mx_h and ext[maxq[mx_t - 1] + n] <= v:
                mx_t -= 1
            maxq[mx_t] = pushed
            mx_t += 1
            while mn_t > mn_h and ext[minq[mn_t - 1] + n] >= v:
                mn_t -= 1
            minq[mn_t] = pushed
            mn_t += 1
        while maxq[mx_h] < lo:
            mx_h += 1
        while minq[mn_h] < lo:
            mn_h += 1
        total += (ext[maxq[mx_h] + n] - ext[minq[mn_h] + n]) * (b - a)
    return total


@njit(cache=True)
def _sweep_many(values, radii, torus):
    out = np.empty(radii.size)
    for i in range(radii.size):
        out[i] = _sweep(values, radii[i], torus)
    return out


def _check_domain(domain):
    if domain not in DOMAINS:
        raise ParameterError(f"domain must be one of {DOMAINS}, got {domain!r}")
    return domain == "torus"


def window_cells(n: int, r: float, x: float, domain: str = "interval"):
    """Indices of cells whose interior meets the open window around ``x``."""
    torus = _check_domain(domain)
    lo = math.floor(n * (x - r) - 1) + 1
    hi = math.ceil(n * (x + r)) - 1
    if torus:
        if hi - lo + 1 >= n:
            return np.arange(n)
        return np.arange(lo, hi + 1) % n
    return np.arange(max(lo, 0), min(hi, n - 1) + 1)


def osc_at(f: GridDensity, r: float, x: float, domain: str = "interval") -> float:
    if r <= 0:
        raise ParameterError("r must be positive")
    cells = f.values[window_cells(f.n, r, x, domain)]
    return float(cells.max() - cells.min()) if cells.size else 0.0


def osc1(f: GridDensity, r: float, domain: str = "interval") -> float:
    """Exact ``integral of Osc(f, r, x) dx`` over the interval or the torus."""
    if r <= 0:
        raise ParameterError("r must be positive")
    torus = _check_domain(domain)
    return float(_sweep(np.ascontiguousarray(f.values), float(r), torus))


def osc1_many(f: GridDensity, radii, domain: str = "interval") -> np.ndarray:
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0):
        raise ParameterError("radii must be positive")
    torus = _check_domain(domain)
    return _sweep_many(np.ascontiguousarray(f.values), radii, torus)


def default_r_grid(n: int, num: int = 64) -> np.ndarray:
    """Geometric radii from 1 down to the cell width ``1/n``."""
    return np.geomspace(1.0, 1.0 / n, num)


def dyadic_r_grid(n: int) -> np.ndarray:
    """Radii ``2^-k`` from 1 down to the last power of two ``>= 1/n``."""
    kmax = int(math.floor(math.log2(n)))
    return 2.0 ** -np.arange(kmax + 1)


@dataclass(frozen=True)
class OscillationProfile:
    r_grid: np.ndarray
    osc1_values: np.ndarray
    domain: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "osc1"])
        for r, v in zip(self.r_grid, self.osc1_values):
            w.writerow([format(r, ".17g"), format(v, ".17g")])
        return buf.getvalue()


def oscillation_profile(f: GridDensity, r_grid=None, domain: str = "interval") -> OscillationProfile:
    r_grid = default_r_grid(f.n) if r_grid is None else np.asarray(r_grid, dtype=float)
    r_grid = np.sort(r_grid)[::-1]
    return OscillationProfile(r_grid, osc1_many(f, r_grid, domain), domain)


@dataclass(frozen=True)
class VarNormResult:
    p: float
    var: float
    l1: float
    argmax_r: float

    @property
    def norm(self) -> float:
        return self.var + self.l1


def var_norm(f: GridDensity, p: float, r_grid=None, domain: str = "interval") -> VarNormResult:
    """``var_{1,1/p}`` as a maximum over ``r_grid`` of ``Osc_1(f, r) / r^{1/p}``, plus the L1 norm."""
    if p < 1:
        raise ParameterError(f"p must be >= 1, got {p}")
    r_grid = default_r_grid(f.n) if r_grid is None else np.asarray(r_grid, dtype=float)
    if r_grid.size == 0:
        raise ParameterError("empty r_grid")
    ratios = osc1_many(f, r_grid, domain) / r_grid ** (1.0 / p)
    k = int(np.argmax(ratios))
    return VarNormResult(
        p=float(p),
        var=float(ratios[k]),
        l1=float(np.abs(f.values).sum() / f.n),
        argmax_r=float(r_grid[k]),
    )


def var_many(values: np.ndarray, p: float, r_grid, domain: str = "interval") -> np.ndarray:
    """Seminorm of each row of a 2-d array of cell values."""
    torus = _check_domain(domain)
    r_grid = np.asarray(r_grid, dtype=float)
    weights = r_grid ** (-1.0 / p)
    return np.array(
        [np.max(_sweep_many(np.ascontiguousarray(v), r_grid, torus) * weights) for v in values]
    )


def l1_distance(f: GridDensity, g: GridDensity) -> float:
    if f.n != g.n:
        raise StructuralError(f"grid sizes differ: {f.n} vs {g.n}")
    return float(np.abs(f.values - g.values).sum() / f.n)
