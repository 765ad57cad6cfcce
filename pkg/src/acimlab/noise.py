"""Convolution noise on the circle: bump kernels, the smoothing matrix, sampling.

Kernel profiles are polynomials on ``[-1, 1]`` (zero outside), which makes
values, derivative bounds and the CDF exact.  The smoothing operator is the
Ulam projection of convolution with the periodised, rescaled kernel; on a
uniform grid it is a circulant matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
from numpy.polynomial import Polynomial
from scipy.interpolate import PchipInterpolator

from .errors import NumericalError, ParameterError, StructuralError
from .maps import PiecewiseMap
from .transfer import TransferMatrix, store

# (1 - z^2)^k scaled to unit mass
PROFILES = {
    "biweight": Polynomial([1, 0, -1]) ** 2 * (15 / 16),
    "triweight": Polynomial([1, 0, -1]) ** 3 * (35 / 32),
}
CDF_POINTS = 4097


@dataclass(frozen=True)
class NoiseKernel:
    profile: str = "biweight"
    delta: float = 0.05

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ParameterError(f"unknown kernel profile {self.profile!r}")
        if not 0 < self.delta < 0.25:
            raise ParameterError(f"noise level must lie in (0, 1/4), got {self.delta}")
        poly = self.poly
        t, w = np.polynomial.legendre.leggauss(16)
        mass = float(w @ poly(t))
        if abs(mass - 1) > 1e-12:
            raise StructuralError(f"kernel mass {mass} != 1")
        dpoly = poly.deriv()
        if max(abs(poly(1.0)), abs(poly(-1.0)), abs(dpoly(1.0)), abs(dpoly(-1.0))) > 1e-12:
            raise StructuralError("kernel profile is not C^1 at the support boundary")

    @property
    def poly(self) -> Polynomial:
        return PROFILES[self.profile]

    @cached_property
    def deriv_bound(self) -> float:
        """``sup |q'|``, attained at a critical point of ``q'`` or at the ends."""
        d1 = self.poly.deriv()
        crit = [r.real for r in d1.deriv().roots() if abs(r.imag) < 1e-12 and -1 <= r.real <= 1]
        return float(max(abs(d1(c)) for c in crit + [-1.0, 1.0]))

    @cached_property
    def deriv_l1(self) -> float:
        """``||q'||_1``; a diagnostic only, never used in the assumption check."""
        d1 = self.poly.deriv()
        pts = sorted({-1.0, 1.0, *[r.real for r in d1.roots() if abs(r.imag) < 1e-12 and -1 < r.real < 1]})
        anti = d1.integ()
        return float(sum(abs(anti(b) - anti(a)) for a, b in zip(pts, pts[1:])))

    @cached_property
    def _inverse_cdf(self):
        t = np.linspace(-1.0, 1.0, CDF_POINTS)
        anti = self.poly.integ()
        cdf = anti(t) - anti(-1.0)
        cdf[0], cdf[-1] = 0.0, 1.0
        if np.any(np.diff(cdf) <= 0):
            raise NumericalError("tabulated kernel CDF is not strictly increasing")
        return PchipInterpolator(cdf, t)

    @property
    def label(self) -> str:
        return f"{self.profile}(delta={self.delta})"


def kernel_value(k: NoiseKernel, z):
    """Profile value ``q(z)``; zero for ``|z| >= 1``."""
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) < 1, k.poly(z), 0.0)
    return float(out) if out.ndim == 0 else out


def periodized_kernel(k: NoiseKernel, x, y):
    """``sum_m delta^{-1} q((x - y + m) / delta)``; only ``m`` in {-1, 0, 1} can contribute."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    total = sum(kernel_value(k, (d + m) / k.delta) for m in (-1, 0, 1)) / k.delta
    return float(total) if np.ndim(total) == 0 else total


def _offset_weight(k: NoiseKernel, n: int, d: int, nodes: int) -> float:
    """``n * int kappa(t) * hat_d(t) dt`` where ``hat_d`` is the density of ``x - y``
    for ``x`` in cell ``i`` and ``y`` in cell ``i - d`` (triangle of height ``1/n``).
    """
    delta = k.delta
    lo, hi = max((d - 1) / n, -delta), min((d + 1) / n, delta)
    if hi <= lo:
        return 0.0
    cuts = sorted({lo, hi, *[c for c in (d / n, 0.0) if lo < c < hi]})
    t, w = np.polynomial.legendre.leggauss(nodes)
    total = 0.0
    for a, b in zip(cuts, cuts[1:]):
        s = 0.5 * (b - a) * t + 0.5 * (a + b)
        kappa = k.poly(s / delta) / delta
        tri = 1.0 / n - np.abs(s - d / n)
        total += 0.5 * (b - a) * float(w @ (kappa * tri))
    return n * total


def noise_row(k: NoiseKernel, n: int) -> np.ndarray:
    """First column ``c`` of the circulant smoothing matrix, ``Q_ij = c[(i - j) mod n]``.

    The cell double integral is reduced exactly to a one-dimensional integral
    against the triangular density of ``x - y``.  Gauss-Legendre is applied
    per polynomial piece and refined until successive estimates agree to 1e-12.
    """
    D = int(math.ceil(k.delta * n)) + 1
    c = np.zeros(n)
    for d in range(-D, D + 1):
        nodes, prev = 8, None
        while True:
            val = _offset_weight(k, n, d, nodes)
            if prev is not None and abs(val - prev) < 1e-12:
                break
            if nodes > 256:
                raise NumericalError(f"quadrature did not converge for offset {d}")
            prev, nodes = val, nodes * 2
        c[d % n] += val
    return c


def noise_matrix(k: NoiseKernel, n: int) -> TransferMatrix:
    """Doubly stochastic circulant discretisation of the smoothing operator."""
    if n < 1:
        raise StructuralError("n must be >= 1")
    c = noise_row(k, n)
    total = c.sum()
    if abs(total - 1) >= 1e-10:
        raise NumericalError(f"noise matrix row/column sums deviate from 1 by {abs(total - 1):.3e}")
    c = c / total
    return TransferMatrix(store(scipy.linalg.circulant(c)), "noise")


def sample_noise(k: NoiseKernel, u):
    """Inverse-CDF sample ``delta * K^{-1}(u)`` for ``u`` in [0, 1)."""
    z = k._inverse_cdf(np.clip(np.asarray(u, dtype=float), 0.0, 1.0))
    out = k.delta * np.clip(z, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AssumptionReport:
    p: float
    expansion_s: float
    c_tilde_1: float
    alpha0_bound: float
    required_s: float
    deriv_bound: float
    deriv_l1: float

    @property
    def satisfied(self) -> bool:
        return self.alpha0_bound < 1 / self.c_tilde_1

    def as_dict(self) -> dict:
        return {
            "p": self.p,
            "expansion_s": self.expansion_s,
            "c_tilde_1": self.c_tilde_1,
            "alpha0_bound": self.alpha0_bound,
            "satisfied": self.satisfied,
            "required_s": self.required_s,
            "deriv_bound": self.deriv_bound,
            "deriv_l1": self.deriv_l1,
        }


def joint_constant(p: float, deriv_bound: float) -> float:
    return (1 + 2 ** (1 + 1 / p)) * 2 ** (1 / p) * max(1.0, 4 * deriv_bound)


def check_assumption(tmap: PiecewiseMap, k: NoiseKernel, p: float) -> AssumptionReport:
    """Joint expansion/kernel condition ``s^{-1/p} < 1 / C~_1``.  Reports, never raises on failure."""
    if p < 1:
        raise ParameterError(f"p must be >= 1, got {p}")
    c1 = joint_constant(p, k.deriv_bound)
    return AssumptionReport(
        p=float(p),
        expansion_s=tmap.expansion_s,
        c_tilde_1=c1,
        alpha0_bound=tmap.expansion_s ** (-1 / p),
        required_s=c1**p,
        deriv_bound=k.deriv_bound,
        deriv_l1=k.deriv_l1,
    )
