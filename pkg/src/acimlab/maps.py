"""Piecewise expanding interval maps: representation, validation, inverse branches.

A map is a finite partition ``0 = a_0 < ... < a_q = 1`` together with one
monotone branch per subinterval.  Branch evaluators are numpy-vectorised
callables; user-defined maps are restricted to piecewise-linear tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import NumericalError, ParameterError, StructuralError

ROOT_TOL = 1e-14
ROOT_MAXITER = 200
IMAGE_TOL = 1e-12


@dataclass(frozen=True)
class Branch:
    """One monotone piece of a map, defined on ``[left, right]``."""

    left: float
    right: float
    forward: Callable
    derivative: Callable
    increasing: bool

    @property
    def endpoint_values(self):
        return float(self.forward(self.left)), float(self.forward(self.right))

    @property
    def image(self):
        lo, hi = self.endpoint_values
        return (lo, hi) if lo <= hi else (hi, lo)


@dataclass(frozen=True)
class PiecewiseMap:
    """A map of the class of piecewise expanding C^{1+eps} interval maps.

    Parameters
    ----------
    partition : sequence of float
        Strictly increasing breakpoints starting at 0 and ending at 1.
    branches : sequence of Branch
        One branch per partition interval, in order.
    expansion_s : float
        Claimed lower bound on ``|tau'|``.
    holder_eps : float
        Claimed Holder exponent of ``tau'``.  Metadata only.
    name : str
        Provenance label used in reports.
    """

    partition: tuple
    branches: tuple
    expansion_s: float
    holder_eps: float = 1.0
    name: str = "custom"
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        part = tuple(float(a) for a in self.partition)
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "branches", tuple(self.branches))
        _check_partition(part)
        if len(self.branches) != len(part) - 1:
            raise StructuralError(
                f"{len(part) - 1} partition intervals but {len(self.branches)} branches"
            )
        for i, br in enumerate(self.branches):
            if br.left != part[i] or br.right != part[i + 1]:
                raise StructuralError(f"branch {i} does not match its partition interval")
        if not self.expansion_s > 0:
            raise StructuralError("expansion_s must be positive")
        if not self.holder_eps > 0:
            raise StructuralError("holder_eps must be positive")

    @property
    def q(self) -> int:
        return len(self.branches)

    @property
    def label(self) -> str:
        if not self.params:
            return self.name
        args = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.name}({args})"

    def branch_index(self, x):
        """Index of the branch owning ``x`` (right-continuous; 1 goes to the last branch)."""
        idx = np.searchsorted(self.partition, x, side="right") - 1
        return np.clip(idx, 0, self.q - 1)

    def __call__(self, x):
        """Vectorised evaluation without domain checks."""
        x = np.asarray(x, dtype=float)
        idx = self.branch_index(x)
        out = np.empty_like(x)
        for i, br in enumerate(self.branches):
            mask = idx == i
            if np.any(mask):
                out[mask] = br.forward(x[mask])
        return out

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        idx = self.branch_index(x)
        out = np.empty_like(x)
        for i, br in enumerate(self.branches):
            mask = idx == i
            if np.any(mask):
                out[mask] = br.derivative(x[mask])
        return out


def _check_partition(part: Sequence[float]) -> None:
    if len(part) < 2:
        raise StructuralError("partition needs at least two points")
    if part[0] != 0.0 or part[-1] != 1.0:
        raise StructuralError(f"partition must start at 0 and end at 1, got {part[0]}, {part[-1]}")
    if any(b <= a for a, b in zip(part, part[1:])):
        raise StructuralError("partition must be strictly increasing")


@dataclass(frozen=True)
class ValidationReport:
    min_abs_derivative: float
    monotone_ok: tuple
    image_ok: tuple
    sampled_holder_constant: float
    expansion_s: float

    @property
    def expansion_ok(self) -> bool:
        # 1e-12 relative slack: the claimed bound may be attained at a sample.
        return self.expansion_s > 1 and self.min_abs_derivative >= self.expansion_s * (1 - 1e-12)

    @property
    def passed(self) -> bool:
        return (
            self.expansion_ok
            and self.min_abs_derivative > 1
            and all(self.monotone_ok)
            and all(self.image_ok)
        )


def validate_map(tmap: PiecewiseMap, samples_per_branch: int = 1000) -> ValidationReport:
    """Sampled check of the branch conditions (expansion, monotone branches, images inside [0, 1]).

    Samples are a uniform grid strictly inside each branch interval.  The
    Holder constant of the derivative is a sampled estimate over pairs of
    grid points at dyadic lags, never a certificate.
    """
    if samples_per_branch < 2:
        raise ParameterError("samples_per_branch must be >= 2")
    _check_partition(tmap.partition)
    eps = tmap.holder_eps
    min_abs = math.inf
    monotone, images = [], []
    holder = 0.0
    for br in tmap.branches:
        xs = np.linspace(br.left, br.right, samples_per_branch + 2)[1:-1]
        d = np.asarray(br.derivative(xs), dtype=float)
        min_abs = min(min_abs, float(np.min(np.abs(d))))
        sign = 1.0 if br.increasing else -1.0
        monotone.append(bool(np.all(sign * d > 0)))
        lo, hi = br.image
        images.append(lo >= -IMAGE_TOL and hi <= 1 + IMAGE_TOL)
        lag = 1
        while lag < len(xs):
            num = np.abs(d[lag:] - d[:-lag])
            den = np.abs(xs[lag:] - xs[:-lag]) ** eps
            holder = max(holder, float(np.max(num / den)))
            lag *= 2
    return ValidationReport(
        min_abs_derivative=min_abs,
        monotone_ok=tuple(monotone),
        image_ok=tuple(images),
        sampled_holder_constant=holder,
        expansion_s=tmap.expansion_s,
    )


def eval_map(tmap: PiecewiseMap, x: float) -> float:
    """Evaluate the map at a single point of [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ParameterError(f"x = {x} outside [0, 1]")
    br = tmap.branches[int(tmap.branch_index(x))]
    return float(br.forward(x))


def inverse_branch(tmap: PiecewiseMap, branch_index: int, y: float) -> Optional[float]:
    """Solve ``tau_i(x) = y`` on branch ``i``; ``None`` if ``y`` is not in the image.

    Bisection keeps a bracket at all times; a Newton step replaces the
    midpoint whenever it lands inside the current bracket.
    """
    if not 0 <= branch_index < tmap.q:
        raise ParameterError(f"branch index {branch_index} out of range")
    br = tmap.branches[branch_index]
    lo_val, hi_val = br.endpoint_values
    if not min(lo_val, hi_val) <= y <= max(lo_val, hi_val):
        return None
    if y == lo_val:
        return br.left
    if y == hi_val:
        return br.right
    sign = 1.0 if br.increasing else -1.0
    a, b = br.left, br.right
    x = 0.5 * (a + b)
    for _ in range(ROOT_MAXITER):
        g = sign * (float(br.forward(x)) - y)
        if g == 0.0:
            return x
        if g > 0:
            b = x
        else:
            a = x
        if b - a <= ROOT_TOL:
            return 0.5 * (a + b)
        dg = float(br.derivative(x))
        x_new = x - sign * g / dg if dg != 0 else 0.5 * (a + b)
        if not a < x_new < b:
            x_new = 0.5 * (a + b)
        if abs(x_new - x) <= 0.1 * ROOT_TOL:
            return x_new
        x = x_new
    raise NumericalError(f"inverse_branch did not converge for y={y} on branch {branch_index}")


def inverse_branch_many(tmap: PiecewiseMap, branch_index: int, ys) -> np.ndarray:
    """Vectorised :func:`inverse_branch`; points outside the image give ``nan``."""
    br = tmap.branches[branch_index]
    ys = np.asarray(ys, dtype=float)
    lo_val, hi_val = br.endpoint_values
    out = np.full(ys.shape, np.nan)
    inside = (ys >= min(lo_val, hi_val)) & (ys <= max(lo_val, hi_val))
    out[inside & (ys == lo_val)] = br.left
    out[inside & (ys == hi_val)] = br.right
    todo = np.flatnonzero(inside & (ys != lo_val) & (ys != hi_val))
    if todo.size == 0:
        return out
    sign = 1.0 if br.increasing else -1.0
    y = ys[todo]
    a = np.full(y.shape, br.left)
    b = np.full(y.shape, br.right)
    x = 0.5 * (a + b)
    active = np.ones(y.shape, dtype=bool)
    for _ in range(ROOT_MAXITER):
        ia = np.flatnonzero(active)
        if ia.size == 0:
            break
        xa = x[ia]
        g = sign * (np.asarray(br.forward(xa), dtype=float) - y[ia])
        hit = g == 0.0
        b[ia] = np.where(g > 0, xa, b[ia])
        a[ia] = np.where(g < 0, xa, a[ia])
        dg = np.asarray(br.derivative(xa), dtype=float) * np.ones_like(xa)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_new = xa - sign * g / dg
        mid = 0.5 * (a[ia] + b[ia])
        bad = ~((x_new > a[ia]) & (x_new < b[ia]))
        x_new = np.where(bad, mid, x_new)
        narrow = (b[ia] - a[ia]) <= ROOT_TOL
        x_new = np.where(narrow, mid, x_new)
        step = np.abs(x_new - xa)
        x_new = np.where(hit, xa, x_new)
        x[ia] = x_new
        done = hit | narrow | (step <= 0.1 * ROOT_TOL)
        active[ia[done]] = False
    else:
        if np.any(active):
            raise NumericalError(f"inverse_branch_many did not converge on branch {branch_index}")
    out[todo] = x
    return out


def _linear_branch(left, right, slope, intercept):
    slope, intercept = float(slope), float(intercept)
    return Branch(
        left=float(left),
        right=float(right),
        forward=lambda x: slope * np.asarray(x, dtype=float) + intercept,
        derivative=lambda x: np.full(np.shape(x), slope),
        increasing=slope > 0,
    )


def piecewise_linear(breakpoints, slopes, intercepts, name="piecewise_linear") -> PiecewiseMap:
    """Map with branches ``slope_i * x + intercept_i`` on ``[b_i, b_{i+1}]``.

    ``expansion_s`` is taken as the smallest absolute slope, so a
    non-expanding table builds fine and is rejected by :func:`validate_map`.
    """
    breakpoints = [float(b) for b in breakpoints]
    _check_partition(breakpoints)
    if len(slopes) != len(breakpoints) - 1 or len(intercepts) != len(slopes):
        raise StructuralError("need one slope and one intercept per partition interval")
    if any(s == 0 for s in slopes):
        raise StructuralError("zero slope gives a non-monotone branch")
    branches = [
        _linear_branch(breakpoints[i], breakpoints[i + 1], slopes[i], intercepts[i])
        for i in range(len(slopes))
    ]
    return PiecewiseMap(
        partition=tuple(breakpoints),
        branches=tuple(branches),
        expansion_s=min(abs(float(s)) for s in slopes),
        holder_eps=1.0,
        name=name,
    )


def _sine_map(eta: float) -> PiecewiseMap:
    if not 0 < eta < 1 / (2 * math.pi):
        raise ParameterError(f"sine map needs 0 < eta < 1/(2 pi), got {eta}")
    two_pi = 2 * math.pi

    def f0(x):
        x = np.asarray(x, dtype=float)
        return 2 * x + eta * np.sin(two_pi * x)

    def f1(x):
        x = np.asarray(x, dtype=float)
        return 2 * x + eta * np.sin(two_pi * x) - 1

    def df(x):
        return 2 + two_pi * eta * np.cos(two_pi * np.asarray(x, dtype=float))

    # F(1/2) = 1 exactly, so the branch breakpoint is 1/2.
    return PiecewiseMap(
        partition=(0.0, 0.5, 1.0),
        branches=(
            Branch(0.0, 0.5, f0, df, True),
            Branch(0.5, 1.0, f1, df, True),
        ),
        expansion_s=2 - two_pi * eta,
        holder_eps=1.0,
        name="sine",
        params={"eta": eta},
    )


def builtin(name: str, params: Sequence[float] = ()) -> PiecewiseMap:
    """Named test maps: ``doubling``, ``sine`` (params ``[eta]``) and ``markov3``."""
    params = list(params)
    if name == "doubling":
        return piecewise_linear([0, 0.5, 1], [2, 2], [0, -1], name="doubling")
    if name == "markov3":
        return piecewise_linear([0, 0.5, 0.75, 1], [2, 2, 2], [0, -1, -1.5], name="markov3")
    if name == "sine":
        if len(params) != 1:
            raise ParameterError("sine map takes exactly one parameter, eta")
        return _sine_map(float(params[0]))
    raise ParameterError(f"unknown builtin map {name!r}")


def map_from_config(block: Mapping) -> PiecewiseMap:
    """Build a map from a config block such as ``{"name": "sine", "eta": 0.05}``."""
    if "name" not in block:
        raise ParameterError("map block needs a 'name'")
    name = block["name"]
    if name == "piecewise_linear":
        try:
            return piecewise_linear(block["breakpoints"], block["slopes"], block["intercepts"])
        except KeyError as exc:
            raise ParameterError(f"piecewise_linear map is missing {exc}") from None
    if name == "sine":
        if "eta" not in block:
            raise ParameterError("sine map needs 'eta'")
        return builtin("sine", [block["eta"]])
    return builtin(name)
